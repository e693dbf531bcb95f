#pragma once

#include <cmath>
#include <map>
#include <string>

#include "klctl/error.hpp"
#include "klctl/parameters.hpp"

namespace klctl {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double decay_factor = 0.9;
  std::uint64_t decay_interval = 1000;
};

// Learning rate after `step` completed updates: lr * factor^floor(step / interval).
inline double effective_learning_rate(const AdamConfig& cfg, std::uint64_t step) {
  const auto drops = cfg.decay_interval == 0 ? 0 : step / cfg.decay_interval;
  return cfg.learning_rate * std::pow(cfg.decay_factor, static_cast<double>(drops));
}

template <class T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

// One bias-corrected Adam update of every parameter in the store, reading
// gradients from Parameter::grad.
template <class T>
void adam_update(ParameterStore<T>& params, AdamState<T>& state) {
  const AdamConfig& cfg = state.config;
  const double lr = effective_learning_rate(cfg, state.step);
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (auto& [name, p] : params) {
    if (p.grad.shape != p.value.shape) throw StructuralError("adam: gradient shape mismatch for '" + name + "'");
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.shape != p.value.shape) m = Tensor<T>(p.value.rows(), p.value.cols());
    if (v.shape != p.value.shape) v = Tensor<T>(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad.data[i];
      m.data[i] = b1 * m.data[i] + (T(1) - b1) * g;
      v.data[i] = b2 * v.data[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m.data[i]) / c1;
      const double vhat = static_cast<double>(v.data[i]) / c2;
      p.value.data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  }
  ++state.step;
}

// Variant taking gradients keyed by parameter name (copied into the store).
template <class T>
void adam_update(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state) {
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw StructuralError("adam: no gradient for parameter '" + name + "'");
    if (it->second.shape != p.value.shape) throw StructuralError("adam: gradient shape mismatch for '" + name + "'");
    p.grad = it->second;
  }
  adam_update(params, state);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_global_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : params)
    for (T g : p.grad.data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [_, p] : params)
      for (T& g : p.grad.data) g *= s;
  }
  return norm;
}

}  // namespace klctl
