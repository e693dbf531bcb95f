#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "klctl/error.hpp"
#include "klctl/rng.hpp"
#include "klctl/tensor.hpp"

namespace klctl {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Named trainable tensors. std::map keeps addresses stable while entries are
// added and gives a fixed, name-sorted iteration order for serialization.
template <class T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    if (params_.count(name) != 0) throw StructuralError("duplicate parameter '" + name + "'");
    Parameter<T>& p = params_[name];
    p.name = name;
    p.grad = Tensor<T>(init.rows(), init.cols());
    p.value = std::move(init);
    return p;
  }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw StructuralError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StructuralError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

// Weight matrices: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> init_uniform_fan_in(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor<T> t(fan_in, fan_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  return t;
}

// Embedding tables: N(0, 0.02^2).
template <class T>
Tensor<T> init_embedding(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<T> t(rows, cols);
  for (auto& v : t.data) v = static_cast<T>(0.02 * rng.normal());
  return t;
}

}  // namespace klctl
