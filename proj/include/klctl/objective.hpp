#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "klctl/error.hpp"
#include "klctl/graph.hpp"
#include "klctl/model.hpp"

namespace klctl {

struct LossBreakdown {
  double recon_nll = 0.0;
  double kl = 0.0;
  double weight = 0.0;
  double total = 0.0;
};

// Plain diagonal Gaussian (values, not graph nodes).
struct Gaussian {
  std::vector<double> mu;
  std::vector<double> log_sigma;
};

// KL(q || p) = sum_k log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2.
inline double gaussian_kl(const Gaussian& q, const Gaussian& p) {
  const auto n = q.mu.size();
  if (q.log_sigma.size() != n || p.mu.size() != n || p.log_sigma.size() != n) {
    throw InputError("gaussian_kl: latent dimensions differ");
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double diff = q.mu[k] - p.mu[k];
    kl += (p.log_sigma[k] - q.log_sigma[k]) +
          (std::exp(2.0 * q.log_sigma[k]) + diff * diff) / (2.0 * std::exp(2.0 * p.log_sigma[k])) - 0.5;
  }
  return kl;
}

// Per-example KL between two batched diagonal Gaussians, [batch x 1].
template <class T>
Var gaussian_kl(Graph<T>& g, const LatentDistribution& q, const LatentDistribution& p) {
  if (g.shape(q.mu) != g.shape(p.mu) || g.shape(q.log_sigma) != g.shape(p.log_sigma) ||
      g.shape(q.mu) != g.shape(q.log_sigma)) {
    throw InputError("gaussian_kl: latent dimensions differ");
  }
  Var log_ratio = g.sub(p.log_sigma, q.log_sigma);
  Var diff = g.sub(q.mu, p.mu);
  Var numer = g.add(g.exp(g.scale(q.log_sigma, T(2))), g.mul(diff, diff));
  Var inv_var_p = g.exp(g.scale(p.log_sigma, T(-2)));
  Var terms = g.add_scalar(g.add(log_ratio, g.scale(g.mul(numer, inv_var_p), T(0.5))), T(-0.5));
  return g.sum_rows(terms);
}

// Summed -log softmax(logits)[target] over unmasked rows.
template <class T>
Var reconstruction_nll(Graph<T>& g, Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
  return g.cross_entropy(logits, targets, mask);
}

inline double reconstruction_nll(const std::vector<std::vector<double>>& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask) {
  if (targets.size() != logits.size() || mask.size() != logits.size()) throw InputError("reconstruction_nll: length mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    if (!mask[t]) continue;
    const auto& row = logits[t];
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= row.size()) {
      throw InputError("reconstruction_nll: target id outside vocabulary");
    }
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    total += mx + std::log(s) - row[static_cast<std::size_t>(targets[t])];
  }
  return total;
}

inline double weighted_loss(double recon_nll, double kl, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw InputError("KL weight must lie in [0, 1]");
  if (!(kl >= 0.0)) throw InputError("KL must be non-negative");
  return recon_nll + w * kl;
}

// Graph form of recon + w * kl; w is a constant with no gradient.
template <class T>
Var weighted_loss(Graph<T>& g, Var recon_nll, Var kl, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw InputError("KL weight must lie in [0, 1]");
  return g.add(recon_nll, g.scale(kl, static_cast<T>(w)));
}

}  // namespace klctl
