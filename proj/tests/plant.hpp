#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "klctl/control.hpp"

// First-order KL plant: KL_{t+1} = KL_t + alpha (g(w_t) - KL_t) with
// g(w) = kl_max (1 - w), closed through the PI controller.
struct PlantParams {
  double alpha = 0.05;
  double kl_max = 8.0;
  double kl0 = 0.0;
};

inline std::vector<double> simulate_plant(const klctl::PIConfig& cfg, int steps, PlantParams p = {}) {
  std::vector<double> kl{p.kl0};
  klctl::KlScheduler sched(cfg);
  for (int t = 0; t < steps; ++t) {
    const double w = sched.next(static_cast<std::uint64_t>(t), kl.back());
    kl.push_back(kl.back() + p.alpha * (p.kl_max * (1.0 - w) - kl.back()));
  }
  return kl;
}

inline double max_relative_error_after(const std::vector<double>& kl, double setpoint, std::size_t from) {
  double worst = 0.0;
  for (std::size_t t = from; t < kl.size(); ++t) worst = std::max(worst, std::abs(kl[t] - setpoint) / setpoint);
  return worst;
}

inline double peak_overshoot(const std::vector<double>& kl, double setpoint) {
  return std::max(0.0, *std::max_element(kl.begin(), kl.end()) - setpoint);
}
