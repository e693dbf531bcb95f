#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <variant>

#include "klctl/error.hpp"

namespace klctl {

// PI gains act on e = setpoint - observed KL; both gains are negative so a KL
// below the set point pushes the weight down.
struct PIConfig {
  double setpoint = 2.0;
  double kp = -0.01;
  double ki = -0.0001;
  std::uint64_t sampling_period = 1;
  bool anti_windup = true;

  void validate() const {
    if (!(setpoint > 0.0) || !std::isfinite(setpoint)) throw InputError("PI set point must be positive");
    if (!(kp < 0.0) || !(ki < 0.0)) throw InputError("PI gains must be negative");
    if (sampling_period < 1) throw InputError("sampling period must be >= 1");
  }
};

struct PIControllerState {
  double integral = 0.0;
  // Unclamped P + I from the previous update; the anti-windup gate reads it.
  double last_raw = 0.0;
  std::uint64_t step = 0;

  bool operator==(const PIControllerState&) const = default;
};

struct PIOutput {
  double weight = 0.0;
  PIControllerState state;
};

// One controller step. The integral only accumulates while the previous raw
// output was inside [0, 1]; the returned weight is the raw output clamped.
inline PIOutput pi_update(const PIControllerState& state, double observed_kl, const PIConfig& cfg) {
  if (!std::isfinite(observed_kl) || observed_kl < 0.0) {
    throw InputError("observed KL must be finite and non-negative, got " + std::to_string(observed_kl));
  }
  const double error = cfg.setpoint - observed_kl;
  const double proportional = cfg.kp * error;
  PIOutput out;
  out.state = state;
  const bool in_range = state.last_raw >= 0.0 && state.last_raw <= 1.0;
  if (!cfg.anti_windup || in_range) out.state.integral = state.integral + cfg.ki * error;
  const double raw = proportional + out.state.integral;
  out.state.last_raw = raw;
  out.state.step = state.step + 1;
  out.weight = std::clamp(raw, 0.0, 1.0);
  return out;
}

// Sigmoid ramp 1 / (1 + exp(-(t - midpoint) / slope)).
inline double cost_anneal_weight(double t, double midpoint, double slope) {
  if (!(slope > 0.0)) throw InputError("cost annealing slope must be positive");
  return 1.0 / (1.0 + std::exp(-(t - midpoint) / slope));
}

// Linear ramp over the first `ramp` fraction of each of `cycles` cycles
// spanning `total` steps, then held at 1.
inline double cyclical_anneal_weight(std::uint64_t t, std::uint64_t total, std::uint64_t cycles, double ramp) {
  if (total < 1 || cycles < 1 || !(ramp > 0.0 && ramp <= 1.0)) throw InputError("bad cyclical annealing parameters");
  const std::uint64_t cycle = std::max<std::uint64_t>(1, total / cycles);
  const double phase = static_cast<double>(t % cycle) / static_cast<double>(cycle);
  return std::min(1.0, phase / ramp);
}

struct CostAnneal {
  double midpoint = 9000.0;
  double slope = 900.0;
};

struct CyclicalAnneal {
  std::uint64_t total = 10000;
  std::uint64_t cycles = 5;
  double ramp = 0.5;
};

struct ConstantWeight {
  double weight = 1.0;
};

using SchedulerKind = std::variant<PIConfig, CostAnneal, CyclicalAnneal, ConstantWeight>;

inline std::string scheduler_name(const SchedulerKind& k) {
  switch (k.index()) {
    case 0: return "pi";
    case 1: return "cost";
    case 2: return "cyclical";
    default: return "constant";
  }
}

// Runtime state of whichever scheduler is in use; everything needed to
// resume bit-exactly lives here.
struct SchedulerState {
  PIControllerState pi;
  double held_weight = 0.0;
  double smoothed_kl = 0.0;
  bool has_smoothed = false;

  bool operator==(const SchedulerState&) const = default;
};

// Single entry point for the training loop: returns the KL weight for `step`
// given the KL observed at that step. `kl_smoothing` in (0, 1) feeds the PI
// controller an exponential moving average instead of the raw sample.
class KlScheduler {
 public:
  explicit KlScheduler(SchedulerKind kind, double kl_smoothing = 0.0) : kind_(std::move(kind)), smoothing_(kl_smoothing) {
    if (!(smoothing_ >= 0.0 && smoothing_ < 1.0)) throw InputError("KL smoothing must lie in [0, 1)");
    if (auto* pi = std::get_if<PIConfig>(&kind_)) pi->validate();
    if (auto* c = std::get_if<ConstantWeight>(&kind_)) {
      if (!(c->weight >= 0.0 && c->weight <= 1.0)) throw InputError("constant weight must lie in [0, 1]");
    }
    if (auto* c = std::get_if<CostAnneal>(&kind_)) {
      if (!(c->slope > 0.0)) throw InputError("cost annealing slope must be positive");
    }
    if (auto* c = std::get_if<CyclicalAnneal>(&kind_)) cyclical_anneal_weight(0, c->total, c->cycles, c->ramp);
  }

  const SchedulerKind& kind() const { return kind_; }
  SchedulerState& state() { return state_; }
  const SchedulerState& state() const { return state_; }

  double next(std::uint64_t step, double observed_kl) {
    if (const auto* pi = std::get_if<PIConfig>(&kind_)) {
      double feedback = observed_kl;
      if (smoothing_ > 0.0) {
        state_.smoothed_kl =
            state_.has_smoothed ? smoothing_ * state_.smoothed_kl + (1.0 - smoothing_) * observed_kl : observed_kl;
        state_.has_smoothed = true;
        feedback = state_.smoothed_kl;
      }
      if (step % pi->sampling_period == 0) {
        const PIOutput out = pi_update(state_.pi, feedback, *pi);
        state_.pi = out.state;
        state_.held_weight = out.weight;
      }
      return state_.held_weight;
    }
    if (const auto* c = std::get_if<CostAnneal>(&kind_)) return cost_anneal_weight(static_cast<double>(step), c->midpoint, c->slope);
    if (const auto* c = std::get_if<CyclicalAnneal>(&kind_)) return cyclical_anneal_weight(step, c->total, c->cycles, c->ramp);
    return std::get<ConstantWeight>(kind_).weight;
  }

 private:
  SchedulerKind kind_;
  double smoothing_;
  SchedulerState state_;
};

}  // namespace klctl
