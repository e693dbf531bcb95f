#include <gtest/gtest.h>

#include <cmath>

#include "klctl/control.hpp"
#include "plant.hpp"

using namespace klctl;

namespace {

PIConfig default_gains(double setpoint) {
  PIConfig c;
  c.setpoint = setpoint;
  return c;
}

}  // namespace

TEST(PiUpdate, FreshStateBelowSetpointSaturatesLow) {
  const PIOutput out = pi_update({}, 0.0, default_gains(2.0));
  EXPECT_NEAR(out.state.integral, -0.0002, 1e-15);
  EXPECT_NEAR(out.state.last_raw, -0.0202, 1e-15);
  EXPECT_EQ(out.weight, 0.0);
  EXPECT_EQ(out.state.step, 1u);
}

TEST(PiUpdate, AboveSetpointRaisesWeight) {
  PIControllerState s;
  s.integral = 0.5;
  s.last_raw = 0.5;
  const PIOutput out = pi_update(s, 4.0, default_gains(2.0));
  EXPECT_NEAR(out.state.integral, 0.5002, 1e-12);
  EXPECT_NEAR(out.weight, 0.5202, 1e-12);
}

TEST(PiUpdate, SaturatedRawOutputFreezesIntegral) {
  PIControllerState s;
  s.integral = 0.3;
  s.last_raw = -0.0202;
  const PIOutput out = pi_update(s, 0.5, default_gains(2.0));
  EXPECT_EQ(out.state.integral, 0.3);
  EXPECT_NEAR(out.state.last_raw, 0.3 + (-0.01) * 1.5, 1e-15);
}

TEST(PiUpdate, WithoutAntiWindupIntegralAlwaysMoves) {
  PIConfig c = default_gains(2.0);
  c.anti_windup = false;
  PIControllerState s;
  s.integral = 0.3;
  s.last_raw = 1.7;
  EXPECT_NEAR(pi_update(s, 0.5, c).state.integral, 0.3 - 0.0001 * 1.5, 1e-15);
}

TEST(PiUpdate, EquilibriumHoldsWeight) {
  PIControllerState s;
  s.integral = 0.7;
  s.last_raw = 0.7;
  const PIOutput out = pi_update(s, 2.0, default_gains(2.0));
  EXPECT_DOUBLE_EQ(out.weight, 0.7);
  EXPECT_DOUBLE_EQ(out.state.integral, 0.7);
}

TEST(PiUpdate, RejectsBadObservations) {
  EXPECT_THROW(pi_update({}, std::nan(""), default_gains(1.0)), InputError);
  EXPECT_THROW(pi_update({}, INFINITY, default_gains(1.0)), InputError);
  EXPECT_THROW(pi_update({}, -0.1, default_gains(1.0)), InputError);
}

TEST(PiUpdate, IsPure) {
  PIControllerState s;
  s.integral = 0.2;
  s.last_raw = 0.4;
  const auto a = pi_update(s, 1.3, default_gains(1.0));
  const auto b = pi_update(s, 1.3, default_gains(1.0));
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(a.weight, b.weight);
}

TEST(PiUpdate, SignOfResponse) {
  PIControllerState s;
  s.integral = 0.5;
  s.last_raw = 0.5;
  const PIConfig c = default_gains(2.0);
  EXPECT_LT(pi_update(s, 1.0, c).state.last_raw, 0.5);
  EXPECT_GT(pi_update(s, 3.0, c).state.last_raw, 0.5);
}

TEST(PiConfig, ValidationRejectsWrongSigns) {
  PIConfig c;
  c.kp = 0.01;
  EXPECT_THROW(c.validate(), InputError);
  c = PIConfig{};
  c.ki = 0.0;
  EXPECT_THROW(c.validate(), InputError);
  c = PIConfig{};
  c.setpoint = 0.0;
  EXPECT_THROW(c.validate(), InputError);
  c = PIConfig{};
  c.sampling_period = 0;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(CostAnneal, MidpointAndTails) {
  EXPECT_DOUBLE_EQ(cost_anneal_weight(9000, 9000, 900), 0.5);
  EXPECT_NEAR(cost_anneal_weight(0, 9000, 900), 1.0 / (1.0 + std::exp(10.0)), 1e-15);
  EXPECT_NEAR(cost_anneal_weight(1e6, 9000, 900), 1.0, 1e-12);
  double prev = 0.0;
  for (int t = 0; t <= 40000; t += 250) {
    const double w = cost_anneal_weight(t, 18000, 1800);
    EXPECT_GE(w, prev);
    prev = w;
  }
}

TEST(CyclicalAnneal, RampArithmetic) {
  EXPECT_EQ(cyclical_anneal_weight(0, 10000, 5, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(cyclical_anneal_weight(500, 10000, 5, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(cyclical_anneal_weight(1500, 10000, 5, 0.5), 1.0);
  for (std::uint64_t t = 0; t < 2000; t += 37) {
    EXPECT_EQ(cyclical_anneal_weight(t, 10000, 5, 0.5), cyclical_anneal_weight(t + 2000, 10000, 5, 0.5));
  }
  EXPECT_THROW(cyclical_anneal_weight(0, 10000, 0, 0.5), InputError);
  EXPECT_THROW(cyclical_anneal_weight(0, 10000, 5, 0.0), InputError);
}

TEST(KlScheduler, OutputsStayInUnitInterval) {
  const std::vector<SchedulerKind> kinds = {PIConfig{}, CostAnneal{100, 10}, CyclicalAnneal{1000, 4, 0.3},
                                            ConstantWeight{0.25}};
  for (const auto& k : kinds) {
    KlScheduler s(k);
    for (std::uint64_t t = 0; t < 3000; ++t) {
      const double kl = (t % 7 == 0) ? 1e6 : (t % 3 == 0 ? 0.0 : 1.5);
      const double w = s.next(t, kl);
      ASSERT_GE(w, 0.0) << scheduler_name(k);
      ASSERT_LE(w, 1.0) << scheduler_name(k);
    }
  }
}

TEST(KlScheduler, SamplingPeriodHoldsWeight) {
  PIConfig c;
  c.setpoint = 1.0;
  c.sampling_period = 5;
  KlScheduler s(c);
  std::vector<double> w;
  for (std::uint64_t t = 0; t < 20; ++t) w.push_back(s.next(t, 3.0 + static_cast<double>(t)));
  for (std::size_t t = 0; t < 20; ++t) EXPECT_EQ(w[t], w[t - t % 5]) << t;
  EXPECT_EQ(s.state().pi.step, 4u);
}

TEST(KlScheduler, SmoothingFeedsMovingAverage) {
  PIConfig c;
  c.setpoint = 1.0;
  KlScheduler s(c, 0.9);
  s.next(0, 2.0);
  s.next(1, 4.0);
  EXPECT_NEAR(s.state().smoothed_kl, 0.9 * 2.0 + 0.1 * 4.0, 1e-12);
  EXPECT_THROW(KlScheduler(c, 1.0), InputError);
}

TEST(KlScheduler, RejectsOutOfRangeConstant) {
  EXPECT_THROW(KlScheduler(ConstantWeight{1.5}), InputError);
  EXPECT_THROW(KlScheduler(CostAnneal{100, 0}), InputError);
}

// First-order plant KL' = KL + a (g(w) - KL), g(w) = KL_max (1 - w).
// The slow closed-loop mode has a time constant of roughly 1300 steps, so
// default gains settle only over a longer horizon.
TEST(Plant, DefaultGainsSettleOverLongHorizon) {
  for (double v : {1.0, 2.0, 5.0}) {
    const auto trace = simulate_plant(default_gains(v), 20000);
    EXPECT_LT(max_relative_error_after(trace, v, 15000), 0.05) << v;
  }
}

TEST(Plant, LargerGainsSettleWithinFivePercent) {
  for (double v : {1.0, 2.0, 5.0}) {
    PIConfig c = default_gains(v);
    c.ki = -0.002;
    const auto trace = simulate_plant(c, 2000);
    EXPECT_LT(max_relative_error_after(trace, v, 1500), 0.05) << v;
  }
}

TEST(Plant, AntiWindupDoesNotWorsenOvershoot) {
  for (double v : {1.0, 2.0, 5.0}) {
    PIConfig on = default_gains(v), off = default_gains(v);
    off.anti_windup = false;
    EXPECT_LE(peak_overshoot(simulate_plant(on, 4000), v), peak_overshoot(simulate_plant(off, 4000), v)) << v;
  }
}
