#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>

#include "klctl/graph.hpp"
#include "klctl/rng.hpp"

namespace klctl {

struct GradientCheckReport {
  // Largest relative error seen per parameter.
  std::map<std::string, double> max_relative_error;
  double tolerance = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& [_, e] : max_relative_error) w = std::max(w, e);
    return w;
  }
  bool passed() const { return worst() < tolerance; }
};

struct GradientCheckOptions {
  double tolerance = 1e-4;
  double perturbation = 1e-4;
  std::size_t max_entries = 64;
  // |a - n| / max(|a|, |n|, floor): entries whose gradient is far below the
  // floor are compared absolutely, since finite differences cannot resolve them.
  double floor = 1e-3;
  std::uint64_t seed = 1234;
};

// Compares analytic gradients against central finite differences. `loss`
// records a fresh graph over `params` and returns its scalar loss node; it is
// invoked once for the analytic pass and twice per probed entry.
template <class T>
GradientCheckReport check_gradients(ParameterStore<T>& params, const std::function<Var(Graph<T>&)>& loss,
                                    const GradientCheckOptions& opt = {}) {
  GradientCheckReport report;
  report.tolerance = opt.tolerance;
  params.zero_grad();
  {
    Graph<T> g;
    Var l = loss(g);
    g.backward(l);
  }
  auto evaluate = [&]() {
    Graph<T> g(false);
    return static_cast<double>(g.item(loss(g)));
  };
  Rng rng(opt.seed);
  for (auto& [name, p] : params) {
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opt.max_entries) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opt.max_entries);
    }
    double worst = 0.0;
    for (std::size_t i : idx) {
      const T saved = p.value.data[i];
      p.value.data[i] = saved + static_cast<T>(opt.perturbation);
      const double up = evaluate();
      p.value.data[i] = saved - static_cast<T>(opt.perturbation);
      const double down = evaluate();
      p.value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.perturbation);
      const double analytic = static_cast<double>(p.grad.data[i]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    report.max_relative_error[name] = worst;
  }
  return report;
}

}  // namespace klctl
