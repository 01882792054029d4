#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "scn/autodiff.hpp"
#include "scn/rng.hpp"

namespace scn::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

/// Builds a scalar loss on a fresh graph; parameters are bound inside.
using LossBuilder = std::function<Tensor(Graph&)>;

inline double eval_loss(const LossBuilder& build) {
  Graph g;
  return build(g).item();
}

/// |analytic - numeric| / max(|analytic|, |numeric|, floor) for every
/// parameter entry, numeric by central differences with step h.
inline std::vector<double> gradient_errors(const std::vector<Parameter*>& params, const LossBuilder& build,
                                           double h = 1e-6, double floor = 1e-7) {
  {
    Graph g;
    g.backward(build(g));
  }
  std::vector<Matrix> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  std::vector<double> errs;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = eval_loss(build);
      p.value[i] = saved - h;
      const double down = eval_loss(build);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      errs.push_back(std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
    }
  }
  return errs;
}

inline double fraction_below(const std::vector<double>& v, double bound) {
  if (v.empty()) return 1.0;
  return double(std::count_if(v.begin(), v.end(), [&](double x) { return x < bound; })) / double(v.size());
}

}  // namespace scn::testing
