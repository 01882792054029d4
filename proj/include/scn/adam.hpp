#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "scn/autodiff.hpp"

namespace scn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moments. The moment buffers are positional:
/// every call to step() must pass the same parameters in the same order.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  std::uint64_t steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

  void step(std::span<Parameter* const> params, double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
    if (m_.empty()) {
      for (const Parameter* p : params) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
    if (m_.size() != params.size()) throw DimensionError("adam: parameter list changed between steps");
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Parameter& p = *params[k];
      require_same_shape(p.value, p.grad, "adam gradient");
      require_same_shape(p.value, m_[k], "adam moments");
      if (!p.grad.all_finite()) throw NumericError("adam: non-finite gradient for " + p.name);
    }

    ++t_;
    const double b1 = opts_.beta1, b2 = opts_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      Matrix& m = m_[k];
      Matrix& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + opts_.epsilon);
      }
    }
  }

 private:
  AdamOptions opts_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::uint64_t t_ = 0;
};

}  // namespace scn
