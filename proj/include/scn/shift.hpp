#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "scn/autodiff.hpp"

namespace scn {

enum class WeightSource { scn, kde, kliep, dfw, oracle, uniform };

inline const char* to_string(WeightSource s) {
  switch (s) {
    case WeightSource::scn: return "scn";
    case WeightSource::kde: return "kde";
    case WeightSource::kliep: return "kliep";
    case WeightSource::dfw: return "dfw";
    case WeightSource::oracle: return "oracle";
    case WeightSource::uniform: return "uniform";
  }
  return "?";
}

/// Per-sample importance weights w(x_i) ~ q(x_i) / p(x_i), aligned with the
/// rows of a training set.
struct ShiftWeights {
  std::vector<double> values;
  WeightSource source = WeightSource::uniform;

  std::size_t size() const { return values.size(); }

  static ShiftWeights uniform(std::size_t n) { return {std::vector<double>(n, 1.0), WeightSource::uniform}; }

  void validate() const {
    for (double w : values) {
      if (!std::isfinite(w) || w < 0.0) throw NumericError("shift weights must be finite and nonnegative");
    }
  }

  /// n * mean(w)^2 / mean(w^2)
  double effective_sample_size() const {
    if (values.empty()) return 0.0;
    double s = 0.0, s2 = 0.0;
    for (double w : values) {
      s += w;
      s2 += w * w;
    }
    return s2 > 0.0 ? (s * s) / s2 : 0.0;
  }
};

/// w = (1 - d) / d for the probability d that x came from P. d is clamped
/// to [1e-6, 1 - 1e-6] and the result capped at 1e6.
inline double shift_factor(double d_prob) {
  const double d = std::clamp(d_prob, kProbabilityFloor, 1.0 - kProbabilityFloor);
  return std::min((1.0 - d) / d, kMaxWeight);
}

/// Differentiable form for a column of clamped probabilities.
inline Tensor shift_factor(const Tensor& d_prob) { return odds_against(d_prob); }

/// 1/2 E_P[log D] + 1/2 E_Q[log(1 - D)]; maximized by the discriminator.
inline Tensor discriminative_loss(const Tensor& d_p, const Tensor& d_q) {
  if (d_p.value().empty() || d_q.value().empty()) throw DimensionError("discriminative loss: empty batch");
  Tensor on_p = mean(log(d_p));
  Tensor on_q = mean(log(add_scalar(scale(d_q, -1.0), 1.0)));
  return scale(add(on_p, on_q), 0.5);
}

inline double discriminative_loss(std::span<const double> d_p, std::span<const double> d_q) {
  if (d_p.empty() || d_q.empty()) throw DimensionError("discriminative loss: empty batch");
  double sp = 0.0, sq = 0.0;
  for (double d : d_p) sp += std::log(std::max(d, kLogFloor));
  for (double d : d_q) sq += std::log(std::max(1.0 - d, kLogFloor));
  return 0.5 * sp / double(d_p.size()) + 0.5 * sq / double(d_q.size());
}

/// Exponential moving average of batch means with zero initialization and
/// bias correction on read: M_t = a M_{t-1} + (1 - a) m_t, corrected M_t / (1 - a^t).
/// The accumulator is stored uncorrected.
class MovingMean {
 public:
  MovingMean() = default;
  MovingMean(std::size_t width, double alpha) : accum_(1, width), alpha_(alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("moving mean: alpha must be in [0, 1)");
  }

  std::size_t width() const { return accum_.cols(); }
  double alpha() const { return alpha_; }
  std::uint64_t iteration() const { return t_; }
  const Matrix& raw() const { return accum_; }

  /// Bias-corrected value; requires at least one update.
  Matrix corrected() const {
    if (t_ == 0) throw std::logic_error("moving mean: no updates yet");
    Matrix out = accum_;
    const double c = correction();
    for (double& v : out.values()) v /= c;
    return out;
  }

  /// Graph form. Past iterations enter as a constant; gradients flow only
  /// through the current batch's (1 - a) m_t term.
  Tensor update(const Tensor& batch_mean) {
    check_width(batch_mean.value());
    Graph& g = batch_mean.graph();
    Tensor past = g.constant(scaled_accum());
    Tensor m = add(past, scale(batch_mean, 1.0 - alpha_));
    ++t_;
    accum_ = m.value();
    return scale(m, 1.0 / correction());
  }

  /// Plain-value form of update(); returns the corrected mean.
  std::vector<double> update(std::span<const double> batch_mean) {
    Matrix m = Matrix::row_vector(std::vector<double>(batch_mean.begin(), batch_mean.end()));
    check_width(m);
    Matrix past = scaled_accum();
    for (std::size_t i = 0; i < m.size(); ++i) accum_[i] = past[i] + (1.0 - alpha_) * m[i];
    ++t_;
    const double inv = 1.0 / correction();
    std::vector<double> out(accum_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = accum_[i] * inv;
    return out;
  }

 private:
  double correction() const { return 1.0 - std::pow(alpha_, static_cast<double>(t_)); }

  Matrix scaled_accum() const {
    Matrix p = accum_;
    for (double& v : p.values()) v *= alpha_;
    return p;
  }

  void check_width(const Matrix& m) const {
    if (m.rows() != 1 || m.cols() != accum_.cols()) {
      throw DimensionError("moving mean: batch mean " + m.shape().str() + " vs width " +
                           std::to_string(accum_.cols()));
    }
  }

  Matrix accum_;
  double alpha_ = 0.9;
  std::uint64_t t_ = 0;
};

/// || M_Q - M_P ||_2 on the two corrected moving means.
inline Tensor fsmm_loss(const Tensor& mq_corrected, const Tensor& mp_corrected) {
  detail::same_shape(mq_corrected, mp_corrected, "fsmm_loss");
  return l2norm(sub(mq_corrected, mp_corrected));
}

inline double fsmm_loss(std::span<const double> mq, std::span<const double> mp) {
  if (mq.size() != mp.size()) throw DimensionError("fsmm loss: width mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) s += (mq[i] - mp[i]) * (mq[i] - mp[i]);
  return std::sqrt(s);
}

/// || mean_Q[phi] - mean_P[w phi] ||_2 / dim(phi), over full datasets.
inline double feature_discrepancy(const ShiftWeights& w, const Matrix& feats_p, const Matrix& feats_q) {
  if (w.size() != feats_p.rows()) {
    throw DimensionError("feature discrepancy: " + std::to_string(w.size()) + " weights for " +
                         std::to_string(feats_p.rows()) + " rows");
  }
  if (feats_p.cols() != feats_q.cols()) throw DimensionError("feature discrepancy: feature widths differ");
  if (feats_p.rows() == 0 || feats_q.rows() == 0) throw DimensionError("feature discrepancy: empty dataset");
  const std::size_t h = feats_p.cols();
  std::vector<double> diff(h, 0.0);
  for (std::size_t r = 0; r < feats_q.rows(); ++r) {
    for (std::size_t c = 0; c < h; ++c) diff[c] += feats_q(r, c);
  }
  for (double& v : diff) v /= double(feats_q.rows());
  for (std::size_t r = 0; r < feats_p.rows(); ++r) {
    const double wr = w.values[r] / double(feats_p.rows());
    for (std::size_t c = 0; c < h; ++c) diff[c] -= wr * feats_p(r, c);
  }
  double s = 0.0;
  for (double v : diff) s += v * v;
  return std::sqrt(s) / double(h);
}

/// mean_i w_i * sum_l BCE(logit_il, y_il). `w` must be detached (a b x 1 constant).
inline Tensor weighted_classification_loss(const Tensor& logits, const Matrix& targets, const Tensor& w) {
  if (w.requires_grad()) {
    throw std::invalid_argument("weighted classification loss: weights must be detached from the graph");
  }
  if (w.cols() != 1 || w.rows() != logits.rows()) {
    throw DimensionError("weighted classification loss: weights " + w.shape().str() + " for logits " +
                         logits.shape().str());
  }
  return mean(mul(bce_with_logits(logits, targets), w));
}

}  // namespace scn
