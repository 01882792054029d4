#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "scn/matrix.hpp"
#include "scn/shift.hpp"

namespace scn {

namespace detail {

inline void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a) + " scores vs " + std::to_string(b) + " labels");
  }
}

}  // namespace detail

/// Area under the ROC curve in its Mann-Whitney form; tied scores earn half
/// credit. Empty when only one class is present.
inline std::optional<double> auc(std::span<const double> scores, std::span<const double> labels) {
  detail::check_aligned(scores.size(), labels.size(), "auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups, then U = R_pos - n_pos (n_pos + 1) / 2.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0.5) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1);
  return u / (double(n_pos) * double(n_neg));
}

/// Mean over positives of the precision at each positive's rank, scores
/// descending, ties broken by original index. Empty without positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const double> labels) {
  detail::check_aligned(scores.size(), labels.size(), "average_precision");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] > 0.5) {
      ++hits;
      total += double(hits) / double(k + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return total / double(hits);
}

/// Harmonic mean of precision and recall at `threshold`; 0 when both vanish.
inline double f1(std::span<const double> scores, std::span<const double> labels, double threshold = 0.5) {
  detail::check_aligned(scores.size(), labels.size(), "f1");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] > 0.5;
    if (pred && truth) ++tp;
    else if (pred && !truth) ++fp;
    else if (!pred && truth) ++fn;
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

/// mean_i w_i * loss_i
inline double weighted_risk(std::span<const double> per_sample_losses, const ShiftWeights& w) {
  detail::check_aligned(per_sample_losses.size(), w.size(), "weighted_risk");
  if (w.size() == 0) throw DimensionError("weighted_risk: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w.values[i] * per_sample_losses[i];
  return s / double(w.size());
}

struct LabelMetrics {
  std::optional<double> auc;
  std::optional<double> ap;
  double f1 = 0.0;
  std::size_t positives = 0;
};

struct MetricsReport {
  std::vector<LabelMetrics> per_label;
  double macro_auc = std::nan("");
  double macro_ap = std::nan("");
  double macro_f1 = std::nan("");
  std::vector<std::size_t> undefined_labels;  // single-class labels, excluded from the macro averages
  double unweighted_risk = std::nan("");
  double weighted_risk = std::nan("");
  std::size_t samples = 0;
  double threshold = 0.5;
};

inline double sigmoid_value(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// Per-sample sum over labels of binary cross-entropy from logits.
inline std::vector<double> per_sample_bce(const Matrix& logits, const Matrix& targets) {
  require_same_shape(logits, targets, "per_sample_bce");
  std::vector<double> out(logits.rows(), 0.0);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      const double z = logits(r, c);
      out[r] += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - targets(r, c) * z;
    }
  }
  return out;
}

/// Multi-label evaluation of logits against 0/1 targets. Labels whose
/// targets hold a single class are excluded from the macro averages (F1
/// included, so all three macros cover the same labels).
inline MetricsReport evaluate_multilabel(const Matrix& logits, const Matrix& targets, double threshold = 0.5,
                                         const ShiftWeights* weights = nullptr) {
  require_same_shape(logits, targets, "evaluate_multilabel");
  MetricsReport rep;
  rep.samples = logits.rows();
  rep.threshold = threshold;
  const std::size_t n = logits.rows(), labels = logits.cols();
  std::vector<double> s(n), y(n);
  double sum_auc = 0, sum_ap = 0, sum_f1 = 0;
  std::size_t defined = 0;
  for (std::size_t l = 0; l < labels; ++l) {
    LabelMetrics lm;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = sigmoid_value(logits(i, l));
      y[i] = targets(i, l);
      if (y[i] > 0.5) ++lm.positives;
    }
    lm.auc = auc(s, y);
    lm.ap = average_precision(s, y);
    lm.f1 = f1(s, y, threshold);
    if (lm.auc && lm.ap) {
      sum_auc += *lm.auc;
      sum_ap += *lm.ap;
      sum_f1 += lm.f1;
      ++defined;
    } else {
      rep.undefined_labels.push_back(l);
    }
    rep.per_label.push_back(lm);
  }
  if (defined > 0) {
    rep.macro_auc = sum_auc / double(defined);
    rep.macro_ap = sum_ap / double(defined);
    rep.macro_f1 = sum_f1 / double(defined);
  }
  if (n > 0) {
    const auto losses = per_sample_bce(logits, targets);
    rep.unweighted_risk = mean(losses);
    if (weights != nullptr) rep.weighted_risk = weighted_risk(losses, *weights);
  }
  return rep;
}

}  // namespace scn
