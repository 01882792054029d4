#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "scn/matrix.hpp"
#include "scn/rng.hpp"
#include "scn/shift.hpp"
#include "scn/trainer.hpp"

namespace scn {

namespace detail {

inline double logsumexp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double clamp_weight(double w) { return std::clamp(w, kProbabilityFloor, kMaxWeight); }

}  // namespace detail

// ---------------------------------------------------------------------------
// KDE ratio

enum class BandwidthRule { silverman, fixed };

struct KdeOptions {
  BandwidthRule rule = BandwidthRule::silverman;
  double fixed_bandwidth = 1.0;
  std::size_t max_dim = 10;
};

/// Per-dimension Silverman bandwidths, sd * (4 / ((d + 2) n))^(1 / (d + 4)).
/// Dimensions with zero spread fall back to 1.
inline std::vector<double> silverman_bandwidths(const Matrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  const double factor = std::pow(4.0 / (double(d + 2) * double(n)), 1.0 / double(d + 4));
  std::vector<double> h(d, 1.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x(i, j);
    m /= double(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - m) * (x(i, j) - m);
    const double sd = std::sqrt(v / double(n - 1));
    if (sd > 0.0) h[j] = sd * factor;
  }
  return h;
}

/// Gaussian product-kernel density estimate, evaluated in log space.
class KernelDensity {
 public:
  KernelDensity(const Matrix& samples, std::vector<double> bandwidth)
      : samples_(samples), h_(std::move(bandwidth)) {
    if (h_.size() != samples.cols()) throw DimensionError("kde: one bandwidth per dimension required");
    log_norm_ = std::log(double(samples.rows())) + 0.5 * double(h_.size()) * std::log(2.0 * std::numbers::pi);
    for (double b : h_) {
      if (!(b > 0.0)) throw std::invalid_argument("kde: bandwidths must be positive");
      log_norm_ += std::log(b);
    }
    scaled_ = samples;
    for (std::size_t i = 0; i < scaled_.rows(); ++i) {
      for (std::size_t j = 0; j < scaled_.cols(); ++j) scaled_(i, j) /= h_[j];
    }
  }

  const std::vector<double>& bandwidth() const { return h_; }

  double log_density(std::span<const double> x) const {
    std::vector<double> xs(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) xs[j] = x[j] / h_[j];
    std::vector<double> terms(scaled_.rows());
    for (std::size_t i = 0; i < scaled_.rows(); ++i) terms[i] = -0.5 * detail::squared_distance(xs, scaled_.row(i));
    return detail::logsumexp(terms) - log_norm_;
  }

 private:
  Matrix samples_;
  Matrix scaled_;
  std::vector<double> h_;
  double log_norm_ = 0.0;
};

/// w_i = q_hat(x_i) / p_hat(x_i), clamped to [1e-6, 1e6]. Both estimates
/// share one bandwidth, from Silverman's rule on the pooled sample.
inline ShiftWeights kde_weights(const Matrix& xp, const Matrix& xq, const KdeOptions& opt = {}) {
  if (xp.rows() < 2 || xq.rows() < 2) throw std::invalid_argument("kde: need at least 2 samples per side");
  if (xp.cols() != xq.cols()) throw DimensionError("kde: P and Q feature widths differ");
  if (xp.cols() > opt.max_dim) {
    throw std::invalid_argument("kde: refusing d = " + std::to_string(xp.cols()) + " > " +
                                std::to_string(opt.max_dim) +
                                "; kernel density estimates degrade badly with dimension (curse of dimensionality)");
  }
  std::vector<double> hp, hq;
  if (opt.rule == BandwidthRule::fixed) {
    if (!(opt.fixed_bandwidth > 0.0)) throw std::invalid_argument("kde: fixed bandwidth must be positive");
    hp.assign(xp.cols(), opt.fixed_bandwidth);
    hq = hp;
  } else {
    Matrix pooled(xp.rows() + xq.rows(), xp.cols());
    std::copy(xp.values().begin(), xp.values().end(), pooled.values().begin());
    std::copy(xq.values().begin(), xq.values().end(), pooled.values().begin() + std::ptrdiff_t(xp.size()));
    hp = silverman_bandwidths(pooled);
    hq = hp;
  }
  const KernelDensity p_hat(xp, hp), q_hat(xq, hq);
  ShiftWeights w;
  w.source = WeightSource::kde;
  w.values.resize(xp.rows());
  for (std::size_t i = 0; i < xp.rows(); ++i) {
    w.values[i] = detail::clamp_weight(std::exp(q_hat.log_density(xp.row(i)) - p_hat.log_density(xp.row(i))));
  }
  return w;
}

// ---------------------------------------------------------------------------
// KLIEP

/// w(x) = sum_c theta_c exp(-||x - c||^2 / (2 sigma^2)).
struct KernelModel {
  double sigma = 1.0;
  Matrix centers;
  std::vector<double> theta;

  void validate() const {
    if (!(sigma > 0.0)) throw std::invalid_argument("kernel model: sigma must be positive");
    if (theta.size() != centers.rows()) throw DimensionError("kernel model: one coefficient per center required");
    for (double t : theta) {
      if (!std::isfinite(t) || t < 0.0) throw NumericError("kernel model: coefficients must be finite and nonnegative");
    }
  }

  Matrix design(const Matrix& x) const {
    Matrix k(x.rows(), centers.rows());
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t c = 0; c < centers.rows(); ++c) k(i, c) = std::exp(-detail::squared_distance(x.row(i), centers.row(c)) * inv);
    }
    return k;
  }

  std::vector<double> evaluate(const Matrix& x) const {
    const Matrix k = design(x);
    std::vector<double> out(x.rows(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t c = 0; c < theta.size(); ++c) out[i] += theta[c] * k(i, c);
    }
    return out;
  }
};

struct KliepOptions {
  std::size_t n_centers = 100;
  std::vector<double> sigma_grid;  // empty: median Q-to-center distance times {1/8, 1/4, 1/2}
  std::size_t steps = 5000;
  std::size_t folds = 3;
  double tolerance = 1e-6;
  std::uint64_t seed = 0;
};

struct KliepResult {
  ShiftWeights weights;
  KernelModel model;
  bool converged = false;
  std::vector<double> cv_scores;  // held-out mean log w on Q, per sigma
  double objective = 0.0;         // mean log w over X_Q
};

namespace detail {

struct KliepFit {
  std::vector<double> theta;
  double objective = 0.0;
  bool converged = false;
};

/// Euclidean projection onto { theta >= 0, b^T theta = 1 } for b > 0:
/// theta_c = max(0, v_c - tau b_c) with tau found by bisection.
inline void kliep_project(std::vector<double>& theta, const std::vector<double>& b) {
  auto mass = [&](double tau) {
    double s = 0.0;
    for (std::size_t c = 0; c < theta.size(); ++c) s += b[c] * std::max(0.0, theta[c] - tau * b[c]);
    return s;
  };
  double lo = -1.0, hi = 1.0;
  while (mass(lo) < 1.0) lo *= 2.0;
  while (mass(hi) > 1.0) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-16 * std::max(1.0, std::abs(lo)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (mass(mid) > 1.0 ? lo : hi) = mid;
  }
  const double tau = 0.5 * (lo + hi);
  double bt = 0.0;
  for (std::size_t c = 0; c < theta.size(); ++c) {
    theta[c] = std::max(0.0, theta[c] - tau * b[c]);
    bt += b[c] * theta[c];
  }
  for (double& t : theta) t /= bt;  // remove the bisection residue
}

inline double kliep_objective(const Matrix& a, const std::vector<double>& theta) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double v = 0.0;
    for (std::size_t c = 0; c < theta.size(); ++c) v += a(i, c) * theta[c];
    s += std::log(std::max(v, kLogFloor));
  }
  return s / double(a.rows());
}

inline std::vector<double> kliep_gradient(const Matrix& a, const std::vector<double>& theta) {
  std::vector<double> grad(theta.size(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double v = 0.0;
    for (std::size_t c = 0; c < theta.size(); ++c) v += a(i, c) * theta[c];
    const double inv = 1.0 / std::max(v, kLogFloor);
    for (std::size_t c = 0; c < theta.size(); ++c) grad[c] += a(i, c) * inv;
  }
  for (double& g : grad) g /= double(a.rows());
  return grad;
}

/// Accelerated projected gradient ascent on mean log (A theta) subject to
/// b^T theta = 1, theta >= 0. Backtracking on the quadratic upper model;
/// momentum restarts whenever the objective drops. Converged once the
/// gradient mapping norm falls below `tol`.
inline KliepFit kliep_fit(const Matrix& a_in, const std::vector<double>& b_in, std::size_t steps, double tol) {
  const std::size_t nc = b_in.size();
  for (double v : b_in) {
    if (!(v > 0.0)) throw NumericError("kliep: a center has no kernel mass on P; sigma too small");
  }
  // work in phi_c = b_c theta_c, which lives on the probability simplex
  Matrix a = a_in;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t c = 0; c < nc; ++c) a(i, c) /= b_in[c];
  }
  const std::vector<double> b(nc, 1.0);
  KliepFit fit;
  fit.theta.assign(nc, 1.0);
  kliep_project(fit.theta, b);
  fit.objective = kliep_objective(a, fit.theta);
  std::vector<double> y = fit.theta, cand(nc);
  double t = 1.0, step = 1.0;
  for (std::size_t it = 0; it < steps; ++it) {
    const double fy = kliep_objective(a, y);
    const auto grad = kliep_gradient(a, y);
    double cand_obj = 0.0, moved = 0.0;
    for (int tries = 0; tries < 100; ++tries) {
      for (std::size_t c = 0; c < nc; ++c) cand[c] = y[c] + step * grad[c];
      kliep_project(cand, b);
      double lin = 0.0;
      moved = 0.0;
      for (std::size_t c = 0; c < nc; ++c) {
        const double dlt = cand[c] - y[c];
        lin += grad[c] * dlt;
        moved += dlt * dlt;
      }
      cand_obj = kliep_objective(a, cand);
      if (cand_obj >= fy + lin - moved / (2.0 * step)) break;
      step *= 0.5;
    }
    const double mapping = std::sqrt(moved) / step;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    if (cand_obj < fit.objective) {  // restart from the best iterate
      y = fit.theta;
      t = 1.0;
    } else {
      for (std::size_t c = 0; c < nc; ++c) y[c] = cand[c] + (t - 1.0) / t_next * (cand[c] - fit.theta[c]);
      fit.theta = cand;
      fit.objective = cand_obj;
      t = t_next;
    }
    step *= 1.25;
    if (mapping < tol) {
      fit.converged = true;
      break;
    }
  }
  // the extrapolated point can leave the feasible set's interior; keep theta feasible
  kliep_project(fit.theta, b);
  fit.objective = kliep_objective(a, fit.theta);
  for (std::size_t c = 0; c < nc; ++c) fit.theta[c] /= b_in[c];
  return fit;
}

inline std::vector<double> column_means(const Matrix& k) {
  std::vector<double> b(k.cols(), 0.0);
  for (std::size_t i = 0; i < k.rows(); ++i) {
    for (std::size_t c = 0; c < k.cols(); ++c) b[c] += k(i, c);
  }
  for (double& v : b) v /= double(k.rows());
  return b;
}

}  // namespace detail

/// KLIEP with Gaussian centers drawn from X_Q and sigma picked by K-fold
/// likelihood cross-validation on X_Q. Weights are clamped to [1e-6, 1e6]
/// and rescaled so that mean_P[w] = 1.
inline KliepResult kliep_weights(const Matrix& xp, const Matrix& xq, const KliepOptions& opt = {}) {
  if (xp.rows() == 0 || xq.rows() < opt.folds) throw std::invalid_argument("kliep: not enough samples");
  if (xp.cols() != xq.cols()) throw DimensionError("kliep: P and Q feature widths differ");
  if (opt.folds < 2) throw std::invalid_argument("kliep: need at least 2 folds");
  Rng rng = Rng::stream(opt.seed, "kliep");
  const auto perm = rng.permutation(xq.rows());
  const std::size_t nc = std::min(opt.n_centers, xq.rows());
  KernelModel model;
  model.centers = xq.gather_rows(std::span<const std::size_t>(perm.data(), nc));

  std::vector<double> grid = opt.sigma_grid;
  if (grid.empty()) {
    std::vector<double> dists;
    const std::size_t m = std::min<std::size_t>(xq.rows(), 500);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < nc; ++c) {
        const double d = std::sqrt(detail::squared_distance(xq.row(perm[i]), model.centers.row(c)));
        if (d > 0.0) dists.push_back(d);
      }
    }
    double med = 1.0;
    if (!dists.empty()) {
      std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
      med = dists[dists.size() / 2];
    }
    grid = {0.125 * med, 0.25 * med, 0.5 * med};
  }

  KliepResult res;
  // fold f holds the Q rows perm[i] with i % folds == f
  double best_score = -std::numeric_limits<double>::infinity();
  for (double sigma : grid) {
    model.sigma = sigma;
    const Matrix kq = model.design(xq);
    const std::vector<double> b = detail::column_means(model.design(xp));
    double score = 0.0;
    for (std::size_t f = 0; f < opt.folds; ++f) {
      std::vector<std::size_t> tr, te;
      for (std::size_t i = 0; i < xq.rows(); ++i) (i % opt.folds == f ? te : tr).push_back(perm[i]);
      const auto fit = detail::kliep_fit(kq.gather_rows(tr), b, opt.steps, opt.tolerance);
      score += detail::kliep_objective(kq.gather_rows(te), fit.theta) / double(opt.folds);
    }
    res.cv_scores.push_back(score);
    if (score > best_score) {
      best_score = score;
      res.model.sigma = sigma;
    }
  }

  res.model.centers = model.centers;
  const Matrix kq = res.model.design(xq);
  const std::vector<double> b = detail::column_means(res.model.design(xp));
  const auto fit = detail::kliep_fit(kq, b, opt.steps, opt.tolerance);
  res.model.theta = fit.theta;
  res.model.validate();
  res.converged = fit.converged;
  res.objective = fit.objective;

  res.weights.source = WeightSource::kliep;
  res.weights.values = res.model.evaluate(xp);
  double s = 0.0;
  for (double& w : res.weights.values) {
    w = detail::clamp_weight(w);
    s += w;
  }
  const double m = s / double(xp.rows());
  for (double& w : res.weights.values) w /= m;
  return res;
}

// ---------------------------------------------------------------------------
// DFW

/// Fresh G' and D' trained on the discriminative loss alone (no mean
/// matching, no classifier); returns frozen w = (1 - D') / D' over X_P.
inline ShiftWeights dfw_weights(const Matrix& xp, const Matrix& xq, const ScnConfig& base, std::size_t epochs) {
  if (xp.rows() < 2 || xq.rows() == 0) throw std::invalid_argument("dfw: empty inputs");
  if (xp.cols() != xq.cols()) throw DimensionError("dfw: P and Q feature widths differ");
  ScnConfig cfg = base;
  cfg.variant = Variant::d_only;
  cfg.lambda_d = 1.0;
  cfg.seed = Rng::stream(base.seed, "dfw").next_u64();
  cfg.validate(true);
  ScnState state(cfg, xp.cols(), 1);
  Rng shuffle = Rng::stream(cfg.seed, "shuffle");
  Rng q_rng = Rng::stream(cfg.seed, "q-batches");
  std::vector<std::size_t> q_idx;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = shuffle.permutation(xp.rows());
    for (std::size_t begin = 0; begin < xp.rows(); begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, xp.rows() - begin);
      if (count < 2) break;
      q_idx.resize(count);
      for (auto& q : q_idx) q = q_rng.uniform_index(xq.rows());
      IterationStats stats;
      scn_step1(state, xp.gather_rows(std::span<const std::size_t>(order.data() + begin, count)), xq.gather_rows(q_idx),
                stats);
    }
  }
  ShiftWeights w = state.model.shift_weights(xp);
  w.source = WeightSource::dfw;
  return w;
}

// ---------------------------------------------------------------------------
// Exact mean matching (small n)

struct MeanMatchResult {
  ShiftWeights weights;
  double objective = 0.0;  // || mean_Q - (1/n) sum w_i phi_i ||_2
  std::size_t iterations = 0;
};

/// Euclidean projection onto { w >= 0, sum w = total }.
inline std::vector<double> project_scaled_simplex(std::span<const double> v, double total) {
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, tau = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    cum += u[k];
    const double t = (cum - total) / double(k + 1);
    if (u[k] - t > 0.0) tau = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(0.0, v[i] - tau);
  return out;
}

/// Minimizes || mean_Q[phi] - (1/n) sum w_i phi(x_i) ||_2 over w >= 0,
/// mean(w) = 1 with identity phi, by accelerated projected gradient on the
/// squared objective.
inline MeanMatchResult exact_mean_match_oracle(const Matrix& fp, const Matrix& fq, std::size_t max_iter = 200000,
                                               double tol = 1e-10) {
  const std::size_t n = fp.rows(), h = fp.cols();
  if (n > 200) throw std::invalid_argument("mean-match oracle: n = " + std::to_string(n) + " exceeds 200");
  if (n == 0 || fq.rows() == 0) throw DimensionError("mean-match oracle: empty inputs");
  if (fq.cols() != h) throw DimensionError("mean-match oracle: feature widths differ");
  std::vector<double> target(h, 0.0);
  for (std::size_t r = 0; r < fq.rows(); ++r) {
    for (std::size_t c = 0; c < h; ++c) target[c] += fq(r, c) / double(fq.rows());
  }
  auto residual = [&](const std::vector<double>& w) {
    std::vector<double> res = target;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < h; ++c) res[c] -= w[i] * fp(i, c) / double(n);
    }
    return res;
  };
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  // Lipschitz constant of the gradient: ||F||_2^2 / n^2, bounded by the Frobenius norm.
  double fro = 0.0;
  for (double v : fp.values()) fro += v * v;
  const double lip = std::max(fro / double(n * n), 1e-300);

  std::vector<double> w(n, 1.0), y = w, prev = w, grad(n);
  double t = 1.0;
  MeanMatchResult out;
  double obj = norm(residual(w));
  std::size_t it = 0;
  for (; it < max_iter && obj > tol; ++it) {
    const auto r = residual(y);
    for (std::size_t i = 0; i < n; ++i) {
      double g = 0.0;
      for (std::size_t c = 0; c < h; ++c) g -= fp(i, c) * r[c];
      grad[i] = g / double(n);
    }
    std::vector<double> step(n);
    for (std::size_t i = 0; i < n; ++i) step[i] = y[i] - grad[i] / lip;
    prev = w;
    w = project_scaled_simplex(step, double(n));
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    double moved = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = w[i] + (t - 1.0) / t_next * (w[i] - prev[i]);
      moved = std::max(moved, std::abs(w[i] - prev[i]));
    }
    t = t_next;
    const double next_obj = norm(residual(w));
    if (next_obj > obj) {  // restart momentum
      y = w;
      t = 1.0;
    }
    obj = next_obj;
    if (moved < 1e-15) break;
  }
  out.weights.values = w;
  out.weights.source = WeightSource::oracle;
  out.objective = obj;
  out.iterations = it;
  return out;
}

}  // namespace scn
