#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "scn/adam.hpp"
#include "scn/autodiff.hpp"
#include "scn/metrics.hpp"
#include "scn/networks.hpp"
#include "scn/rng.hpp"
#include "scn/shift.hpp"
#include "scn/synthdata.hpp"

namespace scn {

/// Which SCN objective to run. d_only drops the mean-matching term,
/// fsmm_only drops the discriminative term, no_moving_avg sets alpha = 0.
enum class Variant { full, d_only, fsmm_only, no_moving_avg };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::d_only: return "d_only";
    case Variant::fsmm_only: return "fsmm_only";
    case Variant::no_moving_avg: return "no_moving_avg";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "d_only") return Variant::d_only;
  if (s == "fsmm_only") return Variant::fsmm_only;
  if (s == "no_moving_avg") return Variant::no_moving_avg;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

struct ScnConfig {
  double lambda_d = 1.0;
  double lambda_fsmm = 0.1;
  double alpha = 0.9;
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::size_t patience = 20;
  Variant variant = Variant::full;
  bool normalize_weights = false;
  /// Step 2 uses w = 1 instead of the discriminator's weights.
  bool force_uniform_weights = false;
  std::uint64_t seed = 0;
  double keep_prob = 0.8;
  std::vector<std::size_t> g_hidden{64, 128, 64};
  std::vector<std::size_t> d_hidden{64, 32};
  std::vector<std::size_t> c_hidden{64, 32};
  double f1_threshold = 0.5;

  double effective_lambda_d() const { return variant == Variant::fsmm_only ? 0.0 : lambda_d; }
  double effective_lambda_fsmm() const { return variant == Variant::d_only ? 0.0 : lambda_fsmm; }
  double effective_alpha() const { return variant == Variant::no_moving_avg ? 0.0 : alpha; }

  void validate(bool needs_shift_losses) const {
    if (lambda_d < 0.0 || lambda_fsmm < 0.0) throw std::invalid_argument("config: lambdas must be nonnegative");
    if (needs_shift_losses && lambda_d == 0.0 && lambda_fsmm == 0.0 && !force_uniform_weights) {
      throw std::invalid_argument("config: lambda_d and lambda_fsmm are both zero outside vanilla mode");
    }
    if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("config: alpha must be in [0, 1)");
    if (batch_size < 2) throw std::invalid_argument("config: batch_size must be at least 2");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate must be positive");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw std::invalid_argument("config: keep_prob must be in (0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const ScnConfig& c) {
  j = {{"lambda_d", c.lambda_d},
       {"lambda_fsmm", c.lambda_fsmm},
       {"alpha", c.alpha},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"patience", c.patience},
       {"variant", to_string(c.variant)},
       {"normalize_weights", c.normalize_weights},
       {"force_uniform_weights", c.force_uniform_weights},
       {"seed", c.seed},
       {"keep_prob", c.keep_prob},
       {"g_hidden", c.g_hidden},
       {"d_hidden", c.d_hidden},
       {"c_hidden", c.c_hidden},
       {"f1_threshold", c.f1_threshold}};
}

/// G, C and (for discriminative methods) D.
struct Model {
  Network g;
  Network c;
  std::optional<Network> d;

  void set_mode(Mode m) {
    g.set_mode(m);
    c.set_mode(m);
    if (d) d->set_mode(m);
  }

  Matrix features(const Matrix& x) { return g.predict(x); }
  Matrix logits(const Matrix& x) { return c.predict(g.predict(x)); }

  /// (1 - D(G(x))) / D(G(x)) in eval mode.
  ShiftWeights shift_weights(const Matrix& x) {
    if (!d) throw std::logic_error("model has no discriminator");
    const Matrix probs = d->predict(g.predict(x));
    ShiftWeights w;
    w.source = WeightSource::scn;
    w.values.reserve(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) w.values.push_back(shift_factor(probs[i]));
    return w;
  }
};

inline Model build_model(const ScnConfig& cfg, std::size_t input_dim, std::size_t labels, bool with_discriminator) {
  Model m;
  Rng g_rng = Rng::stream(cfg.seed, "init/G");
  m.g = build_mlp(MlpSpec::extractor(input_dim, cfg.g_hidden, cfg.keep_prob), g_rng);
  const std::size_t h = m.g.spec().output_width();
  Rng c_rng = Rng::stream(cfg.seed, "init/C");
  m.c = build_mlp(MlpSpec::mlp(h, cfg.c_hidden, labels, cfg.keep_prob, Head::linear), c_rng);
  if (with_discriminator) {
    Rng d_rng = Rng::stream(cfg.seed, "init/D");
    m.d = build_mlp(MlpSpec::mlp(h, cfg.d_hidden, 1, cfg.keep_prob, Head::sigmoid), d_rng);
  }
  return m;
}

struct IterationStats {
  double loss_d = std::nan("");
  double loss_fsmm = std::nan("");
  double loss_c = std::nan("");
  /// max |dL_C / d theta_D| in step 2; zero whenever the weights are detached.
  double step2_disc_grad = 0.0;
};

/// Non-finite loss or gradient during training, with the last good losses.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss_d = std::nan("");
  double loss_fsmm = std::nan("");
  double loss_c = std::nan("");
  double val_auc = std::nan("");
};

struct TrainReport {
  std::string method;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_auc = std::nan("");
  ShiftWeights final_weights;
  double wall_seconds = 0.0;
  ScnConfig config;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  double max_step2_disc_grad = 0.0;
};

namespace detail {

template <typename Fn>
void with_training_context(std::size_t epoch, std::size_t iter, const IterationStats& last, Fn&& fn) {
  try {
    fn();
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << "training aborted at epoch " << epoch << " iteration " << iter << ": " << e.what()
       << " (last losses L_D=" << last.loss_d << " L_FSMM=" << last.loss_fsmm << " L_C=" << last.loss_c << ")";
    throw TrainingError(os.str());
  }
}

inline Matrix column_of_ones(std::size_t n) { return Matrix(n, 1, 1.0); }

inline void normalize_mean(Matrix& w) {
  double s = 0.0;
  for (double v : w.values()) s += v;
  const double m = s / double(w.size());
  if (m > 0.0) {
    for (double& v : w.values()) v /= m;
  }
}

inline std::vector<Parameter*> concat(std::vector<Parameter*> a, const std::vector<Parameter*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace detail

/// Everything Algorithm-1 training carries between iterations.
struct ScnState {
  ScnConfig cfg;
  Model model;
  MovingMean mq;
  MovingMean mp;
  Adam step1_opt;  // theta_D and theta_G
  Adam step2_opt;  // theta_C and theta_G
  Rng dropout1;
  Rng dropout2;

  ScnState(const ScnConfig& config, std::size_t input_dim, std::size_t labels)
      : cfg(config),
        model(build_model(config, input_dim, labels, true)),
        mq(model.g.spec().output_width(), config.effective_alpha()),
        mp(model.g.spec().output_width(), config.effective_alpha()),
        dropout1(Rng::stream(config.seed, "dropout/step1")),
        dropout2(Rng::stream(config.seed, "dropout/step2")) {}
};

/// Step 1: moving means of G(x_Q) and w G(x_P), then ascend
/// lambda_d L_D - lambda_fsmm L_FSMM into theta_D and theta_G.
inline void scn_step1(ScnState& s, const Matrix& xp, const Matrix& xq, IterationStats& stats) {
  if (xp.rows() == 0 || xq.rows() == 0) throw DimensionError("scn iteration: empty batch");
  if (xp.cols() != xq.cols()) throw DimensionError("scn iteration: P and Q feature widths differ");
  Model& m = s.model;
  m.set_mode(Mode::train);
  Graph g;
  Tensor fp = extract_features(m.g, g, g.constant(xp), &s.dropout1);
  Tensor fq = extract_features(m.g, g, g.constant(xq), &s.dropout1);
  Tensor dp = discriminate(*m.d, g, fp, &s.dropout1);
  Tensor dq = discriminate(*m.d, g, fq, &s.dropout1);

  Tensor w = shift_factor(dp);
  Tensor mean_q = mean(fq, Axis::rows);
  Tensor mean_p = mean(mul_rows(fp, w), Axis::rows);
  Tensor corrected_q = s.mq.update(mean_q);
  Tensor corrected_p = s.mp.update(mean_p);
  Tensor l_fsmm = fsmm_loss(corrected_q, corrected_p);
  Tensor l_d = discriminative_loss(dp, dq);
  stats.loss_d = l_d.item();
  stats.loss_fsmm = l_fsmm.item();

  Tensor objective = scale(l_d, s.cfg.effective_lambda_d());
  if (s.cfg.variant != Variant::d_only) objective = sub(objective, scale(l_fsmm, s.cfg.effective_lambda_fsmm()));
  g.backward(scale(objective, -1.0));  // ascent
  const auto params = detail::concat(m.d->parameters(), m.g.parameters());
  s.step1_opt.step(params, s.cfg.learning_rate);
}

/// Step 2: w from the updated discriminator, held constant; descend the
/// weighted classification loss into theta_C and theta_G.
inline void scn_step2(ScnState& s, const Matrix& xp, const Matrix& yp, IterationStats& stats) {
  Model& m = s.model;
  m.set_mode(Mode::train);
  m.d->set_mode(Mode::eval);
  Graph g;
  Tensor fp = extract_features(m.g, g, g.constant(xp), &s.dropout2);
  Tensor dp = discriminate(*m.d, g, fp, nullptr);
  Matrix wv = s.cfg.force_uniform_weights ? detail::column_of_ones(xp.rows()) : detach(shift_factor(dp)).value();
  if (s.cfg.normalize_weights) detail::normalize_mean(wv);
  Tensor w = g.constant(std::move(wv));
  Tensor logits = classify(m.c, g, fp, &s.dropout2);
  Tensor l_c = weighted_classification_loss(logits, yp, w);
  stats.loss_c = l_c.item();
  g.backward(l_c);
  double max_grad = 0.0;
  for (const Parameter* p : m.d->parameters()) {
    for (double v : p->grad.values()) max_grad = std::max(max_grad, std::abs(v));
  }
  stats.step2_disc_grad = max_grad;
  const auto params = detail::concat(m.c.parameters(), m.g.parameters());
  s.step2_opt.step(params, s.cfg.learning_rate);
  m.d->set_mode(Mode::train);
}

/// One two-step iteration on a P batch (features, labels) and a Q batch.
inline IterationStats scn_iteration(ScnState& s, const Matrix& xp, const Matrix& yp, const Matrix& xq) {
  IterationStats stats;
  scn_step1(s, xp, xq, stats);
  scn_step2(s, xp, yp, stats);
  return stats;
}

namespace detail {

inline double validation_auc(Model& m, const Dataset* val) {
  if (val == nullptr || val->size() == 0 || !val->labels) return std::nan("");
  const Matrix logits = m.logits(val->features);
  return evaluate_multilabel(logits, *val->labels).macro_auc;
}

/// Shared epoch loop. `iterate` runs one mini-batch and returns its stats.
template <typename Iterate>
void run_epochs(const ScnConfig& cfg, const Dataset& train, const Dataset* val, Model& model, TrainReport& report,
                Iterate&& iterate) {
  const auto start = std::chrono::steady_clock::now();
  Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle");
  const std::size_t n = train.size();
  std::optional<Model> best;
  std::size_t since_best = 0;
  IterationStats last;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffle_rng.permutation(n);
    double sum_d = 0, sum_f = 0, sum_c = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - begin);
      if (count < 2) break;
      std::span<const std::size_t> idx(order.data() + begin, count);
      with_training_context(epoch, report.iterations, last, [&] { last = iterate(idx); });
      report.max_step2_disc_grad = std::max(report.max_step2_disc_grad, last.step2_disc_grad);
      sum_d += last.loss_d;
      sum_f += last.loss_fsmm;
      sum_c += last.loss_c;
      ++batches;
      ++report.iterations;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    if (batches > 0) {
      rec.loss_d = sum_d / double(batches);
      rec.loss_fsmm = sum_f / double(batches);
      rec.loss_c = sum_c / double(batches);
    }
    if (!std::isfinite(rec.loss_c)) throw TrainingError("non-finite classification loss at epoch " + std::to_string(epoch));
    rec.val_auc = validation_auc(model, val);
    report.epochs.push_back(rec);

    if (std::isnan(rec.val_auc)) {
      report.best_epoch = epoch;
      continue;
    }
    if (!best || rec.val_auc > report.best_val_auc) {
      best = model;
      report.best_val_auc = rec.val_auc;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (best) model = std::move(*best);
  model.set_mode(Mode::eval);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline void check_training_inputs(const Dataset& train) {
  if (train.size() == 0) throw std::invalid_argument("training set is empty");
  if (!train.labels) throw std::invalid_argument("training set has no labels");
  train.validate();
}

}  // namespace detail

struct TrainResult {
  Model model;
  TrainReport report;
};

/// End-to-end SCN: each shuffled P batch is paired with an equally sized Q
/// batch drawn uniformly with replacement. Early stopping on validation
/// macro-AUC; the best-validation model is returned.
inline TrainResult train_scn(const Dataset& train, const Matrix& test_features, const Dataset* val,
                             const ScnConfig& cfg) {
  detail::check_training_inputs(train);
  if (test_features.rows() == 0) throw std::invalid_argument("test features are empty");
  if (test_features.cols() != train.dim()) throw DimensionError("P and Q feature widths differ");
  cfg.validate(true);

  ScnState state(cfg, train.dim(), train.num_labels());
  Rng q_rng = Rng::stream(cfg.seed, "q-batches");
  TrainReport report;
  report.method = "scn";
  report.config = cfg;
  report.seed = cfg.seed;
  std::vector<std::size_t> q_idx;
  detail::run_epochs(cfg, train, val, state.model, report, [&](std::span<const std::size_t> idx) {
    q_idx.resize(idx.size());
    for (auto& q : q_idx) q = q_rng.uniform_index(test_features.rows());
    const Matrix xp = train.features.gather_rows(idx);
    const Matrix yp = train.labels->gather_rows(idx);
    const Matrix xq = test_features.gather_rows(q_idx);
    return scn_iteration(state, xp, yp, xq);
  });
  report.final_weights = state.model.shift_weights(train.features);
  return {std::move(state.model), std::move(report)};
}

/// State for G + C training with per-sample weights.
struct ClassifierState {
  ScnConfig cfg;
  Model model;
  Adam opt;
  Rng dropout;

  ClassifierState(const ScnConfig& config, std::size_t input_dim, std::size_t labels)
      : cfg(config),
        model(build_model(config, input_dim, labels, false)),
        dropout(Rng::stream(config.seed, "dropout/step2")) {}
};

/// One weighted ERM step; `w` is a b x 1 column of constants.
inline IterationStats classifier_step(ClassifierState& s, const Matrix& xp, const Matrix& yp, Matrix w) {
  Model& m = s.model;
  m.set_mode(Mode::train);
  Graph g;
  Tensor fp = extract_features(m.g, g, g.constant(xp), &s.dropout);
  if (s.cfg.normalize_weights) detail::normalize_mean(w);
  Tensor wt = g.constant(std::move(w));
  Tensor logits = classify(m.c, g, fp, &s.dropout);
  Tensor l_c = weighted_classification_loss(logits, yp, wt);
  IterationStats stats;
  stats.loss_c = l_c.item();
  g.backward(l_c);
  const auto params = detail::concat(m.c.parameters(), m.g.parameters());
  s.opt.step(params, s.cfg.learning_rate);
  return stats;
}

/// `pretrain_epochs` of unweighted ERM, then ERM weighted by the frozen `fixed_w`.
inline TrainResult train_weighted(const Dataset& train, const ShiftWeights& fixed_w, const Dataset* val,
                                  const ScnConfig& cfg, std::size_t pretrain_epochs) {
  detail::check_training_inputs(train);
  if (fixed_w.size() != train.size()) {
    throw DimensionError("train_weighted: " + std::to_string(fixed_w.size()) + " weights for " +
                         std::to_string(train.size()) + " rows");
  }
  fixed_w.validate();
  cfg.validate(false);
  ClassifierState state(cfg, train.dim(), train.num_labels());
  TrainReport report;
  report.method = "weighted";
  report.config = cfg;
  report.seed = cfg.seed;
  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  detail::run_epochs(cfg, train, val, state.model, report, [&](std::span<const std::size_t> idx) {
    const bool pretraining = report.iterations < pretrain_epochs * per_epoch;
    Matrix w(idx.size(), 1, 1.0);
    if (!pretraining) {
      for (std::size_t i = 0; i < idx.size(); ++i) w[i] = fixed_w.values[idx[i]];
    }
    return classifier_step(state, train.features.gather_rows(idx), train.labels->gather_rows(idx), std::move(w));
  });
  report.final_weights = fixed_w;
  return {std::move(state.model), std::move(report)};
}

/// Plain ERM with G + C; no discriminator is built.
inline TrainResult train_vanilla(const Dataset& train, const Dataset* val, const ScnConfig& cfg) {
  TrainResult r = train_weighted(train, ShiftWeights::uniform(train.size()), val, cfg, 0);
  r.report.method = "vanilla";
  return r;
}

/// L_FSMM estimates over `iterations` fresh batch pairs at fixed parameters,
/// using moving means with decay `alpha` (0 gives the batch-wise estimate).
inline std::vector<double> fsmm_trace(Model& model, const Matrix& xp, const Matrix& xq, double alpha,
                                      std::size_t iterations, std::size_t batch, std::uint64_t seed) {
  if (!model.d) throw std::logic_error("fsmm_trace needs a discriminator");
  const Mode saved = model.g.mode();
  model.set_mode(Mode::eval);
  Rng rng = Rng::stream(seed, "fsmm-trace");
  const std::size_t h = model.g.spec().output_width();
  MovingMean mq(h, alpha), mp(h, alpha);
  std::vector<double> trace;
  std::vector<std::size_t> ip(batch), iq(batch);
  for (std::size_t t = 0; t < iterations; ++t) {
    for (auto& i : ip) i = rng.uniform_index(xp.rows());
    for (auto& i : iq) i = rng.uniform_index(xq.rows());
    const Matrix fp = model.g.predict(xp.gather_rows(ip));
    const Matrix fq = model.g.predict(xq.gather_rows(iq));
    const Matrix dp = model.d->predict(fp);
    std::vector<double> m_p(h, 0.0), m_q(h, 0.0);
    for (std::size_t r = 0; r < batch; ++r) {
      const double w = shift_factor(dp[r]);
      for (std::size_t c = 0; c < h; ++c) {
        m_p[c] += w * fp(r, c) / double(batch);
        m_q[c] += fq(r, c) / double(batch);
      }
    }
    const auto cq = mq.update(m_q);
    const auto cp = mp.update(m_p);
    trace.push_back(fsmm_loss(cq, cp));
  }
  model.set_mode(saved);
  return trace;
}

inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / double(v.size() - 1);
}

}  // namespace scn
