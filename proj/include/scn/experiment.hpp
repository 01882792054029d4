#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "scn/baselines.hpp"
#include "scn/io.hpp"
#include "scn/metrics.hpp"
#include "scn/synthdata.hpp"
#include "scn/trainer.hpp"

namespace scn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline ScnConfig parse_scn_config(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"lambda_d", "lambda_fsmm", "alpha", "learning_rate", "batch_size", "epochs", "patience",
                      "variant", "normalize_weights", "force_uniform_weights", "seed", "keep_prob", "g_hidden",
                      "d_hidden", "c_hidden", "f1_threshold"},
                     "scn");
  ScnConfig c;
  detail::read_opt(j, "lambda_d", c.lambda_d, "scn");
  detail::read_opt(j, "lambda_fsmm", c.lambda_fsmm, "scn");
  detail::read_opt(j, "alpha", c.alpha, "scn");
  detail::read_opt(j, "learning_rate", c.learning_rate, "scn");
  detail::read_opt(j, "batch_size", c.batch_size, "scn");
  detail::read_opt(j, "epochs", c.epochs, "scn");
  detail::read_opt(j, "patience", c.patience, "scn");
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  detail::read_opt(j, "normalize_weights", c.normalize_weights, "scn");
  detail::read_opt(j, "force_uniform_weights", c.force_uniform_weights, "scn");
  detail::read_opt(j, "seed", c.seed, "scn");
  detail::read_opt(j, "keep_prob", c.keep_prob, "scn");
  detail::read_opt(j, "g_hidden", c.g_hidden, "scn");
  detail::read_opt(j, "d_hidden", c.d_hidden, "scn");
  detail::read_opt(j, "c_hidden", c.c_hidden, "scn");
  detail::read_opt(j, "f1_threshold", c.f1_threshold, "scn");
  c.validate(false);
  return c;
}

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"vanilla", "scn", "scn_d", "scn_fsmm", "scn_minus",
                                          "kde", "kliep", "dfw", "oracle"};
  return m;
}

struct BaselineConfig {
  std::size_t pretrain_epochs = 20;
  std::size_t dfw_epochs = 20;
  KliepOptions kliep;
};

struct DatasetSpec {
  nlohmann::json generator;  // {"name", "params"}; seed filled in per run
  std::optional<std::uint64_t> seed;  // fixed data seed; otherwise the run seed
  std::optional<std::filesystem::path> train_file, test_file, validation_file;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  std::vector<std::string> methods;
  ScnConfig scn;
  BaselineConfig baselines;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output = "out";

  void validate() const {
    if (methods.empty()) throw ConfigError("config: at least one method is required");
    for (const auto& m : methods) {
      if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
        throw ConfigError("config: unknown method '" + m + "'");
      }
    }
    if (seeds.empty()) throw ConfigError("config: at least one seed is required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("config: seeds must be distinct");
    }
    for (const auto* f : {&dataset.train_file, &dataset.test_file, &dataset.validation_file}) {
      if (*f && !std::filesystem::exists(**f)) throw ConfigError("config: dataset file " + (*f)->string() + " not found");
    }
    if (dataset.generator.is_null() && !(dataset.train_file && dataset.test_file)) {
      throw ConfigError("config: dataset needs a generator or train/test files");
    }
  }
};

/// Parses a config document; `base_dir` resolves relative dataset paths.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  detail::check_keys(j, {"name", "dataset", "methods", "scn", "baselines", "seeds", "output"}, "config");
  ExperimentConfig cfg;
  detail::read_opt(j, "name", cfg.name, "config");
  detail::read_opt(j, "methods", cfg.methods, "config");
  detail::read_opt(j, "seeds", cfg.seeds, "config");
  if (j.contains("output")) cfg.output = j.at("output").get<std::string>();
  if (j.contains("scn")) cfg.scn = parse_scn_config(j.at("scn"));
  if (j.contains("baselines")) {
    const auto& b = j.at("baselines");
    detail::check_keys(b, {"pretrain_epochs", "dfw_epochs", "kliep"}, "baselines");
    detail::read_opt(b, "pretrain_epochs", cfg.baselines.pretrain_epochs, "baselines");
    detail::read_opt(b, "dfw_epochs", cfg.baselines.dfw_epochs, "baselines");
    if (b.contains("kliep")) {
      const auto& k = b.at("kliep");
      detail::check_keys(k, {"n_centers", "sigma_grid", "steps", "folds"}, "baselines.kliep");
      detail::read_opt(k, "n_centers", cfg.baselines.kliep.n_centers, "baselines.kliep");
      detail::read_opt(k, "sigma_grid", cfg.baselines.kliep.sigma_grid, "baselines.kliep");
      detail::read_opt(k, "steps", cfg.baselines.kliep.steps, "baselines.kliep");
      detail::read_opt(k, "folds", cfg.baselines.kliep.folds, "baselines.kliep");
    }
  }
  if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset'");
  const auto& d = j.at("dataset");
  detail::check_keys(d, {"generator", "params", "seed", "train", "test", "validation"}, "dataset");
  if (d.contains("generator")) {
    const std::string gen = d.at("generator");
    nlohmann::json params = d.value("params", nlohmann::json::object());
    // round-trip through the typed params so unknown keys surface here
    if (gen == "spatial_bias") {
      detail::check_keys(params,
                         {"grid_size", "n_obs", "n_test", "n_val", "hotspots", "hotspot_sigma", "hotspot_strength",
                          "n_species", "habitat_fields", "field_components"},
                         "dataset.params");
      params = nlohmann::json(params.get<SpatialParams>());
    } else if (gen == "gaussian_shift") {
      detail::check_keys(params, {"n_p", "n_q", "n_val", "mean_p", "mean_q", "cov", "n_labels", "label_scale"},
                         "dataset.params");
      params = nlohmann::json(params.get<GaussianShiftParams>());
    } else {
      throw ConfigError("dataset: unknown generator '" + gen + "'");
    }
    cfg.dataset.generator = {{"name", gen}, {"params", params}};
  }
  if (d.contains("seed")) cfg.dataset.seed = d.at("seed").get<std::uint64_t>();
  auto path_of = [&](const char* key, std::optional<std::filesystem::path>& out) {
    if (!d.contains(key)) return;
    std::filesystem::path p = d.at(key).get<std::string>();
    out = p.is_absolute() ? p : base_dir / p;
  };
  path_of("train", cfg.dataset.train_file);
  path_of("test", cfg.dataset.test_file);
  path_of("validation", cfg.dataset.validation_file);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_json(path), path.parent_path());
}

struct ExperimentData {
  Dataset train;
  Dataset test;
  std::optional<Dataset> validation;
};

inline ExperimentData load_experiment_data(const DatasetSpec& spec, std::uint64_t run_seed) {
  ExperimentData out;
  if (!spec.generator.is_null()) {
    nlohmann::json gen = spec.generator;
    gen["seed"] = spec.seed.value_or(run_seed);
    GeneratedData g = regenerate(gen);
    out.train = std::move(g.train);
    out.test = std::move(g.test);
    if (g.validation.size() > 0) out.validation = std::move(g.validation);
    return out;
  }
  out.train = read_dataset(*spec.train_file);
  out.test = read_dataset(*spec.test_file);
  if (spec.validation_file) out.validation = read_dataset(*spec.validation_file);
  return out;
}

// ---------------------------------------------------------------------------
// model serialization

inline nlohmann::json network_to_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  const MlpSpec& s = net.spec();
  for (std::size_t l = 0; l < s.layers(); ++l) {
    layers.push_back({{"activation", s.activations[l] == Activation::relu ? "relu" : "none"},
                      {"keep_prob", s.keep_prob[l]},
                      {"weight", net.weights()[l].value.values()},
                      {"bias", net.biases()[l].value.values()}});
  }
  return {{"widths", s.widths}, {"head", s.head == Head::sigmoid ? "sigmoid" : "linear"}, {"layers", layers}};
}

inline Network network_from_json(const nlohmann::json& j) {
  MlpSpec s;
  s.widths = j.at("widths").get<std::vector<std::size_t>>();
  s.head = j.at("head") == "sigmoid" ? Head::sigmoid : Head::linear;
  const auto& layers = j.at("layers");
  for (const auto& l : layers) {
    s.activations.push_back(l.at("activation") == "relu" ? Activation::relu : Activation::none);
    s.keep_prob.push_back(l.at("keep_prob").get<double>());
  }
  Network net(s);
  for (std::size_t l = 0; l < s.layers(); ++l) {
    net.weights().push_back({"W" + std::to_string(l),
                             Matrix(s.widths[l], s.widths[l + 1], layers[l].at("weight").get<std::vector<double>>()),
                             {}});
    net.biases().push_back(
        {"b" + std::to_string(l), Matrix(1, s.widths[l + 1], layers[l].at("bias").get<std::vector<double>>()), {}});
  }
  return net;
}

inline nlohmann::json model_to_json(const Model& m) {
  return {{"g", network_to_json(m.g)}, {"c", network_to_json(m.c)}, {"d", m.d ? network_to_json(*m.d) : nlohmann::json()}};
}

inline Model model_from_json(const nlohmann::json& j) {
  Model m;
  m.g = network_from_json(j.at("g"));
  m.c = network_from_json(j.at("c"));
  if (j.contains("d") && !j.at("d").is_null()) m.d = network_from_json(j.at("d"));
  m.set_mode(Mode::eval);
  return m;
}

// ---------------------------------------------------------------------------
// reports

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

/// NaN is not representable in JSON; written as null.
inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& l : r.per_label) {
    labels.push_back({{"auc", optional_json(l.auc)}, {"ap", optional_json(l.ap)}, {"f1", l.f1}, {"positives", l.positives}});
  }
  return {{"macro_auc", number_or_null(r.macro_auc)},
          {"macro_ap", number_or_null(r.macro_ap)},
          {"macro_f1", number_or_null(r.macro_f1)},
          {"undefined_labels", r.undefined_labels},
          {"unweighted_risk", number_or_null(r.unweighted_risk)},
          {"weighted_risk", number_or_null(r.weighted_risk)},
          {"samples", r.samples},
          {"threshold", r.threshold},
          {"per_label", labels}};
}

struct WeightSummary {
  double min = 0, median = 0, max = 0, mean = 0, ess = 0;
  std::size_t n = 0;
};

inline WeightSummary summarize_weights(const ShiftWeights& w) {
  WeightSummary s;
  s.n = w.size();
  if (w.values.empty()) return s;
  std::vector<double> v = w.values;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  s.mean = mean(v);
  s.ess = w.effective_sample_size();
  return s;
}

inline nlohmann::json weight_summary_json(const WeightSummary& s) {
  return {{"n", s.n}, {"min", s.min}, {"median", s.median}, {"max", s.max}, {"mean", s.mean}, {"ess", s.ess}};
}

inline std::string curves_to_csv(const TrainReport& r) {
  std::string out = "epoch,loss_d,loss_fsmm,loss_c,val_auc\n";
  auto cell = [](double v) { return std::isfinite(v) ? format_full(v) : std::string(); };
  for (const auto& e : r.epochs) {
    out += std::to_string(e.epoch) + "," + cell(e.loss_d) + "," + cell(e.loss_fsmm) + "," + cell(e.loss_c) + "," +
           cell(e.val_auc) + "\n";
  }
  return out;
}

struct RunResult {
  std::string method;
  std::uint64_t seed = 0;
  MetricsReport test;
  /// Feature-space discrepancy in the run's own extractor output, for the
  /// method's weights and for uniform weights.
  double discrepancy = std::nan("");
  double discrepancy_uniform = std::nan("");
  ShiftWeights weights;
  TrainReport train;
  std::optional<Model> model;
  bool kliep_converged = true;
};

inline nlohmann::json run_to_json(const RunResult& r) {
  return {{"method", r.method},
          {"seed", r.seed},
          {"test", metrics_to_json(r.test)},
          {"discrepancy", number_or_null(r.discrepancy)},
          {"discrepancy_uniform", number_or_null(r.discrepancy_uniform)},
          {"weights", weight_summary_json(summarize_weights(r.weights))},
          {"weight_source", to_string(r.weights.source)},
          {"kliep_converged", r.kliep_converged},
          {"best_epoch", r.train.best_epoch},
          {"epochs_run", r.train.epochs.size()},
          {"iterations", r.train.iterations},
          {"best_val_auc", number_or_null(r.train.best_val_auc)},
          {"wall_seconds", r.train.wall_seconds},
          {"max_step2_disc_grad", r.train.max_step2_disc_grad},
          {"config", r.train.config}};
}

// ---------------------------------------------------------------------------
// single run

inline ScnConfig config_for_method(const ScnConfig& base, const std::string& method, std::uint64_t seed) {
  ScnConfig c = base;
  c.seed = seed;
  if (method == "scn") c.variant = Variant::full;
  else if (method == "scn_d") c.variant = Variant::d_only;
  else if (method == "scn_fsmm") c.variant = Variant::fsmm_only;
  else if (method == "scn_minus") c.variant = Variant::no_moving_avg;
  return c;
}

inline bool is_scn_method(const std::string& m) {
  return m == "scn" || m == "scn_d" || m == "scn_fsmm" || m == "scn_minus";
}

/// Trains `method` on `data` and evaluates it on the test split.
inline RunResult run_method(const std::string& method, std::uint64_t seed, const ExperimentData& data,
                            const ScnConfig& base, const BaselineConfig& bl) {
  if (!data.test.labels) throw std::invalid_argument("test split has no labels to evaluate against");
  RunResult r;
  r.method = method;
  r.seed = seed;
  const ScnConfig cfg = config_for_method(base, method, seed);
  const Dataset* val = data.validation ? &*data.validation : nullptr;
  TrainResult tr;
  if (method == "vanilla") {
    tr = train_vanilla(data.train, val, cfg);
  } else if (is_scn_method(method)) {
    tr = train_scn(data.train, data.test.features, val, cfg);
  } else {
    ShiftWeights w;
    if (method == "kde") {
      w = kde_weights(data.train.features, data.test.features);
    } else if (method == "kliep") {
      KliepOptions ko = bl.kliep;
      ko.seed = seed;
      auto k = kliep_weights(data.train.features, data.test.features, ko);
      r.kliep_converged = k.converged;
      w = std::move(k.weights);
    } else if (method == "dfw") {
      w = dfw_weights(data.train.features, data.test.features, cfg, bl.dfw_epochs);
    } else if (method == "oracle") {
      if (!data.train.oracle) throw std::invalid_argument("oracle weights need a dataset with a density oracle");
      w = true_shift_weights(*data.train.oracle, data.train.features);
    } else {
      throw std::invalid_argument("unknown method '" + method + "'");
    }
    tr = train_weighted(data.train, w, val, cfg, bl.pretrain_epochs);
    tr.report.method = method;
  }
  r.train = std::move(tr.report);
  r.weights = r.train.final_weights;
  Model& m = tr.model;
  r.test = evaluate_multilabel(m.logits(data.test.features), *data.test.labels, cfg.f1_threshold);
  const Matrix fp = m.features(data.train.features);
  const Matrix fq = m.features(data.test.features);
  r.discrepancy = feature_discrepancy(r.weights, fp, fq);
  r.discrepancy_uniform = feature_discrepancy(ShiftWeights::uniform(fp.rows()), fp, fq);
  r.model = std::move(m);
  return r;
}

inline std::filesystem::path run_dir(const std::filesystem::path& exp_dir, const std::string& method, std::uint64_t seed) {
  return exp_dir / method / std::to_string(seed);
}

inline void write_run(const std::filesystem::path& dir, const RunResult& r) {
  write_json(dir / "report.json", run_to_json(r));
  write_text(dir / "curves.csv", curves_to_csv(r.train));
  write_text(dir / "weights.csv", weights_to_csv(r.weights));
  if (r.model) write_json(dir / "model.json", model_to_json(*r.model));
}

// ---------------------------------------------------------------------------
// summary

struct MeanSe {
  double mean = std::nan("");
  double se = std::nan("");
  std::size_t n = 0;
};

/// Mean and standard error (sample sd / sqrt(n)); NaN entries are skipped.
inline MeanSe mean_se(std::span<const double> values) {
  std::vector<double> v;
  for (double x : values) {
    if (std::isfinite(x)) v.push_back(x);
  }
  MeanSe out;
  out.n = v.size();
  if (v.empty()) return out;
  out.mean = mean(v);
  if (v.size() < 2) {
    out.se = 0.0;
    return out;
  }
  double s = 0.0;
  for (double x : v) s += (x - out.mean) * (x - out.mean);
  out.se = std::sqrt(s / double(v.size() - 1)) / std::sqrt(double(v.size()));
  return out;
}

struct SummaryRow {
  std::string method;
  MeanSe auc, ap, f1, discrepancy, discrepancy_uniform;
};

inline std::vector<SummaryRow> summarize(const std::vector<std::string>& methods, const std::vector<RunResult>& runs) {
  std::vector<SummaryRow> rows;
  for (const auto& m : methods) {
    std::vector<double> auc, ap, f1, dis, dis_u;
    for (const auto& r : runs) {
      if (r.method != m) continue;
      auc.push_back(r.test.macro_auc);
      ap.push_back(r.test.macro_ap);
      f1.push_back(r.test.macro_f1);
      dis.push_back(r.discrepancy);
      dis_u.push_back(r.discrepancy_uniform);
    }
    if (auc.empty()) continue;
    rows.push_back({m, mean_se(auc), mean_se(ap), mean_se(f1), mean_se(dis), mean_se(dis_u)});
  }
  return rows;
}

inline std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
  std::string out =
      "method,runs,auc_mean,auc_se,ap_mean,ap_se,f1_mean,f1_se,discrepancy_mean,discrepancy_se,"
      "discrepancy_uniform_mean,discrepancy_uniform_se\n";
  auto cell = [](double v) { return std::isfinite(v) ? format_full(v) : std::string(); };
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.auc.n);
    for (const MeanSe* m : {&r.auc, &r.ap, &r.f1, &r.discrepancy, &r.discrepancy_uniform}) {
      out += "," + cell(m->mean) + "," + cell(m->se);
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json summary_to_json(const std::vector<SummaryRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  auto ms = [](const MeanSe& m) { return nlohmann::json{{"mean", number_or_null(m.mean)}, {"se", number_or_null(m.se)}, {"n", m.n}}; };
  for (const auto& r : rows) {
    out.push_back({{"method", r.method},
                   {"auc", ms(r.auc)},
                   {"ap", ms(r.ap)},
                   {"f1", ms(r.f1)},
                   {"discrepancy", ms(r.discrepancy)},
                   {"discrepancy_uniform", ms(r.discrepancy_uniform)}});
  }
  return {{"rows", out},
          {"note",
           "discrepancy is reported per method as a diagnostic only; a lower value is not claimed to imply a higher AUC"}};
}

struct RunFailure {
  std::string method;
  std::uint64_t seed = 0;
  std::string error;
};

struct ExperimentOutcome {
  std::vector<RunResult> runs;
  std::vector<RunFailure> failures;
  std::vector<SummaryRow> summary;
  std::filesystem::path dir;
  int exit_code() const { return failures.empty() ? 0 : 1; }
};

struct RunOptions {
  std::size_t threads = 1;
  bool write_files = true;
  bool keep_models = false;
  std::function<void(const RunResult&)> on_run;  // called under a lock as runs finish
};

/// Trains every (method, seed) pair, writes per-run artifacts and the
/// summary, and records failures without aborting the remaining runs.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  ExperimentOutcome out;
  out.dir = cfg.output / cfg.name;

  struct Task {
    std::string method;
    std::uint64_t seed;
    std::size_t data;
  };
  std::vector<ExperimentData> data;
  std::vector<Task> tasks;
  for (std::uint64_t seed : cfg.seeds) {
    if (data.empty() || !(cfg.dataset.seed || cfg.dataset.generator.is_null())) {
      data.push_back(load_experiment_data(cfg.dataset, seed));
    }
    for (const auto& m : cfg.methods) tasks.push_back({m, seed, data.size() - 1});
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::vector<std::optional<RunResult>> results(tasks.size());
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      try {
        RunResult r = run_method(t.method, t.seed, data[t.data], cfg.scn, cfg.baselines);
        if (opt.write_files) write_run(run_dir(out.dir, t.method, t.seed), r);
        if (!opt.keep_models) r.model.reset();
        std::lock_guard lock(mu);
        if (opt.on_run) opt.on_run(r);
        results[i] = std::move(r);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        out.failures.push_back({t.method, t.seed, e.what()});
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(opt.threads, tasks.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (auto& r : results) {
    if (r) out.runs.push_back(std::move(*r));
  }
  out.summary = summarize(cfg.methods, out.runs);
  if (opt.write_files) {
    write_text(out.dir / "summary.csv", summary_to_csv(out.summary));
    write_json(out.dir / "summary.json", summary_to_json(out.summary));
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& f : out.failures) fails.push_back({{"method", f.method}, {"seed", f.seed}, {"error", f.error}});
    const auto manifest = out.dir / "failures.json";
    if (!out.failures.empty()) write_json(manifest, fails);
    else if (std::filesystem::exists(manifest)) std::filesystem::remove(manifest);
  }
  return out;
}

// ---------------------------------------------------------------------------
// diagnostics

struct Diagnosis {
  double discrepancy = 0.0;
  double discrepancy_uniform = 0.0;
  WeightSummary weights;
};

/// Feature-space discrepancy of `w` and of uniform weights, with Phi given
/// by the rows of `fp` and `fq` (identity features or an extractor's output).
inline Diagnosis diagnose(const ShiftWeights& w, const Matrix& fp, const Matrix& fq) {
  if (w.size() != fp.rows()) {
    throw DimensionError("diagnose: " + std::to_string(w.size()) + " weights for " + std::to_string(fp.rows()) + " rows");
  }
  w.validate();
  Diagnosis d;
  d.discrepancy = feature_discrepancy(w, fp, fq);
  d.discrepancy_uniform = feature_discrepancy(ShiftWeights::uniform(fp.rows()), fp, fq);
  d.weights = summarize_weights(w);
  return d;
}

struct WeightGrid {
  std::size_t size = 0;
  Matrix raw;       // sample count per cell, row-major by cell row
  Matrix weighted;  // sum of weights per cell
};

/// Counts and weight sums per grid cell for a spatial dataset.
inline WeightGrid emit_weight_grid(const Dataset& ds, const ShiftWeights& w) {
  if (!ds.generator.is_object() || ds.generator.value("name", "") != "spatial_bias") {
    throw std::invalid_argument("weight grid needs a spatial dataset");
  }
  if (w.size() != ds.size()) throw DimensionError("weight grid: weights not aligned with dataset rows");
  WeightGrid g;
  g.size = ds.generator.at("params").at("grid_size").get<std::size_t>();
  g.raw = Matrix(g.size, g.size);
  g.weighted = Matrix(g.size, g.size);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const auto cell = cell_of(ds.features.row(r), g.size);
    if (!cell) throw std::invalid_argument("weight grid: row " + std::to_string(r) + " lies outside the unit square");
    g.raw[*cell] += 1.0;
    g.weighted[*cell] += w.values[r];
  }
  return g;
}

/// 0 for empty cells, else 1 + floor(log2 v) clipped to [1, 9], so bins
/// run over 1, 2, 4, ..., 256.
inline Matrix log2_bins(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double v = m[i];
    out[i] = v <= 0.0 ? 0.0 : std::clamp(std::floor(std::log2(v)), 0.0, 8.0) + 1.0;
  }
  return out;
}

inline std::string grid_to_csv(const Matrix& m) {
  std::string out;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) out += ",";
      out += format_full(m(r, c));
    }
    out += "\n";
  }
  return out;
}

inline Matrix read_grid_csv(const std::filesystem::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  std::vector<double> vals;
  std::size_t rows = 0, cols = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (rows == 0) cols = cells.size();
    if (cells.size() != cols) throw IoError(path.string() + ": ragged grid");
    for (const auto& c : cells) vals.push_back(parse_double(c, path.string()));
    ++rows;
  }
  return Matrix(rows, cols, std::move(vals));
}

inline void write_weight_grid(const std::filesystem::path& dir, const WeightGrid& g) {
  write_text(dir / "grid_raw.csv", grid_to_csv(g.raw));
  write_text(dir / "grid_weighted.csv", grid_to_csv(g.weighted));
  write_text(dir / "grid_raw_log2.csv", grid_to_csv(log2_bins(g.raw)));
  write_text(dir / "grid_weighted_log2.csv", grid_to_csv(log2_bins(g.weighted)));
}

/// Coefficient of variation of the per-cell values.
inline double coefficient_of_variation(const Matrix& m) {
  const double mu = mean(m.values());
  double s = 0.0;
  for (double v : m.values()) s += (v - mu) * (v - mu);
  return std::sqrt(s / double(m.size())) / mu;
}

}  // namespace scn
