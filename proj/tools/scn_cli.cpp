#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "scn/scn.hpp"

namespace fs = std::filesystem;
using scn::format_short;

namespace {

void print_metrics(const std::string& label, const scn::MetricsReport& m) {
  std::printf("%s  auc %s  ap %s  f1 %s  risk %s  n %zu", label.c_str(), format_short(m.macro_auc).c_str(),
              format_short(m.macro_ap).c_str(), format_short(m.macro_f1).c_str(),
              format_short(m.unweighted_risk).c_str(), m.samples);
  if (!m.undefined_labels.empty()) std::printf("  undefined labels %zu", m.undefined_labels.size());
  std::printf("\n");
}

void print_run(const scn::RunResult& r) {
  std::printf("%-10s seed %-6llu auc %-9s ap %-9s f1 %-9s disc %-10s disc(uniform) %-10s epochs %zu  %ss\n",
              r.method.c_str(), static_cast<unsigned long long>(r.seed), format_short(r.test.macro_auc).c_str(),
              format_short(r.test.macro_ap).c_str(), format_short(r.test.macro_f1).c_str(),
              format_short(r.discrepancy).c_str(), format_short(r.discrepancy_uniform).c_str(), r.train.epochs.size(),
              format_short(r.train.wall_seconds).c_str());
  std::fflush(stdout);
}

void print_summary(const std::vector<scn::SummaryRow>& rows) {
  std::printf("%-10s %-5s %-22s %-22s %-22s %-22s\n", "method", "runs", "auc", "ap", "f1", "discrepancy");
  for (const auto& r : rows) {
    auto cell = [](const scn::MeanSe& m) { return format_short(m.mean) + " +- " + format_short(m.se); };
    std::printf("%-10s %-5zu %-22s %-22s %-22s %-22s\n", r.method.c_str(), r.auc.n, cell(r.auc).c_str(),
                cell(r.ap).c_str(), cell(r.f1).c_str(), cell(r.discrepancy).c_str());
  }
}

void print_diagnosis(const scn::Diagnosis& d) {
  std::printf("discrepancy          %s\n", format_short(d.discrepancy).c_str());
  std::printf("discrepancy uniform  %s\n", format_short(d.discrepancy_uniform).c_str());
  std::printf("weights n %zu  min %s  median %s  max %s  ess %s\n", d.weights.n, format_short(d.weights.min).c_str(),
              format_short(d.weights.median).c_str(), format_short(d.weights.max).c_str(),
              format_short(d.weights.ess).c_str());
}

scn::ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed,
                                  const std::string& out, bool normalize) {
  scn::ExperimentConfig cfg = scn::load_experiment_config(path);
  if (seed) cfg.seeds = {*seed};
  if (!out.empty()) cfg.output = out;
  if (normalize) cfg.scn.normalize_weights = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Covariate-shift correction experiments"};
  app.require_subcommand(1);

  std::string config, out, method, model_path, data_path, weights_path, train_path, test_path;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool normalize = false;

  auto* gen = app.add_subcommand("generate", "write train/test/validation splits from a config's dataset section");
  gen->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  auto* gen_seed = gen->add_option("--seed", seed, "data seed");
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one method for one seed");
  train->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  auto* train_seed = train->add_option("--seed", seed, "run seed");
  train->add_option("--method", method, "method name")->required();
  train->add_option("--out", out, "output root (overrides the config)");
  train->add_flag("--normalize-weights", normalize, "rescale each batch's weights to mean 1");

  auto* eval = app.add_subcommand("evaluate", "evaluate a saved model on a labeled dataset");
  eval->add_option("--model", model_path, "model.json from a run")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_path, "dataset CSV")->required()->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "run a full experiment");
  run->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  auto* run_seed = run->add_option("--seed", seed, "restrict to a single seed");
  run->add_option("--out", out, "output root (overrides the config)");
  run->add_option("--method", method, "restrict to a single method");
  run->add_flag("--normalize-weights", normalize, "rescale each batch's weights to mean 1");
  run->add_option("--threads", threads, "parallel runs")->check(CLI::PositiveNumber);

  auto* diag = app.add_subcommand("diagnose", "feature-space discrepancy and weight statistics");
  diag->add_option("--weights", weights_path, "weights.csv")->required()->check(CLI::ExistingFile);
  diag->add_option("--train", train_path, "training dataset CSV")->required()->check(CLI::ExistingFile);
  diag->add_option("--test", test_path, "test dataset CSV")->required()->check(CLI::ExistingFile);
  diag->add_option("--model", model_path, "use this model's extractor output as the feature space")
      ->check(CLI::ExistingFile);

  auto* grid = app.add_subcommand("grid", "per-cell raw and weighted counts for a spatial dataset");
  grid->add_option("--data", data_path, "spatial dataset CSV")->required()->check(CLI::ExistingFile);
  grid->add_option("--weights", weights_path, "weights.csv (uniform if omitted)")->check(CLI::ExistingFile);
  grid->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = scn::load_experiment_config(config);
      const std::uint64_t s = *gen_seed ? seed : cfg.dataset.seed.value_or(cfg.seeds.front());
      auto data = scn::load_experiment_data(cfg.dataset, s);
      scn::write_dataset(fs::path(out) / "train.csv", data.train);
      scn::write_dataset(fs::path(out) / "test.csv", data.test);
      if (data.validation) scn::write_dataset(fs::path(out) / "validation.csv", *data.validation);
      std::printf("train %zu  test %zu  validation %zu  dim %zu  labels %zu\n", data.train.size(), data.test.size(),
                  data.validation ? data.validation->size() : 0, data.train.dim(), data.train.num_labels());
      return 0;
    }
    if (*train || *run) {
      std::optional<std::uint64_t> s;
      if ((*train && *train_seed) || (*run && *run_seed)) s = seed;
      auto cfg = load_config(config, s, out, normalize);
      if (!method.empty()) cfg.methods = {method};
      cfg.validate();
      scn::RunOptions opt;
      opt.threads = threads;
      opt.on_run = print_run;
      auto outcome = scn::run_experiment(cfg, opt);
      for (const auto& f : outcome.failures) {
        std::fprintf(stderr, "FAILED %s seed %llu: %s\n", f.method.c_str(), static_cast<unsigned long long>(f.seed),
                     f.error.c_str());
      }
      if (*run) print_summary(outcome.summary);
      std::printf("results in %s\n", outcome.dir.string().c_str());
      return outcome.exit_code();
    }
    if (*eval) {
      scn::Model m = scn::model_from_json(scn::read_json(model_path));
      scn::Dataset ds = scn::read_dataset(data_path);
      if (!ds.labels) throw std::invalid_argument("dataset has no labels");
      print_metrics(data_path, scn::evaluate_multilabel(m.logits(ds.features), *ds.labels));
      return 0;
    }
    if (*diag) {
      const scn::ShiftWeights w = scn::read_weights(weights_path);
      const scn::Dataset tr = scn::read_dataset(train_path);
      const scn::Dataset te = scn::read_dataset(test_path);
      if (!model_path.empty()) {
        scn::Model m = scn::model_from_json(scn::read_json(model_path));
        print_diagnosis(scn::diagnose(w, m.features(tr.features), m.features(te.features)));
      } else {
        print_diagnosis(scn::diagnose(w, tr.features, te.features));
      }
      return 0;
    }
    if (*grid) {
      const scn::Dataset ds = scn::read_dataset(data_path);
      const scn::ShiftWeights w = weights_path.empty() ? scn::ShiftWeights::uniform(ds.size()) : scn::read_weights(weights_path);
      const auto g = scn::emit_weight_grid(ds, w);
      scn::write_weight_grid(out, g);
      std::printf("grid %zux%zu  cv raw %s  cv weighted %s\n", g.size, g.size,
                  format_short(scn::coefficient_of_variation(g.raw)).c_str(),
                  format_short(scn::coefficient_of_variation(g.weighted)).c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
