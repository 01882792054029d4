#include <gtest/gtest.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sys/wait.h>
#include <unistd.h>

#include "scn/scn.hpp"

using namespace scn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("scn_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json small_config(const fs::path& out) {
  return {{"name", "tiny"},
          {"dataset",
           {{"generator", "gaussian_shift"},
            {"params", {{"n_p", 500}, {"n_q", 200}, {"n_val", 100}, {"mean_p", {0.0, 0.0}}, {"mean_q", {1.0, 0.5}}, {"n_labels", 2}}}}},
          {"methods", {"vanilla"}},
          {"scn", {{"epochs", 2}, {"batch_size", 64}, {"learning_rate", 0.001}, {"g_hidden", {8}}, {"d_hidden", {8}}, {"c_hidden", {8}}}},
          {"baselines", {{"pretrain_epochs", 1}, {"dfw_epochs", 2}, {"kliep", {{"n_centers", 20}, {"steps", 500}}}}},
          {"seeds", {1}},
          {"output", out.string()}};
}

struct Command {
  int status = -1;
  std::string output;
};

Command run_cli(const std::string& args) {
  Command c;
  const std::string cmd = std::string(SCN_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return c;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) c.output += buf;
  const int raw = ::pclose(pipe);
  c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return c;
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::istringstream is(read_text(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) rows.push_back(split_csv_line(line));
  return rows;
}

}  // namespace

TEST(Config, UnknownKeysAreErrors) {
  const auto base = small_config("out");
  EXPECT_NO_THROW(parse_experiment_config(base));
  auto bad = base;
  bad["epochs"] = 3;
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["scn"]["lambda1"] = 1.0;
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["dataset"]["params"]["n_pp"] = 10;
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["baselines"]["kliep"]["sigma"] = 1.0;
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
}

TEST(Config, SchemaViolations) {
  const auto base = small_config("out");
  auto bad = base;
  bad["methods"] = json::array();
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["methods"] = {"vanilla", "kmm"};
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["seeds"] = {1, 2, 1};
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad.erase("dataset");
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["dataset"] = {{"train", "missing.csv"}, {"test", "missing.csv"}};
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["dataset"]["generator"] = "ebird";
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["scn"]["batch_size"] = "large";
  EXPECT_THROW(parse_experiment_config(bad), ConfigError);
  bad = base;
  bad["scn"]["alpha"] = 1.5;
  EXPECT_THROW(parse_experiment_config(bad), std::invalid_argument);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(fs::path(SCN_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_experiment_config(entry.path())) << entry.path();
  }
  const auto cfg = load_experiment_config(fs::path(SCN_SOURCE_DIR) / "configs" / "spatial_benchmark.json");
  EXPECT_EQ(cfg.seeds.size(), 5u);
  EXPECT_EQ(cfg.dataset.generator.at("params").at("grid_size"), 32);
}

TEST(Io, DatasetRoundTripKeepsFullPrecisionAndOracle) {
  const auto dir = scratch("io_dataset");
  SpatialParams p;
  p.grid_size = 8;
  p.n_obs = 50;
  p.n_test = 20;
  p.n_val = 10;
  p.hotspots = {{2.0, 2.0}};
  p.n_species = 3;
  p.habitat_fields = 2;
  const auto data = gen_spatial_bias(p, 4);
  write_dataset(dir / "train.csv", data.train);
  const Dataset back = read_dataset(dir / "train.csv");
  EXPECT_EQ(back.features, data.train.features);
  EXPECT_EQ(*back.labels, *data.train.labels);
  EXPECT_EQ(back.domain, Domain::train_p);
  ASSERT_TRUE(back.oracle);
  EXPECT_EQ(true_shift_weights(*back.oracle, back.features).values,
            true_shift_weights(*data.oracle, data.train.features).values);
  const auto rows = read_csv_rows(dir / "train.csv");
  EXPECT_EQ(rows.front(), (std::vector<std::string>{"f0", "f1", "f2", "f3", "y0", "y1", "y2", "domain"}));
  EXPECT_EQ(rows.size(), 51u);
}

TEST(Io, WeightsRoundTrip) {
  const auto dir = scratch("io_weights");
  ShiftWeights w{{0.1, 1.0 / 3.0, 2.5e-7, 123456.789}, WeightSource::kliep};
  write_text(dir / "w.csv", weights_to_csv(w));
  EXPECT_EQ(read_weights(dir / "w.csv").values, w.values);
  write_text(dir / "bad.csv", "index,weight\n0,abc\n");
  EXPECT_THROW(read_weights(dir / "bad.csv"), IoError);
  EXPECT_THROW(read_text(dir / "absent.csv"), IoError);
}

TEST(Io, ModelJsonRoundTrip) {
  ScnConfig cfg;
  cfg.g_hidden = {6, 4};
  cfg.d_hidden = {3};
  cfg.c_hidden = {5};
  cfg.seed = 9;
  Model m = build_model(cfg, 3, 2, true);
  Model back = model_from_json(json::parse(model_to_json(m).dump()));
  Rng rng(1);
  Matrix x(7, 3);
  for (double& v : x.values()) v = rng.normal();
  EXPECT_EQ(back.logits(x), m.logits(x));
  EXPECT_EQ(back.shift_weights(x).values, m.shift_weights(x).values);
}

TEST(Summary, MeanAndStandardError) {
  const auto m = mean_se(std::vector<double>{1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.se, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(mean_se(std::vector<double>{7.0}).se, 0.0);
  const auto with_nan = mean_se(std::vector<double>{1.0, std::nan(""), 3.0});
  EXPECT_EQ(with_nan.n, 2u);
  EXPECT_DOUBLE_EQ(with_nan.mean, 2.0);
}

TEST(RunExperiment, SingleRunLayoutAndDeterminism) {
  const auto dir = scratch("run_single");
  const auto cfg = parse_experiment_config(small_config(dir));
  const auto a = run_experiment(cfg);
  ASSERT_EQ(a.exit_code(), 0);
  ASSERT_EQ(a.runs.size(), 1u);
  ASSERT_EQ(a.summary.size(), 1u);
  const fs::path run = dir / "tiny" / "vanilla" / "1";
  for (const char* f : {"report.json", "curves.csv", "weights.csv", "model.json"}) EXPECT_TRUE(fs::exists(run / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "tiny" / "summary.csv"));
  EXPECT_FALSE(fs::exists(dir / "tiny" / "failures.json"));
  const json first = read_json(run / "report.json");
  run_experiment(cfg);
  const json second = read_json(run / "report.json");
  EXPECT_EQ(first["test"].dump(), second["test"].dump());
  EXPECT_EQ(first["discrepancy"].dump(), second["discrepancy"].dump());
}

TEST(RunExperiment, ArtifactsReparseAndSummaryRecomputes) {
  const auto dir = scratch("run_multi");
  auto j = small_config(dir);
  j["methods"] = {"vanilla", "scn", "kliep", "oracle"};
  j["seeds"] = {3, 4};
  const auto cfg = parse_experiment_config(j);
  const auto out = run_experiment(cfg);
  ASSERT_EQ(out.exit_code(), 0);
  const auto summary = read_csv_rows(out.dir / "summary.csv");
  ASSERT_EQ(summary.size(), 5u);
  for (std::size_t row = 1; row < summary.size(); ++row) {
    const std::string method = summary[row][0];
    std::vector<double> auc, disc;
    for (std::uint64_t seed : {3u, 4u}) {
      const fs::path run = run_dir(out.dir, method, seed);
      const json rep = read_json(run / "report.json");
      auc.push_back(rep["test"]["macro_auc"].get<double>());
      disc.push_back(rep["discrepancy"].get<double>());
      // the other artifacts parse with the tool's own readers
      const auto w = read_weights(run / "weights.csv");
      EXPECT_EQ(w.size(), 500u);
      EXPECT_NO_THROW(model_from_json(read_json(run / "model.json")));
      const auto curves = read_csv_rows(run / "curves.csv");
      EXPECT_EQ(curves.front().size(), 5u);
      EXPECT_EQ(curves.size(), 1 + rep["epochs_run"].get<std::size_t>());
    }
    const auto m = mean_se(auc), d = mean_se(disc);
    EXPECT_NEAR(parse_double(summary[row][2], "auc_mean"), m.mean, 1e-12);
    EXPECT_NEAR(parse_double(summary[row][3], "auc_se"), m.se, 1e-12);
    EXPECT_NEAR(parse_double(summary[row][8], "discrepancy_mean"), d.mean, 1e-12);
  }
  const json sj = read_json(out.dir / "summary.json");
  EXPECT_NE(sj["note"].get<std::string>().find("not claimed"), std::string::npos);
}

TEST(RunExperiment, ParallelRunsMatchSerial) {
  const auto dir = scratch("run_threads");
  auto j = small_config(dir / "serial");
  j["methods"] = {"vanilla", "dfw"};
  j["seeds"] = {1, 2};
  RunOptions opt;
  opt.write_files = false;
  const auto serial = run_experiment(parse_experiment_config(j), opt);
  opt.threads = 3;
  const auto parallel = run_experiment(parse_experiment_config(j), opt);
  ASSERT_EQ(serial.runs.size(), parallel.runs.size());
  for (std::size_t i = 0; i < serial.runs.size(); ++i) {
    EXPECT_EQ(serial.runs[i].method, parallel.runs[i].method);
    EXPECT_EQ(serial.runs[i].test.macro_auc, parallel.runs[i].test.macro_auc);
    EXPECT_EQ(serial.runs[i].weights.values, parallel.runs[i].weights.values);
  }
}

TEST(RunExperiment, FailureManifestAndPartialResults) {
  const auto dir = scratch("run_failure");
  auto j = small_config(dir);
  j["dataset"]["params"]["mean_p"] = std::vector<double>(11, 0.0);
  j["dataset"]["params"]["mean_q"] = std::vector<double>(11, 0.5);
  j["methods"] = {"vanilla", "kde"};
  const auto out = run_experiment(parse_experiment_config(j));
  EXPECT_EQ(out.exit_code(), 1);
  ASSERT_EQ(out.failures.size(), 1u);
  EXPECT_EQ(out.failures[0].method, "kde");
  EXPECT_TRUE(fs::exists(out.dir / "vanilla" / "1" / "report.json"));
  const json manifest = read_json(out.dir / "failures.json");
  ASSERT_EQ(manifest.size(), 1u);
  EXPECT_NE(manifest[0]["error"].get<std::string>().find("curse of dimensionality"), std::string::npos);
  j["methods"] = {"vanilla"};
  EXPECT_EQ(run_experiment(parse_experiment_config(j)).exit_code(), 0);
  EXPECT_FALSE(fs::exists(out.dir / "failures.json"));
}

TEST(Grid, UniformWeightsGiveEqualGrids) {
  SpatialParams p;
  p.grid_size = 8;
  p.n_obs = 400;
  p.n_test = 10;
  p.n_val = 10;
  p.hotspots = {{2.0, 2.0}};
  p.n_species = 2;
  p.habitat_fields = 2;
  const auto data = gen_spatial_bias(p, 5);
  const auto g = emit_weight_grid(data.train, ShiftWeights::uniform(400));
  EXPECT_EQ(g.raw, g.weighted);
  double total = 0.0;
  for (double v : g.raw.values()) total += v;
  EXPECT_EQ(total, 400.0);
  const auto oracle = emit_weight_grid(data.train, true_shift_weights(*data.oracle, data.train.features));
  EXPECT_LT(coefficient_of_variation(oracle.weighted), coefficient_of_variation(oracle.raw));
  EXPECT_THROW(emit_weight_grid(data.train, ShiftWeights::uniform(3)), DimensionError);
  const auto gauss = gen_gaussian_shift(GaussianShiftParams{}, 1);
  EXPECT_THROW(emit_weight_grid(gauss.train, ShiftWeights::uniform(gauss.train.size())), std::invalid_argument);
}

TEST(Grid, EmptyCellsWrittenAsZeros) {
  const auto dir = scratch("grid_files");
  WeightGrid g;
  g.size = 3;
  g.raw = Matrix(3, 3);
  g.raw(1, 1) = 5.0;
  g.weighted = g.raw;
  write_weight_grid(dir, g);
  for (const char* f : {"grid_raw.csv", "grid_weighted.csv", "grid_raw_log2.csv", "grid_weighted_log2.csv"}) {
    const Matrix back = read_grid_csv(dir / f);
    ASSERT_EQ(back.shape(), (Shape{3, 3})) << f;
    EXPECT_EQ(back(0, 0), 0.0);
  }
  EXPECT_EQ(read_grid_csv(dir / "grid_raw.csv"), g.raw);
  EXPECT_EQ(read_grid_csv(dir / "grid_raw_log2.csv")(1, 1), 3.0);
}

TEST(Grid, Log2Bins) {
  const Matrix m = Matrix::row_vector({0.0, 0.5, 1.0, 3.0, 4.0, 255.0, 256.0, 1e5});
  EXPECT_EQ(log2_bins(m), Matrix::row_vector({0.0, 1.0, 1.0, 2.0, 3.0, 8.0, 9.0, 9.0}));
}

TEST(Diagnose, Examples) {
  Rng rng(6);
  Matrix f(20, 3);
  for (double& v : f.values()) v = rng.normal();
  const auto same = diagnose(ShiftWeights::uniform(20), f, f);
  EXPECT_NEAR(same.discrepancy, 0.0, 1e-15);
  EXPECT_EQ(same.weights.ess, 20.0);
  EXPECT_EQ(same.weights.median, 1.0);
  GaussianShiftParams p;
  p.n_p = p.n_q = 20000;
  const auto data = gen_gaussian_shift(p, 7);
  const auto d = diagnose(true_shift_weights(*data.oracle, data.train.features), data.train.features, data.test.features);
  EXPECT_LE(10.0 * d.discrepancy, d.discrepancy_uniform);
  EXPECT_THROW(diagnose(ShiftWeights::uniform(19), f, f), DimensionError);
}

TEST(Binary, GenerateTrainEvaluateDiagnoseGrid) {
  const auto dir = scratch("binary");
  auto j = small_config(dir / "runs");
  j["name"] = "spatial";
  j["dataset"] = {{"generator", "spatial_bias"},
                  {"params", {{"grid_size", 8}, {"n_obs", 300}, {"n_test", 100}, {"n_val", 60}, {"hotspots", {{2, 2}}},
                              {"n_species", 3}, {"habitat_fields", 2}}}};
  std::ofstream(dir / "cfg.json") << j.dump(2);
  const std::string cfg = (dir / "cfg.json").string();

  auto gen = run_cli("generate --config " + cfg + " --seed 3 --out " + (dir / "data").string());
  ASSERT_EQ(gen.status, 0) << gen.output;
  EXPECT_NE(gen.output.find("train 300"), std::string::npos) << gen.output;
  for (const char* f : {"train.csv", "test.csv", "validation.csv", "train.csv.meta.json"}) EXPECT_TRUE(fs::exists(dir / "data" / f));

  auto train = run_cli("train --config " + cfg + " --seed 3 --method scn");
  ASSERT_EQ(train.status, 0) << train.output;
  const fs::path run = dir / "runs" / "spatial" / "scn" / "3";
  ASSERT_TRUE(fs::exists(run / "model.json"));
  // six significant digits on the console
  const std::regex number(R"(auc ([0-9.eE+-]+))");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(train.output, m, number)) << train.output;
  std::string digits = m[1].str();
  digits.erase(std::remove_if(digits.begin(), digits.end(), [](char c) { return !std::isdigit(c); }), digits.end());
  digits.erase(0, digits.find_first_not_of('0'));
  EXPECT_LE(digits.size(), 6u) << m[1];

  auto eval = run_cli("evaluate --model " + (run / "model.json").string() + " --data " + (dir / "data" / "test.csv").string());
  ASSERT_EQ(eval.status, 0) << eval.output;
  EXPECT_NE(eval.output.find("auc"), std::string::npos);

  auto diag = run_cli("diagnose --weights " + (run / "weights.csv").string() + " --train " +
                      (dir / "data" / "train.csv").string() + " --test " + (dir / "data" / "test.csv").string() +
                      " --model " + (run / "model.json").string());
  ASSERT_EQ(diag.status, 0) << diag.output;
  const json rep = read_json(run / "report.json");
  EXPECT_NE(diag.output.find("discrepancy          " + format_short(rep["discrepancy"].get<double>())), std::string::npos)
      << diag.output;

  auto grid = run_cli("grid --data " + (dir / "data" / "train.csv").string() + " --weights " +
                      (run / "weights.csv").string() + " --out " + (dir / "grid").string());
  ASSERT_EQ(grid.status, 0) << grid.output;
  EXPECT_EQ(read_grid_csv(dir / "grid" / "grid_raw.csv").shape(), (Shape{8, 8}));
}

TEST(Binary, ErrorsGiveNonzeroExit) {
  const auto dir = scratch("binary_errors");
  std::ofstream(dir / "bad.json") << R"({"name": "x", "dataset": {"generator": "gaussian_shift"}, "methods": ["vanilla"], "typo": 1})";
  const auto bad = run_cli("run --config " + (dir / "bad.json").string());
  EXPECT_EQ(bad.status, 2);
  EXPECT_NE(bad.output.find("unknown key 'typo'"), std::string::npos) << bad.output;
  EXPECT_NE(run_cli("").status, 0);
  EXPECT_NE(run_cli("frobnicate").status, 0);
  EXPECT_NE(run_cli("evaluate --model /nonexistent --data /nonexistent").status, 0);
}
