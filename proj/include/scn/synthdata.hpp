#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "scn/matrix.hpp"
#include "scn/metrics.hpp"
#include "scn/rng.hpp"

namespace scn {

/// A point where q > 0 but p = 0: the covariate-shift support assumption fails.
class SupportError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class Domain { train_p, test_q, validation };

inline const char* to_string(Domain d) {
  switch (d) {
    case Domain::train_p: return "P";
    case Domain::test_q: return "Q";
    case Domain::validation: return "V";
  }
  return "?";
}

inline Domain domain_from_string(const std::string& s) {
  if (s == "P") return Domain::train_p;
  if (s == "Q") return Domain::test_q;
  if (s == "V") return Domain::validation;
  throw std::invalid_argument("unknown domain tag '" + s + "'");
}

/// p(y_l = 1 | x), shared by every domain.
class LabelModel {
 public:
  virtual ~LabelModel() = default;
  virtual std::size_t labels() const = 0;
  virtual double probability(std::span<const double> x, std::size_t label) const = 0;
};

/// y_l ~ Bernoulli(sigmoid(a_l . x + b_l)).
class LogisticLabels final : public LabelModel {
 public:
  LogisticLabels(Matrix coef, std::vector<double> bias) : coef_(std::move(coef)), bias_(std::move(bias)) {
    if (coef_.rows() != bias_.size()) throw DimensionError("logistic labels: coefficient rows vs biases");
  }

  static std::shared_ptr<LogisticLabels> random(std::size_t n_labels, std::size_t dim, double scale, Rng& rng) {
    Matrix coef(n_labels, dim);
    for (double& v : coef.values()) v = rng.normal(0.0, scale);
    std::vector<double> bias(n_labels);
    for (double& b : bias) b = rng.normal(0.0, 0.5);
    return std::make_shared<LogisticLabels>(std::move(coef), std::move(bias));
  }

  std::size_t labels() const override { return bias_.size(); }
  double probability(std::span<const double> x, std::size_t label) const override {
    if (x.size() != coef_.cols()) throw DimensionError("logistic labels: feature width");
    double z = bias_[label];
    for (std::size_t j = 0; j < x.size(); ++j) z += coef_(label, j) * x[j];
    return sigmoid_value(z);
  }

 private:
  Matrix coef_;
  std::vector<double> bias_;
};

/// Draws every label of every row. The same function serves all domains,
/// which is what makes p(y|x) = q(y|x) hold by construction.
inline Matrix sample_labels(const LabelModel& model, const Matrix& features, Rng& rng) {
  Matrix y(features.rows(), model.labels());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const auto x = features.row(r);
    for (std::size_t l = 0; l < model.labels(); ++l) y(r, l) = rng.bernoulli(model.probability(x, l)) ? 1.0 : 0.0;
  }
  return y;
}

/// Closed-form log densities of the training (p) and test (q) marginals.
class DensityOracle {
 public:
  virtual ~DensityOracle() = default;
  virtual double log_p(std::span<const double> x) const = 0;
  virtual double log_q(std::span<const double> x) const = 0;
  virtual const std::shared_ptr<const LabelModel>& label_model() const = 0;
};

/// exp(log q(x) - log p(x)).
inline double true_shift_factor(const DensityOracle& oracle, std::span<const double> x) {
  const double lp = oracle.log_p(x);
  const double lq = oracle.log_q(x);
  if (!std::isfinite(lp)) {
    if (lq == -std::numeric_limits<double>::infinity()) {
      throw SupportError("point outside both supports");
    }
    throw SupportError("point has q(x) > 0 but p(x) = 0");
  }
  return std::exp(lq - lp);
}

inline ShiftWeights true_shift_weights(const DensityOracle& oracle, const Matrix& features) {
  ShiftWeights w;
  w.source = WeightSource::oracle;
  w.values.reserve(features.rows());
  for (std::size_t r = 0; r < features.rows(); ++r) w.values.push_back(true_shift_factor(oracle, features.row(r)));
  return w;
}

struct Dataset {
  Matrix features;
  std::optional<Matrix> labels;
  Domain domain = Domain::train_p;
  std::shared_ptr<const DensityOracle> oracle;
  /// Generator name, parameters and seed; written to the metadata sidecar.
  nlohmann::json generator;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  std::size_t num_labels() const { return labels ? labels->cols() : 0; }

  void validate() const {
    if (labels && labels->rows() != features.rows()) throw DimensionError("dataset: label rows vs feature rows");
  }
};

// ------------------------------------------------------------------ Gaussian shift

struct GaussianShiftParams {
  std::size_t n_p = 1000;
  std::size_t n_q = 1000;
  std::size_t n_val = 0;
  std::vector<double> mean_p{0.0};
  std::vector<double> mean_q{1.0};
  Matrix cov = Matrix::identity(1);
  std::size_t n_labels = 1;
  double label_scale = 1.5;

  std::size_t dim() const { return mean_p.size(); }
};

inline void to_json(nlohmann::json& j, const GaussianShiftParams& p) {
  j = {{"n_p", p.n_p},       {"n_q", p.n_q},           {"n_val", p.n_val},
       {"mean_p", p.mean_p}, {"mean_q", p.mean_q},     {"cov", p.cov.values()},
       {"n_labels", p.n_labels}, {"label_scale", p.label_scale}};
}

inline void from_json(const nlohmann::json& j, GaussianShiftParams& p) {
  p.n_p = j.at("n_p");
  p.n_q = j.at("n_q");
  p.n_val = j.value("n_val", std::size_t{0});
  p.mean_p = j.at("mean_p").get<std::vector<double>>();
  p.mean_q = j.at("mean_q").get<std::vector<double>>();
  const std::size_t d = p.mean_p.size();
  if (j.contains("cov")) {
    p.cov = Matrix(d, d, j.at("cov").get<std::vector<double>>());
  } else {
    p.cov = Matrix::identity(d);
  }
  p.n_labels = j.value("n_labels", std::size_t{1});
  p.label_scale = j.value("label_scale", 1.5);
}

class GaussianShiftOracle final : public DensityOracle {
 public:
  GaussianShiftOracle(std::vector<double> mean_p, std::vector<double> mean_q, const Matrix& cov,
                      std::shared_ptr<const LabelModel> labels)
      : mean_p_(std::move(mean_p)), mean_q_(std::move(mean_q)), labels_(std::move(labels)) {
    const std::size_t d = mean_p_.size();
    if (mean_q_.size() != d || cov.rows() != d || cov.cols() != d) {
      throw DimensionError("gaussian shift: mean and covariance dimensions disagree");
    }
    Eigen::MatrixXd c(d, d);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = 0; k < d; ++k) c(i, k) = cov(i, k);
    }
    if (!c.isApprox(c.transpose())) throw std::invalid_argument("gaussian shift: covariance is not symmetric");
    llt_.compute(c);
    if (llt_.info() != Eigen::Success) throw std::invalid_argument("gaussian shift: covariance is not positive definite");
    const Eigen::MatrixXd l = llt_.matrixL();
    chol_ = l;
    log_norm_ = -0.5 * double(d) * std::log(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < d; ++i) log_norm_ -= std::log(l(i, i));
  }

  double log_p(std::span<const double> x) const override { return log_density(x, mean_p_); }
  double log_q(std::span<const double> x) const override { return log_density(x, mean_q_); }
  const std::shared_ptr<const LabelModel>& label_model() const override { return labels_; }

  /// mean + L z for z ~ N(0, I).
  void sample(const std::vector<double>& mean, Rng& rng, std::span<double> out) const {
    const std::size_t d = mean.size();
    Eigen::VectorXd z(d);
    for (std::size_t i = 0; i < d; ++i) z(i) = rng.normal();
    const Eigen::VectorXd v = chol_ * z;
    for (std::size_t i = 0; i < d; ++i) out[i] = mean[i] + v(i);
  }

  const std::vector<double>& mean_p() const { return mean_p_; }
  const std::vector<double>& mean_q() const { return mean_q_; }

 private:
  double log_density(std::span<const double> x, const std::vector<double>& mu) const {
    if (x.size() != mu.size()) throw DimensionError("gaussian shift: point dimension");
    Eigen::VectorXd diff(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) diff(i) = x[i] - mu[i];
    const Eigen::VectorXd s = llt_.matrixL().solve(diff);
    return log_norm_ - 0.5 * s.squaredNorm();
  }

  std::vector<double> mean_p_, mean_q_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::MatrixXd chol_;
  double log_norm_ = 0.0;
  std::shared_ptr<const LabelModel> labels_;
};

struct GeneratedData {
  Dataset train;       // P, labeled
  Dataset test;        // Q, labeled for evaluation only
  Dataset validation;  // Q, labeled
  std::shared_ptr<const DensityOracle> oracle;
};

/// Two Gaussians sharing a covariance, with a shared logistic label rule.
/// The validation split (n_val rows) is drawn from Q.
inline GeneratedData gen_gaussian_shift(const GaussianShiftParams& params, std::uint64_t seed) {
  const std::size_t d = params.dim();
  if (d == 0) throw std::invalid_argument("gaussian shift: zero dimension");
  Rng label_rng = Rng::stream(seed, "gaussian/label-rule");
  std::shared_ptr<const LabelModel> labels =
      LogisticLabels::random(params.n_labels, d, params.label_scale, label_rng);
  auto oracle = std::make_shared<GaussianShiftOracle>(params.mean_p, params.mean_q, params.cov, labels);

  nlohmann::json gen = {{"name", "gaussian_shift"}, {"seed", seed}, {"params", params}};
  auto draw = [&](std::size_t n, const std::vector<double>& mu, Domain dom, const char* tag) {
    Rng rng = Rng::stream(seed, tag);
    Dataset ds;
    ds.features = Matrix(n, d);
    for (std::size_t r = 0; r < n; ++r) oracle->sample(mu, rng, ds.features.row(r));
    Rng yrng = Rng::stream(seed, std::string(tag) + "/labels");
    ds.labels = sample_labels(*labels, ds.features, yrng);
    ds.domain = dom;
    ds.oracle = oracle;
    ds.generator = gen;
    return ds;
  };

  GeneratedData out;
  out.train = draw(params.n_p, params.mean_p, Domain::train_p, "gaussian/P");
  out.test = draw(params.n_q, params.mean_q, Domain::test_q, "gaussian/Q");
  out.validation = draw(params.n_val, params.mean_q, Domain::validation, "gaussian/V");
  out.oracle = oracle;
  return out;
}

// ------------------------------------------------------------------ spatial bias

struct Hotspot {
  double row = 0.0;  // cell units
  double col = 0.0;
};

struct SpatialParams {
  std::size_t grid_size = 32;
  std::size_t n_obs = 20000;
  std::size_t n_test = 4000;
  std::size_t n_val = 2000;
  std::vector<Hotspot> hotspots{{8.0, 8.0}, {20.0, 24.0}, {26.0, 6.0}};
  double hotspot_sigma = 2.0;     // cells
  double hotspot_strength = 0.9;  // mixture weight on the hotspots; the rest is uniform
  std::size_t n_species = 50;
  std::size_t habitat_fields = 16;
  std::size_t field_components = 4;
};

inline void to_json(nlohmann::json& j, const SpatialParams& p) {
  nlohmann::json hs = nlohmann::json::array();
  for (const auto& h : p.hotspots) hs.push_back({h.row, h.col});
  j = {{"grid_size", p.grid_size},
       {"n_obs", p.n_obs},
       {"n_test", p.n_test},
       {"n_val", p.n_val},
       {"hotspots", hs},
       {"hotspot_sigma", p.hotspot_sigma},
       {"hotspot_strength", p.hotspot_strength},
       {"n_species", p.n_species},
       {"habitat_fields", p.habitat_fields},
       {"field_components", p.field_components}};
}

inline void from_json(const nlohmann::json& j, SpatialParams& p) {
  SpatialParams def;
  p.grid_size = j.value("grid_size", def.grid_size);
  p.n_obs = j.value("n_obs", def.n_obs);
  p.n_test = j.value("n_test", def.n_test);
  p.n_val = j.value("n_val", def.n_val);
  if (j.contains("hotspots")) {
    p.hotspots.clear();
    for (const auto& h : j.at("hotspots")) p.hotspots.push_back({h.at(0).get<double>(), h.at(1).get<double>()});
  }
  p.hotspot_sigma = j.value("hotspot_sigma", def.hotspot_sigma);
  p.hotspot_strength = j.value("hotspot_strength", def.hotspot_strength);
  p.n_species = j.value("n_species", def.n_species);
  p.habitat_fields = j.value("habitat_fields", def.habitat_fields);
  p.field_components = j.value("field_components", def.field_components);
}

/// Smooth random fields over the unit square: sums of a few plane waves.
class HabitatFields {
 public:
  HabitatFields(std::size_t fields, std::size_t components, Rng& rng) : fields_(fields), components_(components) {
    for (std::size_t k = 0; k < fields * components; ++k) {
      const double freq = rng.uniform(0.5, 2.5);
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      waves_.push_back({freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
                        rng.uniform(0.5, 1.0)});
    }
  }

  std::size_t size() const { return fields_; }

  /// Field values at (u, v) in [0,1)^2, roughly within [-1, 1].
  void evaluate(double u, double v, std::span<double> out) const {
    for (std::size_t f = 0; f < fields_; ++f) {
      double s = 0.0, norm = 0.0;
      for (std::size_t c = 0; c < components_; ++c) {
        const Wave& w = waves_[f * components_ + c];
        s += w.amp * std::sin(2.0 * std::numbers::pi * (w.fu * u + w.fv * v) + w.phase);
        norm += w.amp;
      }
      out[f] = s / std::sqrt(norm);
    }
  }

 private:
  struct Wave {
    double fu, fv, phase, amp;
  };
  std::size_t fields_, components_;
  std::vector<Wave> waves_;
};

/// Species occurrence as a logistic response to habitat: a linear trend
/// on a few fields plus a unimodal niche on others. Feature layout is
/// [u, v, habitat...]; the response reads only the habitat columns.
class HabitatResponseLabels final : public LabelModel {
 public:
  HabitatResponseLabels(std::size_t species, std::size_t fields, Rng& rng) : fields_(fields) {
    for (std::size_t s = 0; s < species; ++s) {
      Species sp;
      sp.bias = rng.normal(0.5, 0.5);
      for (std::size_t k = 0; k < std::min<std::size_t>(2, fields); ++k) {
        sp.linear.push_back({rng.uniform_index(fields), rng.normal(0.0, 1.0), 0.0});
      }
      for (std::size_t k = 0; k < std::min<std::size_t>(2, fields); ++k) {
        sp.niche.push_back({rng.uniform_index(fields), rng.uniform(2.0, 5.0), rng.uniform(-0.8, 0.8)});
      }
      species_.push_back(std::move(sp));
    }
  }

  std::size_t labels() const override { return species_.size(); }

  double probability(std::span<const double> x, std::size_t label) const override {
    if (x.size() != fields_ + 2) throw DimensionError("habitat labels: feature width");
    const Species& sp = species_[label];
    double z = sp.bias;
    for (const Term& t : sp.linear) z += t.coef * x[2 + t.field];
    for (const Term& t : sp.niche) {
      const double d = x[2 + t.field] - t.center;
      z -= t.coef * d * d;
    }
    return sigmoid_value(z);
  }

 private:
  struct Term {
    std::size_t field;
    double coef;
    double center;
  };
  struct Species {
    double bias = 0.0;
    std::vector<Term> linear, niche;
  };
  std::size_t fields_;
  std::vector<Species> species_;
};

/// Cell index (row-major) of a point whose first two features are the
/// normalized location (u = column, v = row); empty outside the unit square.
inline std::optional<std::size_t> cell_of(std::span<const double> x, std::size_t grid) {
  if (x.size() < 2) return std::nullopt;
  const double u = x[0], v = x[1];
  if (!(u >= 0.0 && u < 1.0 && v >= 0.0 && v < 1.0)) return std::nullopt;
  const auto col = std::min(grid - 1, static_cast<std::size_t>(u * double(grid)));
  const auto row = std::min(grid - 1, static_cast<std::size_t>(v * double(grid)));
  return row * grid + col;
}

/// Observations follow a mixture of a uniform floor and Gaussian hotspots
/// over grid cells; test and validation sites are uniform over cells.
class SpatialOracle final : public DensityOracle {
 public:
  SpatialOracle(std::size_t grid, std::vector<double> cell_p, std::shared_ptr<const LabelModel> labels)
      : grid_(grid), cell_p_(std::move(cell_p)), labels_(std::move(labels)) {}

  std::size_t grid_size() const { return grid_; }
  std::size_t cells() const { return cell_p_.size(); }
  /// Probability mass of cell c under P.
  double cell_probability_p(std::size_t c) const { return cell_p_.at(c); }
  double cell_probability_q(std::size_t) const { return 1.0 / double(cell_p_.size()); }
  /// q/p for a whole cell.
  double cell_shift_factor(std::size_t c) const { return cell_probability_q(c) / cell_probability_p(c); }

  // Densities over the unit square: cell mass times the number of cells.
  double log_p(std::span<const double> x) const override {
    const auto c = cell_of(x, grid_);
    if (!c) return -std::numeric_limits<double>::infinity();
    return std::log(cell_p_[*c] * double(cell_p_.size()));
  }
  double log_q(std::span<const double> x) const override {
    return cell_of(x, grid_) ? 0.0 : -std::numeric_limits<double>::infinity();
  }
  const std::shared_ptr<const LabelModel>& label_model() const override { return labels_; }

 private:
  std::size_t grid_;
  std::vector<double> cell_p_;
  std::shared_ptr<const LabelModel> labels_;
};

/// Per-cell P mass: (1 - s) / G^2 + s * mean over hotspots of a discretized,
/// normalized Gaussian bump.
inline std::vector<double> spatial_cell_masses(const SpatialParams& p) {
  const std::size_t g = p.grid_size;
  const std::size_t cells = g * g;
  std::vector<double> mass(cells, (1.0 - p.hotspot_strength) / double(cells));
  if (p.hotspot_strength == 0.0 || p.hotspots.empty()) return mass;
  for (const Hotspot& h : p.hotspots) {
    std::vector<double> bump(cells);
    double total = 0.0;
    for (std::size_t r = 0; r < g; ++r) {
      for (std::size_t c = 0; c < g; ++c) {
        const double dr = double(r) + 0.5 - h.row, dc = double(c) + 0.5 - h.col;
        const double v = std::exp(-0.5 * (dr * dr + dc * dc) / (p.hotspot_sigma * p.hotspot_sigma));
        bump[r * g + c] = v;
        total += v;
      }
    }
    for (std::size_t i = 0; i < cells; ++i) {
      mass[i] += p.hotspot_strength / double(p.hotspots.size()) * bump[i] / total;
    }
  }
  return mass;
}

inline GeneratedData gen_spatial_bias(const SpatialParams& params, std::uint64_t seed) {
  const std::size_t g = params.grid_size;
  if (g < 8) throw std::invalid_argument("spatial bias: grid_size must be at least 8");
  if (!(params.hotspot_strength >= 0.0 && params.hotspot_strength < 1.0)) {
    throw std::invalid_argument("spatial bias: hotspot_strength must be in [0, 1) so every cell keeps P mass");
  }
  if (params.hotspot_sigma <= 0.0) throw std::invalid_argument("spatial bias: hotspot_sigma must be positive");
  for (const Hotspot& h : params.hotspots) {
    if (!(h.row >= 0.0 && h.row <= double(g) && h.col >= 0.0 && h.col <= double(g))) {
      throw std::invalid_argument("spatial bias: hotspot center outside the grid");
    }
  }
  if (params.n_species == 0) throw std::invalid_argument("spatial bias: need at least one species");

  Rng field_rng = Rng::stream(seed, "spatial/fields");
  auto fields = std::make_shared<HabitatFields>(params.habitat_fields, params.field_components, field_rng);
  Rng species_rng = Rng::stream(seed, "spatial/species");
  std::shared_ptr<const LabelModel> labels =
      std::make_shared<HabitatResponseLabels>(params.n_species, params.habitat_fields, species_rng);
  std::vector<double> mass = spatial_cell_masses(params);
  auto oracle = std::make_shared<SpatialOracle>(g, mass, labels);

  std::vector<double> cdf(mass.size());
  std::partial_sum(mass.begin(), mass.end(), cdf.begin());

  nlohmann::json gen = {{"name", "spatial_bias"}, {"seed", seed}, {"params", params}};
  const std::size_t dim = 2 + params.habitat_fields;
  auto draw = [&](std::size_t n, bool biased, Domain dom, const char* tag) {
    Rng rng = Rng::stream(seed, tag);
    Dataset ds;
    ds.features = Matrix(n, dim);
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t cell;
      if (biased) {
        const double u = rng.uniform() * cdf.back();
        cell = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), mass.size() - 1);
      } else {
        cell = rng.uniform_index(mass.size());
      }
      const double u = (double(cell % g) + rng.uniform()) / double(g);
      const double v = (double(cell / g) + rng.uniform()) / double(g);
      auto row = ds.features.row(r);
      row[0] = u;
      row[1] = v;
      fields->evaluate(u, v, row.subspan(2));
    }
    Rng yrng = Rng::stream(seed, std::string(tag) + "/labels");
    ds.labels = sample_labels(*labels, ds.features, yrng);
    ds.domain = dom;
    ds.oracle = oracle;
    ds.generator = gen;
    return ds;
  };

  GeneratedData out;
  out.train = draw(params.n_obs, true, Domain::train_p, "spatial/P");
  out.test = draw(params.n_test, false, Domain::test_q, "spatial/Q");
  out.validation = draw(params.n_val, false, Domain::validation, "spatial/V");
  out.oracle = oracle;
  return out;
}

/// Regenerates a dataset family from its generator record.
inline GeneratedData regenerate(const nlohmann::json& generator) {
  const std::string name = generator.at("name");
  const std::uint64_t seed = generator.at("seed");
  if (name == "gaussian_shift") return gen_gaussian_shift(generator.at("params").get<GaussianShiftParams>(), seed);
  if (name == "spatial_bias") return gen_spatial_bias(generator.at("params").get<SpatialParams>(), seed);
  throw std::invalid_argument("unknown generator '" + name + "'");
}

}  // namespace scn
