#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "scn/autodiff.hpp"
#include "scn/rng.hpp"

namespace scn {

enum class Activation { relu, none };
enum class Head { linear, sigmoid };
enum class Mode { train, eval };

/// Fully connected stack. `widths` includes the input width, so
/// {4, 8, 2} has two layers with weights 4x8 and 8x2. A single width is the
/// identity map.
struct MlpSpec {
  std::vector<std::size_t> widths;
  std::vector<Activation> activations;  // one per layer
  std::vector<double> keep_prob;        // one per layer, applied after the activation
  Head head = Head::linear;

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("mlp spec: no widths");
    for (std::size_t w : widths) {
      if (w == 0) throw std::invalid_argument("mlp spec: widths must be positive");
    }
    if (activations.size() != layers() || keep_prob.size() != layers()) {
      throw std::invalid_argument("mlp spec: need one activation and one keep probability per layer");
    }
    for (double k : keep_prob) {
      if (!(k > 0.0 && k <= 1.0)) throw std::invalid_argument("mlp spec: keep probability must be in (0, 1]");
    }
  }

  /// ReLU hidden layers with dropout, last layer without activation or dropout.
  static MlpSpec mlp(std::size_t input, const std::vector<std::size_t>& hidden, std::size_t output,
                     double keep, Head head) {
    MlpSpec s;
    s.widths.push_back(input);
    for (std::size_t h : hidden) s.widths.push_back(h);
    s.widths.push_back(output);
    for (std::size_t i = 0; i + 1 < s.layers(); ++i) {
      s.activations.push_back(Activation::relu);
      s.keep_prob.push_back(keep);
    }
    s.activations.push_back(Activation::none);
    s.keep_prob.push_back(1.0);
    s.head = head;
    return s;
  }

  /// Every layer ReLU with dropout; used for feature extractors.
  static MlpSpec extractor(std::size_t input, const std::vector<std::size_t>& hidden, double keep) {
    MlpSpec s;
    s.widths.push_back(input);
    for (std::size_t h : hidden) {
      s.widths.push_back(h);
      s.activations.push_back(Activation::relu);
      s.keep_prob.push_back(keep);
    }
    return s;
  }
};

class Network {
 public:
  Network() = default;
  explicit Network(MlpSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const MlpSpec& spec() const { return spec_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  std::vector<Parameter>& weights() { return weights_; }
  const std::vector<Parameter>& weights() const { return weights_; }
  std::vector<Parameter>& biases() { return biases_; }
  const std::vector<Parameter>& biases() const { return biases_; }

  /// Weights then biases, layer by layer.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.push_back(&weights_[i]);
      out.push_back(&biases_[i]);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) n += weights_[i].value.size() + biases_[i].value.size();
    return n;
  }

  /// Bitwise comparison of parameter values.
  bool same_parameters(const Network& other) const {
    if (weights_.size() != other.weights_.size()) return false;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (weights_[i].value != other.weights_[i].value || biases_[i].value != other.biases_[i].value) return false;
    }
    return true;
  }

  /// Forward pass on `g`. `dropout_rng` is only consumed in train mode.
  /// Parameters are bound as trainable unless `trainable` is false.
  Tensor forward(Graph& g, const Tensor& x, Rng* dropout_rng, bool trainable = true) {
    if (x.cols() != spec_.input_width()) {
      throw DimensionError("network input width " + std::to_string(x.cols()) + " does not match spec width " +
                           std::to_string(spec_.input_width()));
    }
    Tensor h = x;
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
      Tensor w = g.parameter(weights_[l], trainable);
      Tensor b = g.parameter(biases_[l], trainable);
      h = add_bias(matmul(h, w), b);
      if (spec_.activations[l] == Activation::relu) h = relu(h);
      const double keep = spec_.keep_prob[l];
      if (mode_ == Mode::train && keep < 1.0) {
        if (dropout_rng == nullptr) throw std::invalid_argument("train-mode dropout needs an rng");
        h = dropout(h, keep, *dropout_rng);
      }
    }
    if (spec_.head == Head::sigmoid) h = clamp_probability(sigmoid(h));
    return h;
  }

  /// Eval-mode forward outside any caller graph.
  Matrix predict(const Matrix& x) {
    const Mode saved = mode_;
    mode_ = Mode::eval;
    Graph g;
    Matrix out = forward(g, g.constant(x), nullptr, false).value();
    mode_ = saved;
    return out;
  }

 private:
  friend Network build_mlp(const MlpSpec&, Rng&);

  MlpSpec spec_;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
  Mode mode_ = Mode::train;
};

/// Bound of the He-uniform initializer for a given fan-in.
inline double he_uniform_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

/// Weights He-uniform, biases zero.
inline Network build_mlp(const MlpSpec& spec, Rng& rng) {
  Network net(spec);
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const double bound = he_uniform_bound(in);
    Parameter w{"W" + std::to_string(l), Matrix(in, out), {}};
    for (double& v : w.value.values()) v = rng.uniform(-bound, bound);
    Parameter b{"b" + std::to_string(l), Matrix(1, out), {}};
    net.weights_.push_back(std::move(w));
    net.biases_.push_back(std::move(b));
  }
  return net;
}

/// Shared feature extractor G applied to a batch.
inline Tensor extract_features(Network& g_net, Graph& g, const Tensor& x, Rng* dropout_rng, bool trainable = true) {
  return g_net.forward(g, x, dropout_rng, trainable);
}

/// D(G(x)): probability that each row came from the training distribution P.
inline Tensor discriminate(Network& d_net, Graph& g, const Tensor& feats, Rng* dropout_rng, bool trainable = true) {
  if (d_net.spec().head != Head::sigmoid || d_net.spec().output_width() != 1) {
    throw std::invalid_argument("discriminator needs a single sigmoid output");
  }
  return d_net.forward(g, feats, dropout_rng, trainable);
}

/// Raw per-label logits; the sigmoid lives in the loss and the metrics.
inline Tensor classify(Network& c_net, Graph& g, const Tensor& feats, Rng* dropout_rng, bool trainable = true) {
  if (c_net.spec().head != Head::linear) throw std::invalid_argument("classifier head must be linear");
  return c_net.forward(g, feats, dropout_rng, trainable);
}

}  // namespace scn
