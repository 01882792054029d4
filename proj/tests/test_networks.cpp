#include <gtest/gtest.h>

#include "scn/adam.hpp"
#include "scn/networks.hpp"
#include "scn/shift.hpp"
#include "support.hpp"

using namespace scn;
using scn::testing::random_matrix;

TEST(BuildMlp, ShapeBookkeeping) {
  Rng rng(1);
  const Network net = build_mlp(MlpSpec::mlp(4, {8}, 2, 1.0, Head::linear), rng);
  ASSERT_EQ(net.weights().size(), 2u);
  EXPECT_EQ(net.weights()[0].value.shape(), (Shape{4, 8}));
  EXPECT_EQ(net.weights()[1].value.shape(), (Shape{8, 2}));
  EXPECT_EQ(net.biases()[0].value.shape(), (Shape{1, 8}));
  EXPECT_EQ(net.biases()[1].value.shape(), (Shape{1, 2}));
  EXPECT_EQ(net.parameter_count(), 4u * 8 + 8 + 8 * 2 + 2);
}

TEST(BuildMlp, SameSeedSameParameters) {
  const MlpSpec spec = MlpSpec::mlp(5, {16, 8}, 3, 0.8, Head::linear);
  Rng a(9), b(9), c(10);
  const Network na = build_mlp(spec, a), nb = build_mlp(spec, b), nc = build_mlp(spec, c);
  EXPECT_TRUE(na.same_parameters(nb));
  EXPECT_FALSE(na.same_parameters(nc));
}

TEST(BuildMlp, HeUniformBound) {
  EXPECT_NEAR(he_uniform_bound(512), std::sqrt(6.0 / 512.0), 1e-15);
  EXPECT_NEAR(he_uniform_bound(512), 0.1083, 1e-4);
  Rng rng(2);
  const Network net = build_mlp(MlpSpec::mlp(512, {}, 64, 1.0, Head::linear), rng);
  for (double v : net.weights()[0].value.values()) EXPECT_LE(std::abs(v), he_uniform_bound(512));
  for (double v : net.biases()[0].value.values()) EXPECT_EQ(v, 0.0);
}

TEST(BuildMlp, InvalidSpecsRejected) {
  MlpSpec s = MlpSpec::mlp(3, {4}, 1, 0.8, Head::linear);
  s.widths[1] = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = MlpSpec::mlp(3, {4}, 1, 0.8, Head::linear);
  s.keep_prob[0] = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = MlpSpec::mlp(3, {4}, 1, 0.8, Head::linear);
  s.activations.pop_back();
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_THROW(Network(MlpSpec{}), std::invalid_argument);
}

TEST(ExtractFeatures, IdentitySpecReturnsInput) {
  Rng rng(1);
  Network g = build_mlp(MlpSpec::extractor(3, {}, 0.8), rng);
  const Matrix x = random_matrix(4, 3, rng);
  Graph graph;
  EXPECT_EQ(extract_features(g, graph, graph.constant(x), &rng).value(), x);
}

TEST(ExtractFeatures, DuplicateRowsGiveIdenticalFeatures) {
  Rng rng(3);
  Network g = build_mlp(MlpSpec::extractor(3, {8, 5}, 0.8), rng);
  g.set_mode(Mode::eval);
  Matrix x(2, 3);
  for (std::size_t j = 0; j < 3; ++j) x(0, j) = x(1, j) = rng.uniform(-1, 1);
  Graph graph;
  const Matrix f = extract_features(g, graph, graph.constant(x), nullptr).value();
  for (std::size_t j = 0; j < f.cols(); ++j) EXPECT_EQ(f(0, j), f(1, j));
}

TEST(ExtractFeatures, ReluOutputNonnegative) {
  Rng rng(4);
  Network g = build_mlp(MlpSpec::extractor(6, {10, 7}, 0.8), rng);
  const Matrix x = random_matrix(50, 6, rng, -5, 5);
  Graph graph;
  for (double v : extract_features(g, graph, graph.constant(x), &rng).value().values()) EXPECT_GE(v, 0.0);
}

TEST(ExtractFeatures, WidthMismatchRejected) {
  Rng rng(1);
  Network g = build_mlp(MlpSpec::extractor(3, {4}, 1.0), rng);
  Graph graph;
  EXPECT_THROW(extract_features(g, graph, graph.constant(Matrix(2, 4)), nullptr), DimensionError);
}

TEST(ExtractFeatures, SharedAcrossDomains) {
  Rng rng(5);
  Network g = build_mlp(MlpSpec::extractor(3, {4}, 1.0), rng);
  Graph graph;
  const std::size_t before = graph.size();
  extract_features(g, graph, graph.constant(random_matrix(2, 3, rng)), nullptr);
  const std::size_t after_p = graph.size();
  extract_features(g, graph, graph.constant(random_matrix(2, 3, rng)), nullptr);
  // the second pass binds no new parameter leaves
  std::size_t params = 0;
  for (std::size_t id = before; id < graph.size(); ++id) params += std::string(graph.op_name(id)) == "parameter";
  EXPECT_EQ(params, 2u);
  EXPECT_EQ(graph.parameter(g.weights()[0]).id(), graph.parameter(g.weights()[0]).id());
  EXPECT_GT(after_p, before);
}

TEST(Discriminate, ZeroFinalLayerGivesHalf) {
  Rng rng(6);
  Network d = build_mlp(MlpSpec::mlp(4, {8}, 1, 1.0, Head::sigmoid), rng);
  d.weights().back().value.fill(0.0);
  Graph graph;
  for (double v : discriminate(d, graph, graph.constant(random_matrix(5, 4, rng)), nullptr).value().values()) {
    EXPECT_EQ(v, 0.5);
  }
}

TEST(Discriminate, OutputsWithinClampBounds) {
  Rng rng(7);
  Network d = build_mlp(MlpSpec::mlp(2, {4}, 1, 1.0, Head::sigmoid), rng);
  for (auto& w : d.weights()) w.value.fill(100.0);
  Graph graph;
  Matrix x(2, 2);
  x(0, 0) = x(0, 1) = 10.0;
  x(1, 0) = x(1, 1) = -10.0;
  d.biases().back().value.fill(-50.0);
  for (double v : discriminate(d, graph, graph.constant(x), nullptr).value().values()) {
    EXPECT_GE(v, kProbabilityFloor);
    EXPECT_LE(v, 1.0 - kProbabilityFloor);
  }
}

TEST(Discriminate, RequiresSigmoidHead) {
  Rng rng(1);
  Network d = build_mlp(MlpSpec::mlp(2, {}, 1, 1.0, Head::linear), rng);
  Graph graph;
  EXPECT_THROW(discriminate(d, graph, graph.constant(Matrix(1, 2)), nullptr), std::invalid_argument);
}

TEST(Discriminate, LearnsSeparableClusters) {
  Rng rng(8);
  Network d = build_mlp(MlpSpec::mlp(2, {8}, 1, 1.0, Head::sigmoid), rng);
  Matrix xp(32, 2), xq(32, 2);
  for (std::size_t i = 0; i < 32; ++i) {
    xp(i, 0) = 2.0 + 0.3 * rng.normal();
    xp(i, 1) = 2.0 + 0.3 * rng.normal();
    xq(i, 0) = -2.0 + 0.3 * rng.normal();
    xq(i, 1) = -2.0 + 0.3 * rng.normal();
  }
  Adam opt;
  double ld = -1.0;
  for (int step = 0; step < 1500; ++step) {
    Graph g;
    const Tensor l = discriminative_loss(discriminate(d, g, g.constant(xp), nullptr),
                                         discriminate(d, g, g.constant(xq), nullptr));
    ld = l.item();
    g.backward(scale(l, -1.0));
    auto ps = d.parameters();
    opt.step(ps, 0.01);
  }
  // mean log-likelihood of the two-sample classification, 2 L_D
  EXPECT_GE(2.0 * ld, -0.05);
}

TEST(Classify, ZeroWeightsGiveHalfProbability) {
  Rng rng(9);
  Network c = build_mlp(MlpSpec::mlp(3, {5}, 4, 1.0, Head::linear), rng);
  for (auto& w : c.weights()) w.value.fill(0.0);
  Graph graph;
  for (double v : classify(c, graph, graph.constant(random_matrix(3, 3, rng)), nullptr).value().values()) {
    EXPECT_EQ(v, 0.0);
    EXPECT_EQ(1.0 / (1.0 + std::exp(-v)), 0.5);
  }
}

TEST(Classify, SingleSampleBatch) {
  Rng rng(10);
  Network c = build_mlp(MlpSpec::mlp(3, {5}, 4, 0.8, Head::linear), rng);
  Graph graph;
  EXPECT_EQ(classify(c, graph, graph.constant(random_matrix(1, 3, rng)), &rng).shape(), (Shape{1, 4}));
}

TEST(Classify, OverfitsSmallToySet) {
  Rng rng(11);
  Network c = build_mlp(MlpSpec::mlp(4, {32}, 3, 1.0, Head::linear), rng);
  const Matrix x = random_matrix(20, 4, rng);
  Matrix y(20, 3);
  for (double& v : y.values()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  Adam opt;
  for (int step = 0; step < 500; ++step) {
    Graph g;
    g.backward(mean(bce_with_logits(classify(c, g, g.constant(x), nullptr), y)));
    auto ps = c.parameters();
    opt.step(ps, 0.01);
  }
  const Matrix logits = c.predict(x);
  for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_EQ(logits[i] > 0.0, y[i] > 0.5) << "entry " << i;
}

TEST(Network, EvalModeIsDeterministic) {
  Rng rng(12);
  Network g = build_mlp(MlpSpec::extractor(3, {16, 16}, 0.5), rng);
  const Matrix x = random_matrix(8, 3, rng);
  EXPECT_EQ(g.predict(x), g.predict(x));
  Graph graph;
  g.set_mode(Mode::train);
  EXPECT_THROW(g.forward(graph, graph.constant(x), nullptr), std::invalid_argument);
}

TEST(Network, DropoutExpectationMatchesEval) {
  // one linear unit with dropout on its input layer
  MlpSpec spec;
  spec.widths = {1, 1, 1};
  spec.activations = {Activation::none, Activation::none};
  spec.keep_prob = {0.8, 1.0};
  Network net(spec);
  net.weights().push_back({"W0", Matrix(1, 1, 1.0), {}});
  net.weights().push_back({"W1", Matrix(1, 1, 1.0), {}});
  net.biases().push_back({"b0", Matrix(1, 1, 0.0), {}});
  net.biases().push_back({"b1", Matrix(1, 1, 0.0), {}});
  const Matrix x(1, 1, 1.7);
  const double eval_out = net.predict(x)[0];
  Rng rng(13);
  double s = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    Graph g;
    s += net.forward(g, g.constant(x), &rng).item();
  }
  EXPECT_NEAR(s / n / eval_out, 1.0, 0.01);
}
