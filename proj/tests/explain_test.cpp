#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "test_support.hpp"
#include "xunc/explain.hpp"

namespace xunc {
namespace {

using testing::random_tensor;

TEST(SelectTarget, PredictedAndGroundTruth) {
  const auto out = Tensor<double>::vector({0.1, 0.7, 0.2});
  EXPECT_EQ(select_target(out, TargetSelector::predicted()), 1u);
  EXPECT_EQ(select_target(out, TargetSelector::ground_truth(2)), 2u);
  EXPECT_EQ(select_target(out, TargetSelector::ground_truth(1)),
            select_target(out, TargetSelector::predicted()));
  EXPECT_THROW(select_target(out, TargetSelector::ground_truth(3)), ArgumentError);
  TargetSelector missing;
  missing.mode = TargetMode::ground_truth;
  EXPECT_THROW(select_target(out, missing), ArgumentError);
}

TEST(SelectTarget, TiesPickLowestIndex) {
  EXPECT_EQ(select_target(Tensor<double>::vector({0.4, 0.4, 0.2}), TargetSelector{}), 0u);
}

// Property: argmax is invariant under strictly increasing transforms.
TEST(SelectTarget, MonotoneInvariance) {
  Rng rng = make_rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto v = random_tensor<double>({6}, rng, -5, 5);
    const auto base = select_target(v, TargetSelector{});
    Tensor<double> a = v, b = v, c = v;
    for (auto& x : a.data()) x = std::exp(x);
    for (auto& x : b.data()) x = 3.0 * x - 7.0;
    for (auto& x : c.data()) x = x * x * x;
    EXPECT_EQ(select_target(a, TargetSelector{}), base);
    EXPECT_EQ(select_target(b, TargetSelector{}), base);
    EXPECT_EQ(select_target(c, TargetSelector{}), base);
    EXPECT_EQ(select_target(softmax(v), TargetSelector{}), base);
  }
}

TEST(Gbp, ReluOnlyNetwork) {
  Model<double> m({2}, {layers::relu<double>()});
  const auto x = Tensor<double>::vector({2, -3});
  auto fr = forward(m, x);
  // Target is the sum of both outputs.
  const auto g = backward_from(m, fr.tape, 1, Tensor<double>::vector({1, 1}),
                               BackwardRule::guided, false);
  EXPECT_EQ(g.input_grad, Tensor<double>::vector({1, 0}));
}

TEST(Gbp, LinearThenRelu) {
  Model<double> m({2}, {layers::dense(Tensor<double>::matrix({{1, -1}}),
                                      Tensor<double>::vector({0})),
                        layers::relu<double>()});
  const auto x = Tensor<double>::vector({2, 1});
  auto fr = forward(m, x);
  const auto s = explain_gbp(m, x, fr.tape, 0);
  EXPECT_EQ(s.values, Tensor<double>::vector({1, -1}));
  EXPECT_EQ(s.target_index, 0u);
}

TEST(Gbp, EqualsGradientWhenAllPositive) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = testing::random_mlp<double>(5, 7, 6, 3, seed);
    for (auto* p : m.parameters()) {
      for (auto& v : p->data()) v = std::abs(v) + 0.01;
    }
    Rng rng = make_rng(seed, 1);
    const auto x = random_tensor<double>({5}, rng, 0.05, 1.0);
    auto fr = forward(m, x);
    for (std::size_t t = 0; t < 3; ++t) {
      const auto gbp = explain_gbp(m, x, fr.tape, t).values;
      const auto grad = logit_gradient(m, fr.tape, t, BackwardRule::standard);
      EXPECT_LE(max_abs_diff(gbp, grad), 1e-9);
    }
  }
}

TEST(Gbp, EqualsGradientWithoutRelu) {
  Model<double> m({3, 5, 5}, {layers::conv2d<double>(2, 3), layers::maxpool2d<double>(3),
                              layers::flatten<double>(), layers::dense<double>(4),
                              layers::softmax<double>()});
  m.initialize(3);
  Rng rng = make_rng(2);
  const auto x = random_tensor<double>({3, 5, 5}, rng);
  auto fr = forward(m, x);
  const auto gbp = explain_gbp(m, x, fr.tape, 2).values;
  // Gradient of the pre-softmax logit 2, by finite differences on a model
  // truncated before the softmax.
  Model<double> logits({3, 5, 5}, {m.layer(0), m.layer(1), m.layer(2), m.layer(3)});
  Tensor<double> seed({4});
  seed[2] = 1;
  const auto oracle = testing::fd_input_grad(logits, x, Noise<double>(4), seed);
  EXPECT_LE(max_abs_diff(gbp, logit_gradient(m, fr.tape, 2, BackwardRule::standard)), 1e-12);
  EXPECT_LE(testing::max_rel_err(gbp, oracle), 1e-6);
}

TEST(Gbp, OutputHasInputShape) {
  auto m = testing::random_cnn<float>(2, 6, 3, 9);
  Rng rng = make_rng(3);
  const auto x = random_tensor<float>({2, 6, 6}, rng);
  auto fr = forward(m, x, Mode::stochastic, &rng);
  const auto s = explain_gbp(m, x, fr.tape, 1);
  EXPECT_EQ(s.values.shape(), x.shape());
  EXPECT_TRUE(s.values.all_finite());
}

TEST(Ig, LinearTargetIsExact) {
  Model<double> m({2}, {layers::dense(Tensor<double>::matrix({{1, 2}}),
                                      Tensor<double>::vector({0.5}))},
                  Task::regression);
  const auto x = Tensor<double>::vector({3, 4});
  for (std::size_t steps : {1u, 5u, 32u}) {
    IGConfig cfg;
    cfg.steps = steps;
    const auto s = explain_ig(m, x, cfg, 0);
    EXPECT_NEAR(s.values[0], 3.0, 1e-12);
    EXPECT_NEAR(s.values[1], 8.0, 1e-12);
  }
}

TEST(Ig, ZeroAtBaseline) {
  auto m = testing::random_mlp<double>(4, 8, 8, 2, 5);
  IGConfig cfg;
  cfg.baseline = std::vector<double>{0.3, -0.2, 0.1, 0.9};
  const Tensor<double> x({4}, {0.3, -0.2, 0.1, 0.9});
  const auto s = explain_ig(m, x, cfg, 1);
  for (auto v : s.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ig, Errors) {
  auto m = testing::random_mlp<double>(4, 8, 8, 2, 5);
  IGConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(explain_ig(m, Tensor<double>({4}), cfg, 0), ArgumentError);
  cfg.steps = 4;
  cfg.baseline = std::vector<double>{0, 0};
  EXPECT_THROW(explain_ig(m, Tensor<double>({4}), cfg, 0), DimensionError);
}

double completeness_error(const Model<double>& m, const Tensor<double>& x, std::size_t steps,
                          const Noise<double>& noise) {
  IGConfig cfg;
  cfg.steps = steps;
  const auto ig = explain_ig(m, x, cfg, 0, noise);
  double sum = 0;
  for (auto v : ig.values.data()) sum += v;
  const double fx = forward_with_noise(m, x, noise).output[0];
  const double f0 = forward_with_noise(m, Tensor<double>(x.shape()), noise).output[0];
  return std::abs(sum - (fx - f0)) / std::abs(fx - f0);
}

// One fixed MLP, random inputs. Inputs whose output difference nearly
// cancels make the relative error meaningless, so only |F(x) - F(0)| >= 0.1
// is kept.
TEST(Ig, CompletenessConverges) {
  const auto m = testing::random_mlp<double>(6, 10, 8, 2, 50);
  const std::vector<std::size_t> steps{16, 32, 64, 128, 256, 512};
  std::vector<double> totals(steps.size(), 0.0);
  std::size_t accepted = 0;
  for (std::uint64_t s = 0; accepted < 30; ++s) {
    ASSERT_LT(s, 200u);
    Rng rng = make_rng(s, 4);
    const auto x = random_tensor<double>({6}, rng);
    const double diff = forward(m, x).output[0] - forward(m, Tensor<double>({6})).output[0];
    if (std::abs(diff) < 0.1) continue;
    ++accepted;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      totals[k] += completeness_error(m, x, steps[k], Noise<double>(m.num_layers()));
    }
    EXPECT_LE(completeness_error(m, x, 512, Noise<double>(m.num_layers())), 1e-2);
  }
  for (std::size_t k = 1; k < steps.size(); ++k) EXPECT_LE(totals[k], totals[k - 1]) << steps[k];
}

TEST(Ig, UsesOneNoiseDrawForAllSteps) {
  Model<double> m({5}, {layers::dense<double>(12), layers::relu<double>(),
                        layers::dropout<double>(0.5), layers::dense<double>(2)});
  m.initialize(8);
  Rng rng = make_rng(9);
  const auto x = random_tensor<double>({5}, rng);
  const auto noise = draw_noise(m, rng);
  // Completeness holds against the function realized by that noise.
  EXPECT_LE(completeness_error(m, x, 512, noise), 1e-2);
}

// Weighted least squares via Eigen, independent of the library's solver.
Eigen::VectorXd wls_oracle(const LimeNeighborhood& nb, std::span<const double> center,
                           std::span<const double> y, std::span<const double> w,
                           double lambda) {
  const auto n = static_cast<Eigen::Index>(nb.samples.size());
  const auto d = static_cast<Eigen::Index>(center.size());
  Eigen::MatrixXd X(n, d + 1);
  Eigen::VectorXd Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double sw = std::sqrt(w[i]);
    for (Eigen::Index j = 0; j < d; ++j) X(i, j) = sw * (nb.samples[i][j] - center[j]);
    X(i, d) = sw;
    Y(i) = sw * y[i];
  }
  // Ridge on the slopes only, as extra rows sqrt(lambda) * e_j.
  Eigen::MatrixXd Xa = Eigen::MatrixXd::Zero(n + d, d + 1);
  Eigen::VectorXd Ya = Eigen::VectorXd::Zero(n + d);
  Xa.topRows(n) = X;
  Ya.head(n) = Y;
  for (Eigen::Index j = 0; j < d; ++j) Xa(n + j, j) = std::sqrt(lambda);
  return Xa.colPivHouseholderQr().solve(Ya);
}

TEST(Lime, RecoversLinearModel) {
  LimeConfig cfg;
  cfg.num_perturbations = 1000;
  cfg.ridge_lambda = 1e-6;
  cfg.seed = 4;
  const auto x = Tensor<double>::vector({0.5, -1.0});
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& v) {
    return 3 * v[0] - 2 * v[1] + 1;
  };
  const auto s = explain_lime_tabular(f, x, cfg);
  EXPECT_NEAR(s.values[0], 3.0, 0.05 * 3.0);
  EXPECT_NEAR(s.values[1], -2.0, 0.05 * 2.0);

  const std::vector<double> center{0.5, -1.0};
  const auto nb = lime_neighborhood(center, cfg);
  std::vector<double> y;
  for (const auto& r : nb.samples) y.push_back(3 * r[0] - 2 * r[1] + 1);
  const auto w = lime_weights(nb, cfg.width_for(2));
  const auto oracle = wls_oracle(nb, center, y, w, cfg.ridge_lambda);
  EXPECT_NEAR(s.values[0], oracle(0), 1e-6);
  EXPECT_NEAR(s.values[1], oracle(1), 1e-6);
}

TEST(Lime, ConstantModelGivesZeroWeights) {
  LimeConfig cfg;
  cfg.seed = 5;
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>&) { return 4.2; };
  const auto s = explain_lime_tabular(f, Tensor<double>::vector({1, 2, 3}), cfg);
  for (auto v : s.values.data()) EXPECT_NEAR(v, 0.0, 1e-6);
}

TEST(Lime, InfiniteKernelWidthIsOrdinaryLeastSquares) {
  LimeConfig cfg;
  cfg.kernel_width = std::numeric_limits<double>::infinity();
  cfg.ridge_lambda = 0.0;
  cfg.seed = 6;
  cfg.num_perturbations = 300;
  cfg.perturbation_scale = {0.5, 2.0, 1.0};
  const auto x = Tensor<double>::vector({1, 2, 3});
  // Mildly nonlinear so weighted and unweighted fits would differ.
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& v) {
    return 2 * v[0] - v[1] + 0.5 * v[2] + 0.1 * v[0] * v[0];
  };
  const auto s = explain_lime_tabular(f, x, cfg);
  const std::vector<double> center{1, 2, 3};
  const auto nb = lime_neighborhood(center, cfg);
  std::vector<double> y;
  Tensor<double> probe({3});
  for (const auto& r : nb.samples) {
    for (int j = 0; j < 3; ++j) probe[j] = r[j];
    y.push_back(f(probe));
  }
  const std::vector<double> ones(y.size(), 1.0);
  const auto oracle = wls_oracle(nb, center, y, ones, 0.0);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(s.values[j], oracle(j), 1e-6);
}

TEST(Lime, RejectsTooFewPerturbations) {
  LimeConfig cfg;
  cfg.num_perturbations = 3;
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>&) { return 0.0; };
  EXPECT_THROW(explain_lime_tabular(f, Tensor<double>::vector({1, 2, 3}), cfg), ConfigError);
}

TEST(Lime, EightFeatureRecovery) {
  const std::vector<double> coef{0.8, -1.2, 0.05, 2.5, -0.3, 0.0, 1.1, -2.0};
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& v) {
    double s = 0.7;
    for (int j = 0; j < 8; ++j) s += coef[j] * v[j];
    return s;
  };
  LimeConfig cfg;
  cfg.seed = 7;
  Rng rng = make_rng(10);
  const auto x = random_tensor<double>({8}, rng);
  const auto s = explain_lime_tabular(f, x, cfg);
  for (int j = 0; j < 8; ++j) {
    if (std::abs(coef[j]) > 1e-3) {
      EXPECT_NEAR(s.values[j], coef[j], 0.05 * std::abs(coef[j]));
    }
  }
}

}  // namespace
}  // namespace xunc
