#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "xunc/expl_uncertainty.hpp"

namespace xunc {
namespace {

using testing::random_tensor;

Model<double> dropout_mlp() {
  return Model<double>({4}, {layers::dense<double>(10), layers::relu<double>(),
                             layers::dropout<double>(0.3), layers::dense<double>(3),
                             layers::softmax<double>()});
}

std::vector<Saliency<double>> wrap(const std::vector<std::vector<double>>& rows) {
  std::vector<Saliency<double>> out;
  for (const auto& r : rows) out.push_back({Tensor<double>({r.size()}, r), 0});
  return out;
}

TEST(Distribution, ZeroRateGivesIdenticalSamples) {
  UncertaintyConfig cfg;
  cfg.dropout_rate = 0.0f;
  const auto um = build(dropout_mlp(), cfg, 3);
  Rng rng = make_rng(1);
  const auto x = random_tensor<double>({4}, rng);
  ExplanationConfig ec;
  const auto dist = explanation_distribution(um, x, ec, 5, 11);
  ASSERT_EQ(dist.samples.size(), 5u);
  for (const auto& s : dist.samples) {
    EXPECT_EQ(s.values, dist.samples.front().values);
    EXPECT_EQ(s.target_index, dist.samples.front().target_index);
  }
  const auto st = stats(dist);
  for (auto v : st.std.data()) EXPECT_EQ(v, 0.0);
  for (auto v : st.cv.data()) EXPECT_EQ(v, 0.0);
}

TEST(Distribution, SingleMemberEnsembleIg) {
  UncertaintyConfig cfg;
  cfg.method = UncertaintyMethod::ensemble;
  cfg.ensemble_size = 1;
  const auto um = build(testing::random_mlp<double>(4, 6, 6, 2, 0), cfg, 2);
  ExplanationConfig ec;
  ec.method = ExplanationMethod::ig;
  const auto dist = explanation_distribution(um, Tensor<double>::vector({1, 2, 3, 4}), ec, 1, 0);
  ASSERT_EQ(dist.samples.size(), 1u);
  EXPECT_EQ(dist.method, ExplanationMethod::ig);
  EXPECT_EQ(dist.samples[0].values.shape(), Shape{4});
}

// Member k computes relu(w_k . x) into two logits; the gradient of logit t
// is w_k[t] where the pre-activation is positive and 0 otherwise.
TEST(Distribution, EnsembleMembersMatchHandGradients) {
  const std::vector<std::vector<double>> W0{{1, -2, 0.5, 0.2, 0.1, -1},
                                            {-1, 3, 2, 4, -0.5, 0.25},
                                            {0.5, 0.5, 0.5, -3, 1, 1}};
  auto W = [&](std::size_t k, std::size_t t, std::size_t j) { return W0[k][3 * t + j]; };
  UncertaintyModel<double> um;
  um.config.method = UncertaintyMethod::ensemble;
  um.config.ensemble_size = 3;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<Layer<double>> ls;
    ls.push_back(layers::dense(Tensor<double>({2, 3}, W0[k]), Tensor<double>({2})));
    ls.push_back(layers::relu<double>());
    ls.push_back(layers::dense(Tensor<double>::matrix({{1, 0}, {0, 1}}), Tensor<double>({2})));
    ls.push_back(layers::softmax<double>());
    um.members.emplace_back(Shape{3}, std::move(ls));
    um.member_seeds.push_back(k);
  }
  const auto x = Tensor<double>::vector({1.0, 0.5, 2.0});
  for (std::size_t t : {0u, 1u}) {
    ExplanationConfig ec;
    ec.selector = TargetSelector::ground_truth(t);
    const auto dist = explanation_distribution(um, x, ec, 3, 0);
    ASSERT_EQ(dist.samples.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
      double pre = 0;
      for (int j = 0; j < 3; ++j) pre += W(k, t, j) * x[j];
      for (int j = 0; j < 3; ++j) {
        const double expected = pre > 0 ? W(k, t, j) : 0.0;
        // The signal reaching the relu is a one-hot row, so the guided gate
        // equals the standard one.
        EXPECT_DOUBLE_EQ(dist.samples[k].values[j], expected) << "member " << k;
      }
      EXPECT_EQ(dist.samples[k].target_index, t);
    }
  }
}

TEST(Distribution, PredictedTargetFollowsMeanPrediction) {
  UncertaintyConfig cfg;
  cfg.dropout_rate = 0.5f;
  const auto um = build(dropout_mlp(), cfg, 7);
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor<double>({4}, rng, -3, 3);
    const auto dist = explanation_distribution(um, x, ExplanationConfig{}, 8, trial);
    const auto mean = aggregate(predict_samples(um, x, 8, trial)).mean;
    EXPECT_LE(max_abs_diff(mean, dist.mean_prediction), 1e-12);
    for (const auto& s : dist.samples) EXPECT_EQ(s.target_index, argmax<double>(mean.values()));
  }
}

TEST(Distribution, SampleIExplainsRealizationI) {
  UncertaintyConfig cfg;
  cfg.dropout_rate = 0.5f;
  const auto um = build(dropout_mlp(), cfg, 7);
  const auto x = Tensor<double>::vector({0.3, -1, 2, 0.7});
  ExplanationConfig ec;
  ec.selector = TargetSelector::ground_truth(2);
  const auto dist = explanation_distribution(um, x, ec, 6, 42);
  const auto reals = draw_realizations(um, 6, 42);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto fr = forward_with_noise(um.members[0], x, reals[i].noise);
    EXPECT_EQ(dist.samples[i].values, explain_gbp(um.members[0], x, fr.tape, 2).values);
  }
  const auto again = explanation_distribution(um, x, ec, 6, 42);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(dist.samples[i].values, again.samples[i].values);
}

TEST(Distribution, LimeOnTabularInput) {
  UncertaintyConfig cfg;
  const auto um = build(dropout_mlp(), cfg, 1);
  ExplanationConfig ec;
  ec.method = ExplanationMethod::lime;
  ec.lime.num_perturbations = 200;
  const auto dist = explanation_distribution(um, Tensor<double>::vector({1, 0, -1, 2}), ec, 3, 0);
  ASSERT_EQ(dist.samples.size(), 3u);
  for (const auto& s : dist.samples) EXPECT_TRUE(s.values.all_finite());
}

TEST(Distribution, LimeRejectsImages) {
  UncertaintyConfig cfg;
  const auto um = build(testing::random_cnn<double>(1, 6, 2, 0), cfg, 1);
  ExplanationConfig ec;
  ec.method = ExplanationMethod::lime;
  try {
    explanation_distribution(um, Tensor<double>({1, 6, 6}), ec, 2, 0);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("incompatible"), std::string::npos);
  }
}

TEST(Stats, HandComputed) {
  const auto st = stats(wrap({{2, 4}, {4, 8}}));
  EXPECT_NEAR(st.mean[0], 3, 1e-12);
  EXPECT_NEAR(st.mean[1], 6, 1e-12);
  EXPECT_NEAR(st.std[0], 1, 1e-12);
  EXPECT_NEAR(st.std[1], 2, 1e-12);
  EXPECT_NEAR(st.cv[0], 1.0 / 3, 1e-8);
  EXPECT_NEAR(st.cv[1], 1.0 / 3, 1e-8);
}

TEST(Stats, IdenticalAndSingleSample) {
  for (const auto& st : {stats(wrap({{1, -2, 3}, {1, -2, 3}, {1, -2, 3}})),
                         stats(wrap({{5, 0, -7}}))}) {
    for (auto v : st.std.data()) EXPECT_EQ(v, 0.0);
    for (auto v : st.cv.data()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_THROW(stats(std::vector<Saliency<double>>{}), ArgumentError);
  EXPECT_THROW(stats(wrap({{1, 2}, {1, 2, 3}})), DimensionError);
}

std::vector<Saliency<double>> random_samples(Rng& rng, std::size_t T, std::size_t d) {
  std::vector<Saliency<double>> out;
  for (std::size_t t = 0; t < T; ++t) out.push_back({random_tensor<double>({d}, rng, -2, 2), 0});
  return out;
}

TEST(Stats, NonnegativeAndShaped) {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto st = stats(random_samples(rng, 1 + trial % 7, 9));
    EXPECT_EQ(st.mean.shape(), Shape{9});
    for (std::size_t k = 0; k < 9; ++k) {
      EXPECT_GE(st.std[k], 0.0);
      EXPECT_GE(st.cv[k], 0.0);
    }
  }
}

TEST(Stats, CvScaleInvariance) {
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    auto samples = random_samples(rng, 6, 12);
    // Keep the mean away from zero so epsilon stays negligible.
    for (auto& s : samples) {
      for (auto& v : s.values.data()) v += 3.0;
    }
    const auto base = stats(samples);
    for (double c : {0.1, 7.5, 1000.0}) {
      auto scaled = samples;
      for (auto& s : scaled) s.values *= c;
      const auto st = stats(scaled);
      EXPECT_LE(max_abs_diff(st.cv, base.cv), 1e-6) << c;
    }
  }
}

TEST(Stats, StreamingOracle) {
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto samples = random_samples(rng, 2 + trial, 7);
    const auto st = stats(samples);
    for (std::size_t k = 0; k < 7; ++k) {
      double mean = 0, m2 = 0;
      std::size_t n = 0;
      for (const auto& s : samples) {
        ++n;
        const double delta = s.values[k] - mean;
        mean += delta / n;
        m2 += delta * (s.values[k] - mean);
      }
      const double sd = std::sqrt(m2 / n);
      EXPECT_NEAR(st.mean[k], mean, 1e-6);
      EXPECT_NEAR(st.std[k], sd, 1e-6);
      EXPECT_NEAR(st.cv[k], sd / (std::abs(mean) + 1e-8), 1e-6 * std::max(1.0, st.cv[k]));
    }
  }
}

double mean_abs(const Tensor<double>& t) {
  double s = 0;
  for (auto v : t.data()) s += std::abs(v);
  return s / t.size();
}

// Negating one sample never lowers the average spread when the samples
// largely agree in sign.
TEST(Stats, NegationIncreasesSpread) {
  Rng rng = make_rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto samples = random_samples(rng, 5, 10);
    for (auto& s : samples) {
      for (auto& v : s.values.data()) v = std::abs(v) + 0.5;
    }
    const double before = mean_abs(stats(samples).std);
    samples[trial % 5].values *= -1.0;
    EXPECT_GE(mean_abs(stats(samples).std), before);
  }
}

}  // namespace
}  // namespace xunc
