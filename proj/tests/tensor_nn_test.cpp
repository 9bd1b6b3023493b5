#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "test_support.hpp"
#include "xunc/autodiff.hpp"
#include "xunc/checkpoint.hpp"
#include "xunc/model.hpp"
#include "xunc/train.hpp"

namespace xunc {
namespace {

using testing::fd_input_grad;
using testing::fd_param_grads;
using testing::max_rel_err;
using testing::random_tensor;

TEST(Forward, DenseMatrixArithmetic) {
  Model<double> m({2}, {layers::dense(Tensor<double>::matrix({{1, 2}, {3, 4}}),
                                      Tensor<double>::vector({0, 0}))});
  const auto out = forward(m, Tensor<double>::vector({1, 1})).output;
  EXPECT_EQ(out, Tensor<double>::vector({3, 7}));
}

TEST(Forward, Relu) {
  Model<double> m({2}, {layers::relu<double>()});
  EXPECT_EQ(forward(m, Tensor<double>::vector({-1, 2})).output,
            Tensor<double>::vector({0, 2}));
}

TEST(Forward, ZeroRateDropoutMatchesDeterministic) {
  Model<double> m({4}, {layers::dense<double>(3), layers::dropout<double>(0.0),
                        layers::relu<double>(), layers::dropconnect<double>(2, 0.0)});
  m.initialize(3);
  Rng rng = make_rng(1);
  const auto x = random_tensor<double>({4}, rng);
  const auto det = forward(m, x).output;
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(forward(m, x, Mode::stochastic, &rng).output, det);
  }
}

TEST(Forward, ShapeMismatchNamesLayer) {
  Model<double> m({3}, {layers::dense<double>(2)});
  try {
    forward(m, Tensor<double>::vector({1, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
  // An inconsistent stack is rejected at construction, naming the layer.
  try {
    Model<double> bad({2, 4, 4}, {layers::relu<double>(), layers::dense<double>(3)});
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(Forward, RejectsRateOutsideUnitInterval) {
  EXPECT_THROW((Model<double>({3}, {layers::dropout<double>(1.0)})), ConfigError);
  EXPECT_THROW((Model<double>({3}, {layers::dropconnect<double>(2, -0.1)})), ConfigError);
}

TEST(Forward, DeterministicModeIsBitIdentical) {
  auto m = testing::random_cnn<float>(2, 6, 3, 11);
  Rng rng = make_rng(2);
  const auto x = random_tensor<float>({2, 6, 6}, rng);
  EXPECT_EQ(forward(m, x).output, forward(m, x).output);
}

TEST(Forward, ReplayReproducesStochasticPass) {
  auto m = testing::random_cnn<float>(2, 6, 3, 12);
  Rng rng = make_rng(3);
  const auto x = random_tensor<float>({2, 6, 6}, rng);
  for (int i = 0; i < 10; ++i) {
    auto fr = forward(m, x, Mode::stochastic, &rng);
    EXPECT_EQ(replay(m, x, fr.tape).output, fr.output);
    EXPECT_EQ(fr.tape.inputs.size(), m.num_layers());
  }
}

TEST(Forward, SoftmaxIsDistribution) {
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto logits = random_tensor<double>({7}, rng, -30, 30);
    Model<double> m({7}, {layers::softmax<double>()});
    const auto p = forward(m, logits).output;
    double sum = 0;
    for (auto v : p.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Forward, MaxpoolTiesRouteToFirstElement) {
  Model<double> m({1, 2, 2}, {layers::maxpool2d<double>(2)});
  const Tensor<double> x({1, 2, 2}, {5, 5, 5, 5});
  auto fr = forward(m, x);
  auto br = backward(m, fr.tape, Tensor<double>({1, 1, 1}, {1.0}));
  EXPECT_EQ(br.input_grad, Tensor<double>({1, 2, 2}, {1, 0, 0, 0}));
}

TEST(Backward, GuidedReluGates) {
  Model<double> m({2}, {layers::relu<double>()});
  auto fr = forward(m, Tensor<double>::vector({2, -3}));
  const auto seed = Tensor<double>::vector({1, -1});
  EXPECT_EQ(backward(m, fr.tape, seed, BackwardRule::guided).input_grad,
            Tensor<double>::vector({1, 0}));
  EXPECT_EQ(backward(m, fr.tape, seed, BackwardRule::standard).input_grad,
            Tensor<double>::vector({1, 0}));

  // Positive forward inputs: only the guided rule blocks the negative signal.
  auto fr2 = forward(m, Tensor<double>::vector({2, 3}));
  EXPECT_EQ(backward(m, fr2.tape, seed, BackwardRule::standard).input_grad,
            Tensor<double>::vector({1, -1}));
  EXPECT_EQ(backward(m, fr2.tape, seed, BackwardRule::guided).input_grad,
            Tensor<double>::vector({1, 0}));
}

TEST(Backward, MlpMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto m = testing::random_mlp<double>(5, 8, 6, 3, s);
    Rng rng = make_rng(s, 5);
    const auto x = random_tensor<double>({5}, rng);
    const auto seed = random_tensor<double>({3}, rng);
    auto fr = forward(m, x);
    auto br = backward(m, fr.tape, seed);
    EXPECT_LE(max_rel_err(br.input_grad, fd_input_grad(m, x, fr.tape.noise, seed)), 1e-4);
    const auto fd = fd_param_grads(m, x, fr.tape.noise, seed);
    std::size_t k = 0;
    for (const auto& g : br.param_grads) {
      for (const auto* t : {&g.weight, &g.bias, &g.rho}) {
        if (!t->size()) continue;
        EXPECT_LE(max_rel_err(*t, fd[k]), 1e-4) << "param " << k;
        ++k;
      }
    }
    EXPECT_EQ(k, fd.size());
  }
}

// Every layer kind, including replayed dropout/dropconnect/flipout noise.
TEST(Backward, AllLayerKindsMatchFiniteDifferences64) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto m = testing::random_cnn<double>(2, 6, 3, 100 + s);
    Rng rng = make_rng(s, 6);
    const auto x = random_tensor<double>({2, 6, 6}, rng);
    const auto seed = random_tensor<double>({3}, rng);
    auto fr = forward(m, x, Mode::stochastic, &rng);
    auto br = backward(m, fr.tape, seed);
    EXPECT_LE(max_rel_err(br.input_grad, fd_input_grad(m, x, fr.tape.noise, seed)), 1e-4);
    const auto fd = fd_param_grads(m, x, fr.tape.noise, seed);
    std::size_t k = 0;
    for (const auto& g : br.param_grads) {
      for (const auto* t : {&g.weight, &g.bias, &g.rho}) {
        if (!t->size()) continue;
        EXPECT_LE(max_rel_err(*t, fd[k]), 1e-4) << "seed " << s << " param " << k;
        ++k;
      }
    }
  }
}

TEST(Backward, AllLayerKindsMatchFiniteDifferences32) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto m32 = testing::random_cnn<float>(2, 6, 3, 200 + s);
    const auto m64 = m32.cast<double>();
    Rng rng = make_rng(s, 7);
    const auto x = random_tensor<float>({2, 6, 6}, rng);
    const auto seed = random_tensor<float>({3}, rng);
    auto fr = forward(m32, x, Mode::stochastic, &rng);
    auto br = backward(m32, fr.tape, seed);
    Noise<double> noise64(fr.tape.noise.size());
    for (std::size_t i = 0; i < noise64.size(); ++i) {
      const auto& n = fr.tape.noise[i];
      noise64[i].mask.assign(n.mask.begin(), n.mask.end());
      noise64[i].eps.assign(n.eps.begin(), n.eps.end());
      noise64[i].sign_in.assign(n.sign_in.begin(), n.sign_in.end());
      noise64[i].sign_out.assign(n.sign_out.begin(), n.sign_out.end());
    }
    const auto fd = fd_input_grad(m64, x.cast<double>(), noise64, seed.cast<double>());
    EXPECT_LE(max_rel_err(br.input_grad.cast<double>(), fd, 1e-4), 1e-3);
  }
}

TEST(Backward, GuidedEqualsStandardWhenAllPositive) {
  // Non-negative weights and inputs keep every relu input and every
  // backward signal positive.
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto m = testing::random_mlp<double>(4, 6, 5, 2, s);
    for (auto* p : m.parameters()) {
      for (auto& v : p->data()) v = std::abs(v) + 0.01;
    }
    Rng rng = make_rng(s, 8);
    const auto x = random_tensor<double>({4}, rng, 0.1, 1.0);
    auto fr = forward(m, x);
    const auto seed = Tensor<double>::vector({1.0, 0.5});
    EXPECT_LE(max_abs_diff(backward(m, fr.tape, seed, BackwardRule::guided).input_grad,
                           backward(m, fr.tape, seed).input_grad),
              1e-12);
  }
}

TEST(Backward, RejectsForeignTape) {
  auto a = testing::random_mlp<double>(4, 6, 5, 2, 1);
  Model<double> b({4}, {layers::dense<double>(2)});
  auto fr = forward(a, Tensor<double>({4}, 0.5));
  EXPECT_THROW(backward(b, fr.tape, Tensor<double>({2})), ConsistencyError);
  EXPECT_THROW(backward(a, fr.tape, Tensor<double>({3})), DimensionError);
}

std::vector<Tensor<float>> xor_inputs() {
  return {Tensor<float>::vector({0, 0}), Tensor<float>::vector({0, 1}),
          Tensor<float>::vector({1, 0}), Tensor<float>::vector({1, 1})};
}

TEST(Train, LearnsXor) {
  Model<float> m({2}, {layers::dense<float>(16), layers::relu<float>(),
                       layers::dense<float>(2)});
  m.initialize(7);
  const auto xs = xor_inputs();
  const std::vector<double> ys{0, 1, 1, 0};
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.01;
  cfg.seed = 1;
  const auto log = train<float>(m, xs, ys, cfg);
  ASSERT_EQ(log.epochs.size(), 200u);
  EXPECT_LE(log.epochs.back().loss, log.epochs.front().loss);
  EXPECT_DOUBLE_EQ(evaluate_metric<float>(m, xs, ys), 1.0);
}

TEST(Train, ZeroEpochsLeavesWeights) {
  auto m = testing::random_mlp<float>(2, 4, 4, 2, 3);
  const auto before = m;
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto xs = xor_inputs();
  const std::vector<double> ys{0, 1, 1, 0};
  const auto log = train<float>(m, xs, ys, cfg);
  EXPECT_TRUE(log.epochs.empty());
  EXPECT_EQ(m, before);
}

TEST(Train, LinearRegressionFindsClosedForm) {
  Model<float> m({1}, {layers::dense<float>(1)}, Task::regression);
  m.initialize(5);
  std::vector<Tensor<float>> xs;
  std::vector<double> ys;
  for (int i = 0; i < 64; ++i) {
    const double x = -1.0 + 2.0 * i / 63.0;
    xs.push_back(Tensor<float>::vector({static_cast<float>(x)}));
    ys.push_back(2 * x + 1);
  }
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.seed = 2;
  const auto log = train<float>(m, xs, ys, cfg);
  EXPECT_NEAR(m.layer(0).weight[0], 2.0, 1e-2);
  EXPECT_NEAR(m.layer(0).bias[0], 1.0, 1e-2);
  EXPECT_LE(log.epochs.back().loss, log.epochs.front().loss);
}

TEST(Train, DeterministicGivenSeed) {
  const auto xs = xor_inputs();
  const std::vector<double> ys{0, 1, 1, 0};
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 2;
  cfg.seed = 9;
  cfg.optimizer = OptimizerKind::rmsprop;
  Model<float> a({2}, {layers::dense<float>(8), layers::relu<float>(),
                       layers::dropout<float>(0.5), layers::dense<float>(2)});
  a.initialize(1);
  auto b = a;
  const auto la = train<float>(a, xs, ys, cfg);
  const auto lb = train<float>(b, xs, ys, cfg);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < la.epochs.size(); ++i) {
    EXPECT_EQ(la.epochs[i].loss, lb.epochs[i].loss);
  }
}

TEST(Train, NonFiniteLossReportsEpochAndBatch) {
  Model<float> m({1}, {layers::dense<float>(1)}, Task::regression);
  m.initialize(1);
  std::vector<Tensor<float>> xs{Tensor<float>::vector({1.0f}),
                                Tensor<float>::vector({NAN})};
  std::vector<double> ys{1.0, 2.0};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  try {
    train<float>(m, xs, ys, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
}

TEST(Train, EmptyDatasetRejected) {
  Model<float> m({1}, {layers::dense<float>(1)}, Task::regression);
  EXPECT_THROW(train<float>(m, {}, {}, TrainConfig{}), ArgumentError);
}

TEST(Checkpoint, ByteExactRoundTrip) {
  auto m = testing::random_cnn<float>(2, 6, 3, 21);
  const auto bytes = encode_model(m);
  const auto back = decode_model<float>(bytes);
  EXPECT_EQ(back, m);
  EXPECT_EQ(encode_model(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "xunc_ckpt_test.xmdl";
  save_model(path, m);
  EXPECT_EQ(load_model<float>(path), m);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruption) {
  auto m = testing::random_mlp<float>(3, 4, 4, 2, 1);
  auto bytes = encode_model(m);
  auto bad_magic = bytes;
  bad_magic[0] = 'Y';
  EXPECT_THROW(decode_model<float>(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_model<float>(truncated), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_model<float>(bad_version), FormatError);
}

}  // namespace
}  // namespace xunc
