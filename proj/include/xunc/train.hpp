#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xunc/autodiff.hpp"
#include "xunc/error.hpp"
#include "xunc/model.hpp"
#include "xunc/random.hpp"
#include "xunc/tensor.hpp"

namespace xunc {

enum class OptimizerKind { sgd, adam, rmsprop };
enum class LossKind { cross_entropy, mse };

inline OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

inline LossKind default_loss(Task task) {
  return task == Task::classification ? LossKind::cross_entropy : LossKind::mse;
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  std::optional<LossKind> loss;  // defaults from the model task
  double learning_rate = 0.001;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Weight of the KL term for flipout models; defaults to 1/(number of
  // batches per epoch).
  std::optional<double> kl_weight;
};

struct EpochRecord {
  std::size_t epoch = 0;
  // Mean per-batch objective (the ELBO for flipout models) divided by the
  // batch size.
  double loss = 0.0;
  // Accuracy for classification, mean absolute error for regression.
  double metric = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
};

// KL(N(mu, softplus(rho)^2) || N(0, 1)) summed over every flipout weight.
template <typename T>
double kl_divergence(const Model<T>& model) {
  double kl = 0.0;
  for (const auto& l : model.layers()) {
    if (l.kind != LayerKind::flipout_dense) continue;
    for (std::size_t k = 0; k < l.weight.size(); ++k) {
      const double mu = l.weight[k];
      const double sigma = softplus(static_cast<double>(l.rho[k]));
      kl += 0.5 * (sigma * sigma + mu * mu - 1.0) - std::log(sigma);
    }
  }
  return kl;
}

// Adds scale * dKL/dparam to the flipout weight and rho gradients.
template <typename T>
void add_kl_gradients(const Model<T>& model, std::vector<LayerGrads<T>>& grads,
                      double scale) {
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.layer(i);
    if (l.kind != LayerKind::flipout_dense) continue;
    for (std::size_t k = 0; k < l.weight.size(); ++k) {
      const double rho = l.rho[k];
      const double sigma = softplus(rho);
      grads[i].weight[k] += static_cast<T>(scale * l.weight[k]);
      grads[i].rho[k] += static_cast<T>(scale * (sigma - 1.0 / sigma) * sigmoid(rho));
    }
  }
}

/// Loss of one example and the gradient with respect to the model output.
///
/// Cross-entropy treats the output as logits unless the model ends with a
/// softmax layer, in which case it is taken as probabilities. MSE is the
/// sum of squared errors over the output.
template <typename T>
double example_loss(const Model<T>& model, LossKind loss, const Tensor<T>& output,
                    double target, Tensor<T>* grad) {
  if (loss == LossKind::cross_entropy) {
    const auto cls = static_cast<std::size_t>(target);
    if (target < 0 || cls >= output.size() || static_cast<double>(cls) != target) {
      throw ArgumentError("class label " + std::to_string(target) + " out of range");
    }
    const bool probs = model.logit_layers() != model.num_layers();
    if (probs) {
      const double p = std::max<double>(output[cls], 1e-12);
      if (grad) {
        *grad = Tensor<T>(output.shape());
        (*grad)[cls] = static_cast<T>(-1.0 / p);
      }
      return -std::log(p);
    }
    const Tensor<T> p = softmax(output);
    if (grad) {
      *grad = p;
      (*grad)[cls] -= T{1};
    }
    return -std::log(std::max<double>(p[cls], 1e-300));
  }
  double sse = 0.0;
  if (grad) *grad = Tensor<T>(output.shape());
  for (std::size_t k = 0; k < output.size(); ++k) {
    const double d = static_cast<double>(output[k]) - target;
    sse += d * d;
    if (grad) (*grad)[k] = static_cast<T>(2.0 * d);
  }
  return sse;
}

/// First-order optimizer over a flat list of parameter tensors.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(const std::vector<Tensor<T>*>& params,
            const std::vector<const Tensor<T>*>& grads) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    ++t_;
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-7, rho = 0.9;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i]->data();
      const auto& g = grads[i]->data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        double update = 0.0;
        switch (kind_) {
          case OptimizerKind::sgd:
            update = lr_ * gk;
            break;
          case OptimizerKind::adam:
            m[k] = beta1 * m[k] + (1 - beta1) * gk;
            v[k] = beta2 * v[k] + (1 - beta2) * gk * gk;
            update = lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
            break;
          case OptimizerKind::rmsprop:
            v[k] = rho * v[k] + (1 - rho) * gk * gk;
            update = lr_ * gk / (std::sqrt(v[k]) + eps);
            break;
        }
        p[k] = static_cast<T>(p[k] - update);
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Minibatch training with stochastic layers active.
///
/// Flipout models minimize the ELBO: per batch, the summed negative log
/// likelihood plus kl_weight times the closed-form KL; the optimizer sees
/// that objective divided by the batch size. Deterministic given the seed.
template <typename T>
TrainingLog train(Model<T>& model, std::span<const Tensor<T>> inputs,
                  std::span<const double> targets, const TrainConfig& cfg) {
  TrainingLog log;
  if (inputs.empty()) throw ArgumentError("training dataset is empty");
  if (inputs.size() != targets.size()) {
    throw ArgumentError("inputs and targets differ in length");
  }
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (cfg.epochs == 0) return log;

  const LossKind loss = cfg.loss.value_or(default_loss(model.task()));
  const std::size_t n = inputs.size();
  const std::size_t num_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const bool flipout = model.has_kind(LayerKind::flipout_dense);
  const double kl_weight = cfg.kl_weight.value_or(1.0 / static_cast<double>(num_batches));

  Optimizer<T> opt(cfg.optimizer, cfg.learning_rate);
  Rng rng = make_rng(cfg.seed, 0x7e41);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, metric_sum = 0.0;
    for (std::size_t b = 0; b < num_batches; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      const double bs = static_cast<double>(hi - lo);

      std::vector<LayerGrads<T>> acc;
      Noise<T> noise = draw_noise(model, rng);
      double batch_nll = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t idx = order[k];
        redraw_per_example(model, noise, rng);
        auto fr = forward_with_noise(model, inputs[idx], noise);
        Tensor<T> seed;
        batch_nll += example_loss(model, loss, fr.output, targets[idx], &seed);
        if (model.task() == Task::classification) {
          metric_sum += argmax<T>(fr.output.values()) ==
                                static_cast<std::size_t>(targets[idx])
                            ? 1.0
                            : 0.0;
        } else {
          metric_sum += std::abs(static_cast<double>(fr.output[0]) - targets[idx]);
        }
        auto br = backward(model, fr.tape, seed);
        if (acc.empty()) {
          acc = std::move(br.param_grads);
        } else {
          for (std::size_t i = 0; i < acc.size(); ++i) {
            if (acc[i].weight.size()) acc[i].weight += br.param_grads[i].weight;
            if (acc[i].bias.size()) acc[i].bias += br.param_grads[i].bias;
            if (acc[i].rho.size()) acc[i].rho += br.param_grads[i].rho;
          }
        }
      }
      double objective = batch_nll;
      if (flipout) {
        objective += kl_weight * kl_divergence(model);
        add_kl_gradients(model, acc, kl_weight);
      }
      if (!std::isfinite(objective)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(b));
      }
      loss_sum += objective / bs;

      std::vector<const Tensor<T>*> grads;
      const T inv = static_cast<T>(1.0 / bs);
      for (auto& g : acc) {
        if (g.weight.size()) grads.push_back(&(g.weight *= inv));
        if (g.bias.size()) grads.push_back(&(g.bias *= inv));
        if (g.rho.size()) grads.push_back(&(g.rho *= inv));
      }
      opt.step(model.parameters(), grads);
    }
    log.epochs.push_back({epoch, loss_sum / static_cast<double>(num_batches),
                          metric_sum / static_cast<double>(n)});
  }
  return log;
}

/// Accuracy (classification) or mean absolute error (regression) of the
/// deterministic model.
template <typename T>
double evaluate_metric(const Model<T>& model, std::span<const Tensor<T>> inputs,
                       std::span<const double> targets) {
  if (inputs.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto out = forward(model, inputs[i]).output;
    if (model.task() == Task::classification) {
      acc += argmax<T>(out.values()) == static_cast<std::size_t>(targets[i]) ? 1.0 : 0.0;
    } else {
      acc += std::abs(static_cast<double>(out[0]) - targets[i]);
    }
  }
  return acc / static_cast<double>(inputs.size());
}

}  // namespace xunc
