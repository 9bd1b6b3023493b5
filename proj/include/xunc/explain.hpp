#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xunc/autodiff.hpp"
#include "xunc/error.hpp"
#include "xunc/linalg.hpp"
#include "xunc/model.hpp"
#include "xunc/random.hpp"
#include "xunc/tensor.hpp"

namespace xunc {

enum class TargetMode { predicted, ground_truth };

inline TargetMode target_mode_from_string(std::string_view s) {
  if (s == "predicted") return TargetMode::predicted;
  if (s == "ground_truth" || s == "ground-truth") return TargetMode::ground_truth;
  throw ConfigError("unknown target mode '" + std::string(s) + "'");
}

inline std::string_view to_string(TargetMode m) {
  return m == TargetMode::predicted ? "predicted" : "ground_truth";
}

/// Which output neuron an explanation differentiates: the model's
/// prediction or a given ground-truth class.
struct TargetSelector {
  TargetMode mode = TargetMode::predicted;
  std::optional<std::size_t> ground_truth_index;

  static TargetSelector predicted() { return {}; }
  static TargetSelector ground_truth(std::size_t index) {
    return {TargetMode::ground_truth, index};
  }
};

/// Argmax (lowest index on ties) in predicted mode, the stored index in
/// ground-truth mode.
template <typename T>
std::size_t select_target(const Tensor<T>& output, const TargetSelector& selector) {
  if (output.size() == 0) throw ArgumentError("empty output vector");
  if (selector.mode == TargetMode::predicted) return argmax<T>(output.values());
  if (!selector.ground_truth_index) {
    throw ArgumentError("ground-truth target mode requires a class index");
  }
  if (*selector.ground_truth_index >= output.size()) {
    throw ArgumentError("ground-truth index " + std::to_string(*selector.ground_truth_index) +
                        " out of range for " + std::to_string(output.size()) + " outputs");
  }
  return *selector.ground_truth_index;
}

template <typename T>
struct Saliency {
  Tensor<T> values;
  std::size_t target_index = 0;
};

namespace detail {

template <typename T>
Tensor<T> logit_seed(const Model<T>& model, std::size_t target) {
  const std::size_t k = model.logit_layers();
  const Shape& shape = k == 0 ? model.input_shape() : model.layer(k - 1).out_shape;
  Tensor<T> seed(shape);
  if (target >= seed.size()) {
    throw ArgumentError("target index " + std::to_string(target) + " out of range");
  }
  seed[target] = T{1};
  return seed;
}

}  // namespace detail

/// d(target logit)/d(input) of the pass recorded in `tape`, with the given
/// relu backward rule.
template <typename T>
Tensor<T> logit_gradient(const Model<T>& model, const BackwardTape<T>& tape,
                         std::size_t target, BackwardRule rule) {
  return backward_from(model, tape, model.logit_layers(), detail::logit_seed(model, target),
                       rule, false)
      .input_grad;
}

/// Guided backpropagation of the pre-softmax target logit.
template <typename T>
Saliency<T> explain_gbp(const Model<T>& model, const Tensor<T>& x,
                        const BackwardTape<T>& tape, std::size_t target) {
  if (tape.inputs.empty() ? x.shape() != model.input_shape()
                          : tape.inputs.front().shape() != x.shape()) {
    throw ConsistencyError("tape was not recorded for an input of this shape");
  }
  return {logit_gradient(model, tape, target, BackwardRule::guided), target};
}

struct IGConfig {
  std::size_t steps = 32;
  // Defaults to all zeros when absent.
  std::optional<std::vector<double>> baseline;
};

/// Integrated gradients of the target logit along the straight path from
/// the baseline, right-endpoint Riemann sum over k = 1..m. The same noise
/// is used for every interpolation point.
template <typename T>
Saliency<T> explain_ig(const Model<T>& model, const Tensor<T>& x, const IGConfig& cfg,
                       std::size_t target, const Noise<T>& noise) {
  if (cfg.steps == 0) throw ArgumentError("integrated gradients needs at least one step");
  Tensor<T> base(x.shape());
  if (cfg.baseline) {
    if (cfg.baseline->size() != x.size()) {
      throw DimensionError("baseline has " + std::to_string(cfg.baseline->size()) +
                           " elements, input has " + std::to_string(x.size()));
    }
    for (std::size_t i = 0; i < x.size(); ++i) base[i] = static_cast<T>((*cfg.baseline)[i]);
  }
  const Tensor<T> delta = x - base;
  std::vector<double> acc(x.size(), 0.0);
  Tensor<T> point(x.shape());
  const double m = static_cast<double>(cfg.steps);
  for (std::size_t k = 1; k <= cfg.steps; ++k) {
    const double alpha = static_cast<double>(k) / m;
    for (std::size_t i = 0; i < x.size(); ++i) {
      point[i] = static_cast<T>(base[i] + alpha * delta[i]);
    }
    const auto fr = forward_with_noise(model, point, noise);
    const auto g = logit_gradient(model, fr.tape, target, BackwardRule::standard);
    for (std::size_t i = 0; i < x.size(); ++i) acc[i] += g[i];
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<T>(delta[i] * acc[i] / m);
  }
  return {std::move(out), target};
}

template <typename T>
Saliency<T> explain_ig(const Model<T>& model, const Tensor<T>& x, const IGConfig& cfg,
                       std::size_t target) {
  return explain_ig(model, x, cfg, target, Noise<T>(model.num_layers()));
}

struct LimeConfig {
  std::size_t num_perturbations = 1000;
  // Defaults to 0.75 * sqrt(feature count).
  std::optional<double> kernel_width;
  double ridge_lambda = 1e-3;
  // Per-feature perturbation std; defaults to 1 for every feature.
  std::vector<double> perturbation_scale;
  std::uint64_t seed = 0;

  double width_for(std::size_t d) const {
    return kernel_width.value_or(0.75 * std::sqrt(static_cast<double>(d)));
  }
};

/// Neighborhood sampled around one input: rows are perturbed inputs,
/// `distance` is measured in standardized (per-feature scale) units.
struct LimeNeighborhood {
  std::vector<std::vector<double>> samples;
  std::vector<double> distance;
};

inline LimeNeighborhood lime_neighborhood(std::span<const double> x, const LimeConfig& cfg) {
  const std::size_t d = x.size();
  if (cfg.num_perturbations < d + 1) {
    throw ConfigError("LIME needs at least " + std::to_string(d + 1) + " perturbations");
  }
  if (!cfg.perturbation_scale.empty() && cfg.perturbation_scale.size() != d) {
    throw DimensionError("perturbation_scale has " +
                         std::to_string(cfg.perturbation_scale.size()) + " entries for " +
                         std::to_string(d) + " features");
  }
  Rng rng = make_rng(cfg.seed, 0x11e);
  std::normal_distribution<double> normal(0.0, 1.0);
  LimeNeighborhood nb;
  nb.samples.reserve(cfg.num_perturbations);
  for (std::size_t s = 0; s < cfg.num_perturbations; ++s) {
    std::vector<double> row(d);
    double dist2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double z = normal(rng);
      const double scale = cfg.perturbation_scale.empty() ? 1.0 : cfg.perturbation_scale[j];
      row[j] = x[j] + scale * z;
      dist2 += z * z;
    }
    nb.samples.push_back(std::move(row));
    nb.distance.push_back(std::sqrt(dist2));
  }
  return nb;
}

inline std::vector<double> lime_weights(const LimeNeighborhood& nb, double kernel_width) {
  std::vector<double> w;
  w.reserve(nb.distance.size());
  for (double d : nb.distance) w.push_back(std::exp(-(d * d) / (kernel_width * kernel_width)));
  return w;
}

struct RidgeFit {
  std::vector<double> coef;
  double intercept = 0.0;
};

/// Weighted ridge regression of y on (rows - center) with an unpenalized
/// intercept, solved through the normal equations.
inline RidgeFit fit_weighted_ridge(const std::vector<std::vector<double>>& rows,
                                   std::span<const double> center, std::span<const double> y,
                                   std::span<const double> w, double lambda) {
  const std::size_t d = center.size();
  const std::size_t p = d + 1;  // slot d is the intercept
  linalg::SquareMatrix A(p);
  std::vector<double> b(p, 0.0);
  std::vector<double> z(p);
  for (std::size_t s = 0; s < rows.size(); ++s) {
    for (std::size_t j = 0; j < d; ++j) z[j] = rows[s][j] - center[j];
    z[d] = 1.0;
    for (std::size_t i = 0; i < p; ++i) {
      b[i] += w[s] * z[i] * y[s];
      for (std::size_t j = 0; j <= i; ++j) A(i, j) += w[s] * z[i] * z[j];
    }
  }
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < i; ++j) A(j, i) = A(i, j);
  }
  for (std::size_t j = 0; j < d; ++j) A(j, j) += lambda;
  auto sol = linalg::cholesky_solve(std::move(A), std::move(b));
  RidgeFit fit;
  fit.intercept = sol[d];
  sol.pop_back();
  fit.coef = std::move(sol);
  return fit;
}

/// Tabular LIME: Gaussian perturbations around x, exponential kernel on the
/// standardized distance, weighted ridge surrogate. The coefficient vector
/// is the saliency.
template <typename T>
Saliency<T> explain_lime_tabular(const std::function<double(const Tensor<T>&)>& predict_fn,
                                 const Tensor<T>& x, const LimeConfig& cfg,
                                 std::size_t target = 0) {
  const std::vector<double> center(x.data().begin(), x.data().end());
  const auto nb = lime_neighborhood(center, cfg);
  std::vector<double> y;
  y.reserve(nb.samples.size());
  Tensor<T> probe(x.shape());
  for (const auto& row : nb.samples) {
    for (std::size_t j = 0; j < row.size(); ++j) probe[j] = static_cast<T>(row[j]);
    y.push_back(predict_fn(probe));
  }
  const auto w = lime_weights(nb, cfg.width_for(center.size()));
  const auto fit = fit_weighted_ridge(nb.samples, center, y, w, cfg.ridge_lambda);
  Tensor<T> out(x.shape());
  for (std::size_t j = 0; j < fit.coef.size(); ++j) out[j] = static_cast<T>(fit.coef[j]);
  if (!out.all_finite()) throw NumericalError("LIME surrogate produced non-finite weights");
  return {std::move(out), target};
}

}  // namespace xunc
