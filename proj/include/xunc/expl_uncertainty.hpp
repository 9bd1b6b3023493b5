#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "xunc/autodiff.hpp"
#include "xunc/error.hpp"
#include "xunc/explain.hpp"
#include "xunc/tensor.hpp"
#include "xunc/uncertainty.hpp"

namespace xunc {

enum class ExplanationMethod { gbp, ig, lime };

inline std::string_view to_string(ExplanationMethod m) {
  switch (m) {
    case ExplanationMethod::gbp: return "gbp";
    case ExplanationMethod::ig: return "ig";
    case ExplanationMethod::lime: return "lime";
  }
  return "unknown";
}

inline ExplanationMethod explanation_method_from_string(std::string_view s) {
  if (s == "gbp") return ExplanationMethod::gbp;
  if (s == "ig") return ExplanationMethod::ig;
  if (s == "lime") return ExplanationMethod::lime;
  throw ConfigError("unknown explanation method '" + std::string(s) + "'");
}

struct ExplanationConfig {
  ExplanationMethod method = ExplanationMethod::gbp;
  TargetSelector selector;
  IGConfig ig;
  LimeConfig lime;
};

template <typename T>
struct ExplanationDistribution {
  std::vector<Saliency<T>> samples;
  ExplanationMethod method = ExplanationMethod::gbp;
  TargetMode target_mode = TargetMode::predicted;
  // Mean prediction over the same T realizations.
  Tensor<T> mean_prediction;
};

template <typename T>
struct ExplanationStats {
  Tensor<T> mean;
  Tensor<T> std;
  Tensor<T> cv;
};

/// One saliency per prediction sample: sample i explains realization i
/// (same ensemble member or same drawn noise).
///
/// In predicted mode every sample explains the class with the highest mean
/// predicted probability, so all samples share one target neuron.
template <typename T>
ExplanationDistribution<T> explanation_distribution(const UncertaintyModel<T>& um,
                                                    const Tensor<T>& x,
                                                    const ExplanationConfig& cfg,
                                                    std::size_t T_, std::uint64_t seed) {
  const Task task = um.task();
  if (cfg.method == ExplanationMethod::lime && x.rank() != 1) {
    throw ConfigError("lime is incompatible with image inputs (tabular only)");
  }
  if (cfg.method != ExplanationMethod::lime && x.shape() != um.input_shape()) {
    throw DimensionError("input shape " + shape_string(x.shape()) + " does not match model " +
                         shape_string(um.input_shape()));
  }
  const auto realizations = draw_realizations(um, T_, seed);

  ExplanationDistribution<T> dist;
  dist.method = cfg.method;
  dist.target_mode = cfg.selector.mode;

  std::vector<ForwardResult<T>> passes;
  std::vector<Tensor<T>> preds;
  passes.reserve(realizations.size());
  for (const auto& r : realizations) {
    const auto& m = um.members[r.member];
    passes.push_back(forward_with_noise(m, x, r.noise));
    preds.push_back(prediction_of(m, passes.back().output));
  }
  dist.mean_prediction = aggregate(preds).mean;
  const std::size_t target = task == Task::regression && cfg.selector.mode == TargetMode::predicted
                                 ? 0
                                 : select_target(dist.mean_prediction, cfg.selector);

  for (std::size_t i = 0; i < realizations.size(); ++i) {
    const auto& r = realizations[i];
    const auto& m = um.members[r.member];
    switch (cfg.method) {
      case ExplanationMethod::gbp:
        dist.samples.push_back(explain_gbp(m, x, passes[i].tape, target));
        break;
      case ExplanationMethod::ig:
        dist.samples.push_back(explain_ig(m, x, cfg.ig, target, r.noise));
        break;
      case ExplanationMethod::lime: {
        std::function<double(const Tensor<T>&)> fn = [&](const Tensor<T>& probe) {
          const auto p = prediction_of(m, forward_with_noise(m, probe, r.noise).output);
          return static_cast<double>(p[target]);
        };
        LimeConfig lc = cfg.lime;
        lc.seed = derive_seed(cfg.lime.seed, i);
        dist.samples.push_back(explain_lime_tabular(fn, x, lc, target));
        break;
      }
    }
  }
  return dist;
}

/// Elementwise mean, population std and coefficient of variation
/// std / (|mean| + epsilon).
template <typename T>
ExplanationStats<T> stats(const std::vector<Saliency<T>>& samples, double epsilon = 1e-8) {
  if (samples.empty()) throw ArgumentError("stats needs at least one saliency");
  const auto& shape = samples.front().values.shape();
  for (const auto& s : samples) {
    if (s.values.shape() != shape) throw DimensionError("saliencies differ in shape");
  }
  const double count = static_cast<double>(samples.size());
  ExplanationStats<T> st{Tensor<T>(shape), Tensor<T>(shape), Tensor<T>(shape)};
  for (std::size_t k = 0; k < st.mean.size(); ++k) {
    double mu = 0.0;
    for (const auto& s : samples) mu += s.values[k];
    mu /= count;
    double var = 0.0;
    for (const auto& s : samples) {
      const double d = s.values[k] - mu;
      var += d * d;
    }
    const double sd = std::sqrt(var / count);
    st.mean[k] = static_cast<T>(mu);
    st.std[k] = static_cast<T>(sd);
    st.cv[k] = static_cast<T>(sd / (std::abs(mu) + epsilon));
  }
  return st;
}

template <typename T>
ExplanationStats<T> stats(const ExplanationDistribution<T>& dist, double epsilon = 1e-8) {
  return stats(dist.samples, epsilon);
}

}  // namespace xunc
