#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "xunc/autodiff.hpp"
#include "xunc/checkpoint.hpp"
#include "xunc/error.hpp"
#include "xunc/model.hpp"
#include "xunc/random.hpp"
#include "xunc/tensor.hpp"
#include "xunc/train.hpp"

namespace xunc {

enum class UncertaintyMethod { ensemble, mc_dropout, mc_dropconnect, flipout };

inline std::string_view to_string(UncertaintyMethod m) {
  switch (m) {
    case UncertaintyMethod::ensemble: return "ensemble";
    case UncertaintyMethod::mc_dropout: return "mc_dropout";
    case UncertaintyMethod::mc_dropconnect: return "mc_dropconnect";
    case UncertaintyMethod::flipout: return "flipout";
  }
  return "unknown";
}

inline UncertaintyMethod uncertainty_method_from_string(std::string_view s) {
  if (s == "ensemble") return UncertaintyMethod::ensemble;
  if (s == "mc_dropout") return UncertaintyMethod::mc_dropout;
  if (s == "mc_dropconnect") return UncertaintyMethod::mc_dropconnect;
  if (s == "flipout") return UncertaintyMethod::flipout;
  throw ConfigError("unknown uncertainty method '" + std::string(s) + "'");
}

struct UncertaintyConfig {
  UncertaintyMethod method = UncertaintyMethod::mc_dropout;
  // Samples per input; ensembles default to one per member.
  std::optional<std::size_t> num_samples;
  std::size_t ensemble_size = 5;
  float dropout_rate = 0.25f;
  float dropconnect_rate = 0.25f;
  std::optional<double> kl_weight;
  double flipout_rho_init = -5.0;

  std::size_t samples() const {
    if (num_samples) return *num_samples;
    return method == UncertaintyMethod::ensemble ? ensemble_size : 20;
  }

  void validate() const {
    if (samples() == 0) throw ConfigError("num_samples must be at least 1");
    if (method == UncertaintyMethod::ensemble && ensemble_size == 0) {
      throw ConfigError("ensemble_size must be at least 1");
    }
    for (float r : {dropout_rate, dropconnect_rate}) {
      if (!(r >= 0.0f && r < 1.0f)) throw ConfigError("rates must lie in [0, 1)");
    }
  }
};

/// A prediction sampler: K ensemble members evaluated deterministically, or
/// one model whose stochastic layers stay active at inference.
template <typename T>
struct UncertaintyModel {
  UncertaintyConfig config;
  std::vector<Model<T>> members;
  std::vector<std::uint64_t> member_seeds;

  Task task() const { return members.front().task(); }
  const Shape& input_shape() const { return members.front().input_shape(); }
  bool is_ensemble() const { return config.method == UncertaintyMethod::ensemble; }
};

/// Wraps a template architecture according to `config`.
///
/// Ensemble members are initialized from distinct seeds. Stochastic methods
/// require the matching layer kind and have its rate overwritten from the
/// config.
template <typename T>
UncertaintyModel<T> build(const Model<T>& model_template, const UncertaintyConfig& config,
                          std::uint64_t seed) {
  config.validate();
  UncertaintyModel<T> um;
  um.config = config;
  const InitOptions init{config.flipout_rho_init};
  auto require = [&](LayerKind k) {
    if (!model_template.has_kind(k)) {
      throw ConfigError(std::string(to_string(config.method)) + " requires at least one " +
                        std::string(to_string(k)) + " layer");
    }
  };
  switch (config.method) {
    case UncertaintyMethod::ensemble:
      for (std::size_t k = 0; k < config.ensemble_size; ++k) {
        Model<T> m = model_template;
        const std::uint64_t s = derive_seed(seed, k);
        m.initialize(s, init);
        um.members.push_back(std::move(m));
        um.member_seeds.push_back(s);
      }
      return um;
    case UncertaintyMethod::mc_dropout:
      require(LayerKind::dropout);
      break;
    case UncertaintyMethod::mc_dropconnect:
      require(LayerKind::dropconnect);
      break;
    case UncertaintyMethod::flipout:
      require(LayerKind::flipout_dense);
      break;
  }
  Model<T> m = model_template;
  for (auto& l : m.layers()) {
    if (l.kind == LayerKind::dropout) l.rate = config.dropout_rate;
    if (l.kind == LayerKind::dropconnect) l.rate = config.dropconnect_rate;
  }
  const std::uint64_t s = derive_seed(seed, 0);
  m.initialize(s, init);
  um.members.push_back(std::move(m));
  um.member_seeds.push_back(s);
  return um;
}

/// Trains every member; members get independent shuffling seeds.
template <typename T>
std::vector<TrainingLog> train_uncertainty(UncertaintyModel<T>& um,
                                           std::span<const Tensor<T>> inputs,
                                           std::span<const double> targets,
                                           TrainConfig cfg) {
  if (!cfg.kl_weight) cfg.kl_weight = um.config.kl_weight;
  std::vector<TrainingLog> logs;
  const std::uint64_t base = cfg.seed;
  for (std::size_t k = 0; k < um.members.size(); ++k) {
    cfg.seed = derive_seed(base, 1000 + k);
    logs.push_back(train(um.members[k], inputs, targets, cfg));
  }
  return logs;
}

/// ELBO surrogate for a flipout model on one batch with one weight sample
/// per example: kl_weight * KL(q || N(0, 1)) + summed NLL, where NLL is the
/// cross-entropy (classification) or squared error (regression).
template <typename T>
double elbo_loss(const Model<T>& model, std::span<const Tensor<T>> batch_inputs,
                 std::span<const double> batch_labels, double kl_weight, Rng& rng) {
  if (!model.has_kind(LayerKind::flipout_dense)) {
    throw ConfigError("elbo_loss requires a flipout model");
  }
  if (batch_inputs.size() != batch_labels.size()) {
    throw ArgumentError("inputs and labels differ in length");
  }
  const LossKind loss = default_loss(model.task());
  Noise<T> noise = draw_noise(model, rng);
  double nll = 0.0;
  for (std::size_t i = 0; i < batch_inputs.size(); ++i) {
    redraw_per_example(model, noise, rng);
    const auto out = forward_with_noise(model, batch_inputs[i], noise).output;
    nll += example_loss<T>(model, loss, out, batch_labels[i], nullptr);
  }
  const double total = kl_weight * kl_divergence(model) + nll;
  if (!std::isfinite(total)) throw DivergenceError("non-finite ELBO loss");
  return total;
}

/// One stochastic realization of the sampler: which member, and the noise
/// drawn for it. Sample i of a prediction and of an explanation share it.
template <typename T>
struct Realization {
  std::size_t member = 0;
  Noise<T> noise;
};

template <typename T>
std::vector<Realization<T>> draw_realizations(const UncertaintyModel<T>& um, std::size_t T_,
                                              std::uint64_t seed) {
  if (T_ == 0) throw ConfigError("number of samples must be at least 1");
  std::vector<Realization<T>> out;
  out.reserve(T_);
  if (um.is_ensemble()) {
    if (T_ > um.members.size()) {
      throw ConfigError("requested " + std::to_string(T_) + " samples from an ensemble of " +
                        std::to_string(um.members.size()) + " members");
    }
    for (std::size_t i = 0; i < T_; ++i) {
      out.push_back({i, Noise<T>(um.members[i].num_layers())});
    }
    return out;
  }
  const auto& m = um.members.front();
  for (std::size_t i = 0; i < T_; ++i) {
    Rng rng = make_rng(seed, i);
    out.push_back({0, draw_noise(m, rng)});
  }
  return out;
}

// Softmax probabilities (classification) or raw output (regression).
template <typename T>
Tensor<T> prediction_of(const Model<T>& model, const Tensor<T>& output) {
  if (model.task() == Task::classification && model.logit_layers() == model.num_layers()) {
    return softmax(output);
  }
  return output;
}

template <typename T>
Tensor<T> predict_realization(const UncertaintyModel<T>& um, const Realization<T>& r,
                              const Tensor<T>& x) {
  const auto& m = um.members.at(r.member);
  return prediction_of(m, forward_with_noise(m, x, r.noise).output);
}

/// T prediction samples for `x`. Deterministic given the seed.
template <typename T>
std::vector<Tensor<T>> predict_samples(const UncertaintyModel<T>& um, const Tensor<T>& x,
                                       std::size_t T_, std::uint64_t seed) {
  std::vector<Tensor<T>> out;
  for (const auto& r : draw_realizations(um, T_, seed)) {
    out.push_back(predict_realization(um, r, x));
  }
  return out;
}

template <typename T>
struct PredictionSummary {
  Tensor<T> mean;
  Tensor<T> std;
  std::vector<Tensor<T>> samples;
};

/// Elementwise mean and population standard deviation (divisor T).
template <typename T>
PredictionSummary<T> aggregate(std::vector<Tensor<T>> samples) {
  if (samples.empty()) throw ArgumentError("aggregate needs at least one sample");
  const auto& shape = samples.front().shape();
  for (const auto& s : samples) {
    if (s.shape() != shape) throw DimensionError("samples differ in shape");
  }
  const std::size_t n = samples.front().size();
  const double count = static_cast<double>(samples.size());
  PredictionSummary<T> r;
  r.mean = Tensor<T>(shape);
  r.std = Tensor<T>(shape);
  for (std::size_t k = 0; k < n; ++k) {
    double mu = 0.0;
    for (const auto& s : samples) mu += s[k];
    mu /= count;
    double var = 0.0;
    for (const auto& s : samples) {
      const double d = s[k] - mu;
      var += d * d;
    }
    r.mean[k] = static_cast<T>(mu);
    r.std[k] = static_cast<T>(std::sqrt(var / count));
  }
  r.samples = std::move(samples);
  return r;
}

/// Checkpoint directory: manifest.json plus member_<k>.xmdl per member.
template <typename T>
void save_uncertainty_model(const std::filesystem::path& dir, const UncertaintyModel<T>& um) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "xunc-uncertainty";
  manifest["version"] = 1;
  manifest["method"] = std::string(to_string(um.config.method));
  manifest["ensemble_size"] = um.members.size();
  manifest["num_samples"] = um.config.samples();
  manifest["dropout_rate"] = um.config.dropout_rate;
  manifest["dropconnect_rate"] = um.config.dropconnect_rate;
  manifest["flipout_rho_init"] = um.config.flipout_rho_init;
  if (um.config.kl_weight) manifest["kl_weight"] = *um.config.kl_weight;
  manifest["seeds"] = um.member_seeds;
  std::vector<std::string> files;
  for (std::size_t k = 0; k < um.members.size(); ++k) {
    const std::string name = "member_" + std::to_string(k) + ".xmdl";
    save_model(dir / name, um.members[k]);
    files.push_back(name);
  }
  manifest["members"] = files;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

template <typename T>
UncertaintyModel<T> load_uncertainty_model(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) {
    throw FormatError("missing checkpoint manifest " + path.string());
  }
  nlohmann::json manifest;
  try {
    const auto bytes = io::read_file(path);
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  UncertaintyModel<T> um;
  try {
    um.config.method = uncertainty_method_from_string(manifest.at("method").get<std::string>());
    um.config.ensemble_size = manifest.at("ensemble_size").get<std::size_t>();
    um.config.num_samples = manifest.at("num_samples").get<std::size_t>();
    um.config.dropout_rate = manifest.at("dropout_rate").get<float>();
    um.config.dropconnect_rate = manifest.at("dropconnect_rate").get<float>();
    um.config.flipout_rho_init = manifest.value("flipout_rho_init", -5.0);
    if (manifest.contains("kl_weight")) um.config.kl_weight = manifest["kl_weight"].get<double>();
    um.member_seeds = manifest.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& name : manifest.at("members")) {
      um.members.push_back(load_model<T>(dir / name.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (um.members.empty()) throw FormatError(path.string() + ": no members");
  return um;
}

}  // namespace xunc
