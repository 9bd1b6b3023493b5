#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xunc/data_io.hpp"
#include "xunc/error.hpp"
#include "xunc/expl_uncertainty.hpp"
#include "xunc/metrics.hpp"
#include "xunc/model.hpp"
#include "xunc/train.hpp"
#include "xunc/uncertainty.hpp"

namespace xunc {

enum class DatasetKind { synthetic_squares, images, csv };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic_squares;
  std::filesystem::path path;
  std::string target_column = "y";
  std::size_t num_samples = 600;  // synthetic only
  bool standardize = true;        // csv only
  double test_fraction = 0.2;
};

struct ArchitectureConfig {
  std::string preset = "mini_vgg";  // "mini_vgg", "mlp", or "" with explicit layers
  std::vector<std::size_t> channels{8};
  std::vector<std::size_t> hidden{32};
  nlohmann::json layers;  // explicit layer list when present
};

struct ExplainRunConfig {
  ExplanationMethod method = ExplanationMethod::gbp;
  TargetMode target = TargetMode::predicted;
  std::optional<std::size_t> label;
  std::size_t ig_steps = 32;
  LimeConfig lime;
  std::vector<std::size_t> inputs{0};  // test-split positions
  HeatmapNorm heatmap_norm = HeatmapNorm::minmax;
};

struct MetricsRunConfig {
  PerturbationConfig perturbation;
  std::size_t max_images = 50;
  bool svg = true;
};

struct RunConfig {
  Task task = Task::classification;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  DatasetConfig dataset;
  ArchitectureConfig architecture;
  TrainConfig training;
  UncertaintyConfig uncertainty;
  ExplainRunConfig explanation;
  MetricsRunConfig metrics;
  nlohmann::json source;  // the document as read, for the run record
};

namespace detail {

// Reads optional keys of one JSON object and rejects keys it never asked for.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: '" + path(key) + "' has the wrong type");
    }
  }

  template <typename V>
  void get(const std::string& key, std::optional<V>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    V v{};
    get(key, v);
    out = v;
  }

  template <typename F>
  void get_enum(const std::string& key, F&& parse) {
    std::string s;
    get(key, s);
    if (!s.empty()) parse(s);
  }

  void mark(const std::string& key) { seen_.insert(key); }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + path(k) + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline const nlohmann::json& empty_object() {
  static const nlohmann::json e = nlohmann::json::object();
  return e;
}

}  // namespace detail

/// Parses a run document. Relative paths resolve against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& doc,
                                  const std::filesystem::path& base_dir = {}) {
  RunConfig rc;
  rc.source = doc;
  detail::Section top(doc, "");
  top.get_enum("task", [&](const std::string& s) {
    if (s == "classification") rc.task = Task::classification;
    else if (s == "regression") rc.task = Task::regression;
    else throw ConfigError("config: unknown task '" + s + "'");
  });
  if (!top.has("seed")) throw ConfigError("config: 'seed' is required");
  top.get("seed", rc.seed);
  std::string out;
  top.get("output_dir", out);
  if (!out.empty()) rc.output_dir = base_dir / out;

  auto sub = [&](const std::string& key) -> const nlohmann::json& {
    top.mark(key);
    return top.has(key) ? top.raw(key) : detail::empty_object();
  };

  {
    detail::Section s(sub("dataset"), "dataset");
    s.get_enum("kind", [&](const std::string& k) {
      if (k == "synthetic_squares") rc.dataset.kind = DatasetKind::synthetic_squares;
      else if (k == "images") rc.dataset.kind = DatasetKind::images;
      else if (k == "csv") rc.dataset.kind = DatasetKind::csv;
      else throw ConfigError("config: unknown dataset kind '" + k + "'");
    });
    std::string p;
    s.get("path", p);
    if (!p.empty()) rc.dataset.path = base_dir / p;
    s.get("target_column", rc.dataset.target_column);
    s.get("num_samples", rc.dataset.num_samples);
    s.get("standardize", rc.dataset.standardize);
    s.get("test_fraction", rc.dataset.test_fraction);
    s.finish();
    if (rc.dataset.kind != DatasetKind::synthetic_squares) {
      if (rc.dataset.path.empty()) throw ConfigError("config: 'dataset.path' is required");
      if (!std::filesystem::exists(rc.dataset.path)) {
        throw ConfigError("dataset not found: " + rc.dataset.path.string());
      }
    }
    if (!(rc.dataset.test_fraction > 0 && rc.dataset.test_fraction < 1)) {
      throw ConfigError("config: 'dataset.test_fraction' must lie in (0, 1)");
    }
  }
  {
    detail::Section s(sub("architecture"), "architecture");
    s.get("preset", rc.architecture.preset);
    s.get("channels", rc.architecture.channels);
    s.get("hidden", rc.architecture.hidden);
    if (s.has("layers")) {
      rc.architecture.layers = s.raw("layers");
      if (!s.has("preset")) rc.architecture.preset.clear();
    }
    s.finish();
    if (!rc.architecture.preset.empty() && !rc.architecture.layers.is_null()) {
      throw ConfigError("config: give either 'architecture.preset' or 'architecture.layers'");
    }
  }
  {
    detail::Section s(sub("training"), "training");
    s.get_enum("optimizer", [&](const std::string& k) { rc.training.optimizer = optimizer_from_string(k); });
    s.get_enum("loss", [&](const std::string& k) {
      if (k == "cross_entropy") rc.training.loss = LossKind::cross_entropy;
      else if (k == "mse") rc.training.loss = LossKind::mse;
      else throw ConfigError("config: unknown loss '" + k + "'");
    });
    s.get("learning_rate", rc.training.learning_rate);
    s.get("epochs", rc.training.epochs);
    s.get("batch_size", rc.training.batch_size);
    s.get("kl_weight", rc.training.kl_weight);
    s.finish();
    if (rc.training.batch_size == 0) throw ConfigError("config: 'training.batch_size' must be positive");
    if (!(rc.training.learning_rate > 0)) throw ConfigError("config: 'training.learning_rate' must be positive");
  }
  {
    detail::Section s(sub("uncertainty"), "uncertainty");
    s.get_enum("method", [&](const std::string& k) {
      rc.uncertainty.method = uncertainty_method_from_string(k);
    });
    s.get("num_samples", rc.uncertainty.num_samples);
    s.get("ensemble_size", rc.uncertainty.ensemble_size);
    s.get("dropout_rate", rc.uncertainty.dropout_rate);
    s.get("dropconnect_rate", rc.uncertainty.dropconnect_rate);
    s.get("kl_weight", rc.uncertainty.kl_weight);
    s.get("flipout_rho_init", rc.uncertainty.flipout_rho_init);
    s.finish();
    rc.uncertainty.validate();
  }
  {
    detail::Section s(sub("explanation"), "explanation");
    s.get_enum("method", [&](const std::string& k) {
      rc.explanation.method = explanation_method_from_string(k);
    });
    s.get_enum("target", [&](const std::string& k) { rc.explanation.target = target_mode_from_string(k); });
    s.get("label", rc.explanation.label);
    s.get("ig_steps", rc.explanation.ig_steps);
    s.get("inputs", rc.explanation.inputs);
    s.get_enum("heatmap_norm", [&](const std::string& k) {
      rc.explanation.heatmap_norm = heatmap_norm_from_string(k);
    });
    if (s.has("lime")) {
      detail::Section l(s.raw("lime"), "explanation.lime");
      l.get("num_perturbations", rc.explanation.lime.num_perturbations);
      l.get("kernel_width", rc.explanation.lime.kernel_width);
      l.get("ridge_lambda", rc.explanation.lime.ridge_lambda);
      l.finish();
    } else {
      s.mark("lime");
    }
    s.finish();
    if (rc.explanation.ig_steps == 0) throw ConfigError("config: 'explanation.ig_steps' must be positive");
  }
  {
    detail::Section s(sub("metrics"), "metrics");
    auto& p = rc.metrics.perturbation;
    s.get("num_steps", p.num_steps);
    s.get_enum("deletion_fill", [&](const std::string& k) { p.deletion_fill = deletion_fill_from_string(k); });
    s.get("fill_values", p.fill_values);
    s.get_enum("insertion_reference", [&](const std::string& k) {
      p.insertion_reference = insertion_reference_from_string(k);
    });
    s.get("blur_sigma", p.blur_sigma);
    s.get_enum("channel_agg", [&](const std::string& k) { p.channel_agg = channel_agg_from_string(k); });
    s.get_enum("scorer", [&](const std::string& k) { p.scorer = scorer_from_string(k); });
    s.get("max_images", rc.metrics.max_images);
    s.get("svg", rc.metrics.svg);
    s.finish();
    p.validate();
  }
  top.finish();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config not found: " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

namespace detail {

template <typename T>
Layer<T> layer_from_json(const nlohmann::json& j, std::size_t index) {
  Section s(j, "architecture.layers[" + std::to_string(index) + "]");
  std::string type;
  std::size_t units = 0, filters = 0, kernel = 0, padding = 0;
  std::optional<std::size_t> stride;
  float rate = 0.0f;
  s.get("type", type);
  s.get("units", units);
  s.get("filters", filters);
  s.get("kernel", kernel);
  s.get("stride", stride);
  s.get("padding", padding);
  s.get("rate", rate);
  s.finish();
  const auto need = [&](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError("config: " + s.path(key) + " must be positive");
    return v;
  };
  switch (layer_kind_from_string(type)) {
    case LayerKind::dense: return layers::dense<T>(need(units, "units"));
    case LayerKind::conv2d:
      return layers::conv2d<T>(need(filters, "filters"), need(kernel, "kernel"),
                               need(stride.value_or(1), "stride"), padding);
    case LayerKind::maxpool2d:
      // Pooling windows do not overlap unless a stride is given.
      return layers::maxpool2d<T>(need(kernel, "kernel"), need(stride.value_or(kernel), "stride"));
    case LayerKind::relu: return layers::relu<T>();
    case LayerKind::flatten: return layers::flatten<T>();
    case LayerKind::softmax: return layers::softmax<T>();
    case LayerKind::dropout: return layers::dropout<T>(rate);
    case LayerKind::dropconnect: return layers::dropconnect<T>(need(units, "units"), rate);
    case LayerKind::flipout_dense: return layers::flipout_dense<T>(need(units, "units"));
  }
  throw ConfigError("config: unknown layer type '" + type + "'");
}

}  // namespace detail

/// The template network for a run. Presets place the stochastic layer the
/// uncertainty method needs: dropout after every hidden relu, a dropconnect
/// last hidden layer, or a flipout output layer.
template <typename T>
Model<T> build_architecture(const RunConfig& rc, const Shape& input_shape, std::size_t outputs) {
  std::vector<Layer<T>> ls;
  const auto& a = rc.architecture;
  const auto method = rc.uncertainty.method;
  try {
    if (a.preset.empty()) {
      if (!a.layers.is_array() || a.layers.empty()) {
        throw ConfigError("config: 'architecture.layers' must be a nonempty array");
      }
      for (std::size_t i = 0; i < a.layers.size(); ++i) {
        ls.push_back(detail::layer_from_json<T>(a.layers[i], i));
      }
      return Model<T>(input_shape, std::move(ls), rc.task);
    }
    if (a.preset == "mini_vgg") {
      if (input_shape.size() != 3) throw ConfigError("mini_vgg needs [C,H,W] image inputs");
      for (auto c : a.channels) {
        ls.push_back(layers::conv2d<T>(c, 3, 1, 1));
        ls.push_back(layers::relu<T>());
        ls.push_back(layers::maxpool2d<T>(2, 2));
      }
      ls.push_back(layers::flatten<T>());
    } else if (a.preset != "mlp") {
      throw ConfigError("config: unknown architecture preset '" + a.preset + "'");
    }
    for (std::size_t i = 0; i < a.hidden.size(); ++i) {
      const bool last = i + 1 == a.hidden.size();
      if (last && method == UncertaintyMethod::mc_dropconnect) {
        ls.push_back(layers::dropconnect<T>(a.hidden[i], rc.uncertainty.dropconnect_rate));
      } else {
        ls.push_back(layers::dense<T>(a.hidden[i]));
      }
      ls.push_back(layers::relu<T>());
      if (method == UncertaintyMethod::mc_dropout) {
        ls.push_back(layers::dropout<T>(rc.uncertainty.dropout_rate));
      }
    }
    if (method == UncertaintyMethod::mc_dropconnect && a.hidden.empty()) {
      throw ConfigError("mc_dropconnect presets need at least one hidden layer");
    }
    if (method == UncertaintyMethod::mc_dropout && a.hidden.empty()) {
      ls.push_back(layers::dropout<T>(rc.uncertainty.dropout_rate));
    }
    ls.push_back(method == UncertaintyMethod::flipout ? layers::flipout_dense<T>(outputs)
                                                      : layers::dense<T>(outputs));
    if (rc.task == Task::classification) ls.push_back(layers::softmax<T>());
    return Model<T>(input_shape, std::move(ls), rc.task);
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("architecture does not fit the data: ") + e.what());
  }
}

}  // namespace xunc
