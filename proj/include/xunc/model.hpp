#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xunc/error.hpp"
#include "xunc/random.hpp"
#include "xunc/tensor.hpp"

namespace xunc {

enum class LayerKind : std::uint8_t {
  dense = 1,
  conv2d = 2,
  maxpool2d = 3,
  relu = 4,
  flatten = 5,
  softmax = 6,
  dropout = 7,
  // Dense layer whose weights are masked (DropConnect).
  dropconnect = 8,
  // Dense layer with a factorized Gaussian weight posterior.
  flipout_dense = 9,
};

enum class Task : std::uint8_t { classification = 0, regression = 1 };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::softmax: return "softmax";
    case LayerKind::dropout: return "dropout";
    case LayerKind::dropconnect: return "dropconnect";
    case LayerKind::flipout_dense: return "flipout_dense";
  }
  return "unknown";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (int k = 1; k <= 9; ++k) {
    auto kind = static_cast<LayerKind>(k);
    if (to_string(kind) == s) return kind;
  }
  throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

inline std::string_view to_string(Task t) {
  return t == Task::classification ? "classification" : "regression";
}

inline Task task_from_string(std::string_view s) {
  if (s == "classification") return Task::classification;
  if (s == "regression") return Task::regression;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

inline bool has_weights(LayerKind k) {
  return k == LayerKind::dense || k == LayerKind::conv2d ||
         k == LayerKind::dropconnect || k == LayerKind::flipout_dense;
}

inline bool is_stochastic(LayerKind k) {
  return k == LayerKind::dropout || k == LayerKind::dropconnect ||
         k == LayerKind::flipout_dense;
}

template <typename T>
T softplus(T x) {
  // log(1 + e^x) without overflow for large x.
  return x > T{20} ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

/// One layer of a sequential stack.
///
/// `units` is the output width for dense-like layers and the filter count
/// for conv2d. Pooling uses `kernel` and `stride`. For flipout_dense,
/// `weight` holds the posterior mean and `rho` the pre-softplus std.
template <typename T>
struct Layer {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  float rate = 0.0f;

  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> rho;

  // Resolved when the owning Model is constructed.
  Shape in_shape;
  Shape out_shape;

  std::vector<Tensor<T>*> params() {
    std::vector<Tensor<T>*> out;
    if (weight.size()) out.push_back(&weight);
    if (bias.size()) out.push_back(&bias);
    if (rho.size()) out.push_back(&rho);
    return out;
  }
  std::vector<const Tensor<T>*> params() const {
    std::vector<const Tensor<T>*> out;
    if (weight.size()) out.push_back(&weight);
    if (bias.size()) out.push_back(&bias);
    if (rho.size()) out.push_back(&rho);
    return out;
  }

  template <typename U>
  Layer<U> cast() const {
    Layer<U> l;
    l.kind = kind;
    l.units = units;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.rate = rate;
    if (weight.size()) l.weight = weight.template cast<U>();
    if (bias.size()) l.bias = bias.template cast<U>();
    if (rho.size()) l.rho = rho.template cast<U>();
    l.in_shape = in_shape;
    l.out_shape = out_shape;
    return l;
  }
};

namespace layers {

template <typename T = float>
Layer<T> dense(std::size_t units) {
  Layer<T> l;
  l.kind = LayerKind::dense;
  l.units = units;
  return l;
}

// Dense layer with explicit weights [out, in] and bias [out].
template <typename T>
Layer<T> dense(Tensor<T> weight, Tensor<T> bias) {
  Layer<T> l;
  l.kind = LayerKind::dense;
  l.units = weight.dim(0);
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  return l;
}

template <typename T = float>
Layer<T> conv2d(std::size_t filters, std::size_t kernel, std::size_t stride = 1,
                std::size_t padding = 0) {
  Layer<T> l;
  l.kind = LayerKind::conv2d;
  l.units = filters;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

template <typename T = float>
Layer<T> maxpool2d(std::size_t kernel, std::size_t stride = 0) {
  Layer<T> l;
  l.kind = LayerKind::maxpool2d;
  l.kernel = kernel;
  l.stride = stride ? stride : kernel;
  return l;
}

template <typename T = float>
Layer<T> simple(LayerKind kind) {
  Layer<T> l;
  l.kind = kind;
  return l;
}

template <typename T = float>
Layer<T> relu() { return simple<T>(LayerKind::relu); }
template <typename T = float>
Layer<T> flatten() { return simple<T>(LayerKind::flatten); }
template <typename T = float>
Layer<T> softmax() { return simple<T>(LayerKind::softmax); }

template <typename T = float>
Layer<T> dropout(float rate) {
  Layer<T> l;
  l.kind = LayerKind::dropout;
  l.rate = rate;
  return l;
}

template <typename T = float>
Layer<T> dropconnect(std::size_t units, float rate) {
  Layer<T> l;
  l.kind = LayerKind::dropconnect;
  l.units = units;
  l.rate = rate;
  return l;
}

template <typename T = float>
Layer<T> flipout_dense(std::size_t units) {
  Layer<T> l;
  l.kind = LayerKind::flipout_dense;
  l.units = units;
  return l;
}

}  // namespace layers

struct InitOptions {
  // Initial pre-softplus std of flipout posteriors; softplus(-5) ~ 6.7e-3.
  double flipout_rho_init = -5.0;
};

/// Sequential network: an input shape, a stack of layers and a task.
///
/// Construction resolves every layer's input/output shape and allocates
/// zero parameters where none were supplied. Use `initialize` for random
/// weights.
template <typename T>
class Model {
 public:
  using Scalar = T;

  Model() = default;

  Model(Shape input_shape, std::vector<Layer<T>> layer_stack,
        Task task = Task::classification)
      : input_shape_(std::move(input_shape)),
        layers_(std::move(layer_stack)),
        task_(task) {
    resolve_shapes();
  }

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const {
    return layers_.empty() ? input_shape_ : layers_.back().out_shape;
  }
  std::size_t output_size() const { return shape_size(output_shape()); }
  Task task() const { return task_; }
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }
  const Layer<T>& layer(std::size_t i) const { return layers_.at(i); }
  Layer<T>& layer(std::size_t i) { return layers_.at(i); }

  // Number of leading layers that produce the logits (a trailing softmax is
  // excluded).
  std::size_t logit_layers() const {
    if (!layers_.empty() && layers_.back().kind == LayerKind::softmax) {
      return layers_.size() - 1;
    }
    return layers_.size();
  }

  bool has_kind(LayerKind k) const {
    for (const auto& l : layers_) {
      if (l.kind == k) return true;
    }
    return false;
  }

  bool has_stochastic_layers() const {
    for (const auto& l : layers_) {
      if (is_stochastic(l.kind)) return true;
    }
    return false;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_) {
      for (auto* p : l.params()) out.push_back(p);
    }
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers_) {
      for (const auto* p : l.params()) out.push_back(p);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  /// Uniform fan-in initialization in ±sqrt(6/fan_in); biases zero.
  void initialize(std::uint64_t seed, const InitOptions& opts = {}) {
    Rng rng = make_rng(seed, 0x1417);
    for (auto& l : layers_) {
      if (!has_weights(l.kind)) continue;
      const std::size_t fan_in = l.weight.size() / l.weight.dim(0);
      const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& w : l.weight.data()) w = static_cast<T>(dist(rng));
      l.bias.fill(T{0});
      if (l.kind == LayerKind::flipout_dense) {
        l.rho.fill(static_cast<T>(opts.flipout_rho_init));
      }
    }
  }

  template <typename U>
  Model<U> cast() const {
    std::vector<Layer<U>> ls;
    ls.reserve(layers_.size());
    for (const auto& l : layers_) ls.push_back(l.template cast<U>());
    return Model<U>(input_shape_, std::move(ls), task_);
  }

  friend bool operator==(const Model& a, const Model& b) {
    if (a.input_shape_ != b.input_shape_ || a.task_ != b.task_ ||
        a.layers_.size() != b.layers_.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto& x = a.layers_[i];
      const auto& y = b.layers_[i];
      if (x.kind != y.kind || x.units != y.units || x.kernel != y.kernel ||
          x.stride != y.stride || x.padding != y.padding || x.rate != y.rate ||
          !(x.weight == y.weight) || !(x.bias == y.bias) || !(x.rho == y.rho)) {
        return false;
      }
    }
    return true;
  }

 private:
  [[noreturn]] static void dim_error(std::size_t i, const Layer<T>& l,
                                     const std::string& what) {
    throw DimensionError("layer " + std::to_string(i) + " (" +
                         std::string(to_string(l.kind)) + "): " + what);
  }

  static void check_rate(std::size_t i, const Layer<T>& l) {
    if (!(l.rate >= 0.0 && l.rate < 1.0)) {
      throw ConfigError("layer " + std::to_string(i) + " (" +
                        std::string(to_string(l.kind)) + "): rate must lie in [0, 1)");
    }
  }

  static void expect_param(std::size_t i, const Layer<T>& l, Tensor<T>& t,
                           const Shape& shape, const char* name) {
    if (t.size() == 0) {
      t = Tensor<T>(shape);
    } else if (t.shape() != shape) {
      dim_error(i, l, std::string(name) + " shape " + shape_string(t.shape()) +
                          " expected " + shape_string(shape));
    }
  }

  void resolve_shapes() {
    if (input_shape_.empty()) throw DimensionError("model input shape is empty");
    Shape cur = input_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      l.in_shape = cur;
      switch (l.kind) {
        case LayerKind::dense:
        case LayerKind::dropconnect:
        case LayerKind::flipout_dense: {
          if (cur.size() != 1) dim_error(i, l, "expects rank-1 input, got " + shape_string(cur));
          if (l.units == 0) dim_error(i, l, "units must be positive");
          expect_param(i, l, l.weight, {l.units, cur[0]}, "weight");
          expect_param(i, l, l.bias, {l.units}, "bias");
          if (l.kind == LayerKind::flipout_dense) {
            expect_param(i, l, l.rho, {l.units, cur[0]}, "rho");
          }
          if (l.kind == LayerKind::dropconnect) check_rate(i, l);
          cur = {l.units};
          break;
        }
        case LayerKind::conv2d: {
          if (cur.size() != 3) dim_error(i, l, "expects [C,H,W] input, got " + shape_string(cur));
          if (l.kernel == 0 || l.stride == 0 || l.units == 0) {
            dim_error(i, l, "kernel, stride and filters must be positive");
          }
          const std::size_t h = cur[1] + 2 * l.padding;
          const std::size_t w = cur[2] + 2 * l.padding;
          if (h < l.kernel || w < l.kernel) dim_error(i, l, "kernel larger than padded input");
          expect_param(i, l, l.weight, {l.units, cur[0], l.kernel, l.kernel}, "weight");
          expect_param(i, l, l.bias, {l.units}, "bias");
          cur = {l.units, (h - l.kernel) / l.stride + 1, (w - l.kernel) / l.stride + 1};
          break;
        }
        case LayerKind::maxpool2d: {
          if (cur.size() != 3) dim_error(i, l, "expects [C,H,W] input, got " + shape_string(cur));
          if (l.kernel == 0 || l.stride == 0) dim_error(i, l, "kernel and stride must be positive");
          if (cur[1] < l.kernel || cur[2] < l.kernel) dim_error(i, l, "kernel larger than input");
          cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
          break;
        }
        case LayerKind::flatten:
          cur = {shape_size(cur)};
          break;
        case LayerKind::softmax:
          if (cur.size() != 1) dim_error(i, l, "expects rank-1 input");
          break;
        case LayerKind::dropout:
          check_rate(i, l);
          break;
        case LayerKind::relu:
          break;
      }
      l.out_shape = cur;
    }
  }

  Shape input_shape_;
  std::vector<Layer<T>> layers_;
  Task task_ = Task::classification;
};

}  // namespace xunc
