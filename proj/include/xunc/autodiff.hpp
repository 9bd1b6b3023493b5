#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "xunc/error.hpp"
#include "xunc/model.hpp"
#include "xunc/random.hpp"
#include "xunc/tensor.hpp"

namespace xunc {

enum class Mode { deterministic, stochastic };
enum class BackwardRule { standard, guided };

/// Stochastic state drawn for one layer during one forward pass.
///
/// Empty members mean "no noise": a deterministic pass uses an empty
/// LayerNoise for every layer.
template <typename T>
struct LayerNoise {
  // dropout: per-activation scale (0 or 1/(1-rate)).
  // dropconnect: per-weight scale with the weight's layout.
  std::vector<T> mask;
  // flipout_dense: shared standard-normal weight noise [out, in] and the
  // per-example random sign vectors.
  std::vector<T> eps;
  std::vector<T> sign_in;
  std::vector<T> sign_out;

  bool empty() const { return mask.empty() && eps.empty(); }
  friend bool operator==(const LayerNoise&, const LayerNoise&) = default;
};

template <typename T>
using Noise = std::vector<LayerNoise<T>>;

/// Everything a backward pass needs from the forward pass that produced it.
template <typename T>
struct BackwardTape {
  // inputs[l] is the activation entering layer l; inputs.size() == layers.
  std::vector<Tensor<T>> inputs;
  // Per-layer stochastic state actually used.
  Noise<T> noise;
  // Flat input index chosen by each maxpool output element.
  std::vector<std::vector<std::size_t>> pool_index;
  // outputs of every layer; outputs.back() is the model output.
  std::vector<Tensor<T>> outputs;

  const Tensor<T>& output() const { return outputs.back(); }
};

template <typename T>
struct ForwardResult {
  Tensor<T> output;
  BackwardTape<T> tape;
};

// Per-layer parameter gradients, same slots as Layer::{weight, bias, rho}.
template <typename T>
struct LayerGrads {
  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> rho;
};

template <typename T>
struct BackwardResult {
  Tensor<T> input_grad;
  std::vector<LayerGrads<T>> param_grads;
};

namespace detail {

template <typename T>
std::vector<T> sign_vector(std::size_t n, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<T> s(n);
  for (auto& v : s) v = coin(rng) ? T{1} : T{-1};
  return s;
}

template <typename T>
std::vector<T> keep_mask(std::size_t n, double rate, Rng& rng) {
  std::vector<T> m(n);
  if (rate <= 0.0) {
    std::fill(m.begin(), m.end(), T{1});
    return m;
  }
  std::bernoulli_distribution drop(rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : m) v = drop(rng) ? T{0} : scale;
  return m;
}

}  // namespace detail

/// Draws fresh noise for every stochastic layer of `model`.
template <typename T>
Noise<T> draw_noise(const Model<T>& model, Rng& rng) {
  Noise<T> noise(model.num_layers());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.layer(i);
    auto& n = noise[i];
    switch (l.kind) {
      case LayerKind::dropout:
        n.mask = detail::keep_mask<T>(shape_size(l.in_shape), l.rate, rng);
        break;
      case LayerKind::dropconnect:
        n.mask = detail::keep_mask<T>(l.weight.size(), l.rate, rng);
        break;
      case LayerKind::flipout_dense:
        n.eps.resize(l.weight.size());
        for (auto& e : n.eps) e = static_cast<T>(normal(rng));
        n.sign_in = detail::sign_vector<T>(l.in_shape[0], rng);
        n.sign_out = detail::sign_vector<T>(l.units, rng);
        break;
      default:
        break;
    }
  }
  return noise;
}

/// Redraws the per-example part of `noise` (dropout/dropconnect masks and
/// flipout sign vectors) while keeping the shared flipout weight noise.
template <typename T>
void redraw_per_example(const Model<T>& model, Noise<T>& noise, Rng& rng) {
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.layer(i);
    auto& n = noise.at(i);
    switch (l.kind) {
      case LayerKind::dropout:
        n.mask = detail::keep_mask<T>(shape_size(l.in_shape), l.rate, rng);
        break;
      case LayerKind::dropconnect:
        n.mask = detail::keep_mask<T>(l.weight.size(), l.rate, rng);
        break;
      case LayerKind::flipout_dense:
        n.sign_in = detail::sign_vector<T>(l.in_shape[0], rng);
        n.sign_out = detail::sign_vector<T>(l.units, rng);
        break;
      default:
        break;
    }
  }
}

namespace detail {

template <typename T>
Tensor<T> dense_forward(const Layer<T>& l, const Tensor<T>& x,
                        const LayerNoise<T>& n) {
  const std::size_t out = l.units, in = x.size();
  Tensor<T> y({out});
  const auto& w = l.weight.data();
  const bool masked = l.kind == LayerKind::dropconnect && !n.mask.empty();
  for (std::size_t o = 0; o < out; ++o) {
    T acc = l.bias[o];
    const std::size_t row = o * in;
    if (masked) {
      for (std::size_t j = 0; j < in; ++j) acc += w[row + j] * n.mask[row + j] * x[j];
    } else {
      for (std::size_t j = 0; j < in; ++j) acc += w[row + j] * x[j];
    }
    y[o] = acc;
  }
  if (l.kind == LayerKind::flipout_dense && !n.eps.empty()) {
    // y += sign_out * ((softplus(rho) * eps) @ (x * sign_in))
    for (std::size_t o = 0; o < out; ++o) {
      T acc{0};
      const std::size_t row = o * in;
      for (std::size_t j = 0; j < in; ++j) {
        acc += softplus(l.rho[row + j]) * n.eps[row + j] * x[j] * n.sign_in[j];
      }
      y[o] += n.sign_out[o] * acc;
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv_forward(const Layer<T>& l, const Tensor<T>& x) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t F = l.units, K = l.kernel, S = l.stride, P = l.padding;
  const std::size_t Ho = l.out_shape[1], Wo = l.out_shape[2];
  Tensor<T> y({F, Ho, Wo});
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t oi = 0; oi < Ho; ++oi) {
      for (std::size_t oj = 0; oj < Wo; ++oj) {
        T acc = l.bias[f];
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t ki = 0; ki < K; ++ki) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * S + ki) -
                                      static_cast<std::ptrdiff_t>(P);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kj = 0; kj < K; ++kj) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * S + kj) -
                                        static_cast<std::ptrdiff_t>(P);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += l.weight[((f * C + c) * K + ki) * K + kj] *
                     x[(c * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)];
            }
          }
        }
        y[(f * Ho + oi) * Wo + oj] = acc;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool_forward(const Layer<T>& l, const Tensor<T>& x,
                          std::vector<std::size_t>& index) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t K = l.kernel, S = l.stride;
  const std::size_t Ho = l.out_shape[1], Wo = l.out_shape[2];
  Tensor<T> y({C, Ho, Wo});
  index.assign(y.size(), 0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oi = 0; oi < Ho; ++oi) {
      for (std::size_t oj = 0; oj < Wo; ++oj) {
        // First maximal element in row-major window order wins ties.
        std::size_t best = (c * H + oi * S) * W + oj * S;
        for (std::size_t ki = 0; ki < K; ++ki) {
          for (std::size_t kj = 0; kj < K; ++kj) {
            const std::size_t idx = (c * H + oi * S + ki) * W + oj * S + kj;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (c * Ho + oi) * Wo + oj;
        y[o] = x[best];
        index[o] = best;
      }
    }
  }
  return y;
}

template <typename T>
void check_noise(const Model<T>& model, const Noise<T>& noise) {
  if (noise.size() != model.num_layers()) {
    throw ConsistencyError("noise record has " + std::to_string(noise.size()) +
                           " layers, model has " + std::to_string(model.num_layers()));
  }
  for (std::size_t i = 0; i < noise.size(); ++i) {
    const auto& l = model.layer(i);
    const auto& n = noise[i];
    if (n.empty()) continue;
    bool ok = true;
    if (l.kind == LayerKind::dropout) ok = n.mask.size() == shape_size(l.in_shape);
    else if (l.kind == LayerKind::dropconnect) ok = n.mask.size() == l.weight.size();
    else if (l.kind == LayerKind::flipout_dense)
      ok = n.eps.size() == l.weight.size() && n.sign_in.size() == l.in_shape[0] &&
           n.sign_out.size() == l.units;
    else ok = false;
    if (!ok) {
      throw ConsistencyError("noise record does not fit layer " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// Runs the model on one example with the given per-layer noise (empty
/// entries mean deterministic behaviour for that layer).
template <typename T>
ForwardResult<T> forward_with_noise(const Model<T>& model, const Tensor<T>& input,
                                    Noise<T> noise) {
  if (input.shape() != model.input_shape()) {
    throw DimensionError("layer 0: input shape " + shape_string(input.shape()) +
                         " does not match model input " +
                         shape_string(model.input_shape()));
  }
  detail::check_noise(model, noise);
  ForwardResult<T> r;
  auto& tape = r.tape;
  const std::size_t L = model.num_layers();
  tape.inputs.reserve(L);
  tape.outputs.reserve(L);
  tape.pool_index.resize(L);
  Tensor<T> cur = input;
  for (std::size_t i = 0; i < L; ++i) {
    const auto& l = model.layer(i);
    const auto& n = noise[i];
    tape.inputs.push_back(cur);
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::dropconnect:
      case LayerKind::flipout_dense:
        cur = detail::dense_forward(l, cur, n);
        break;
      case LayerKind::conv2d:
        cur = detail::conv_forward(l, cur);
        break;
      case LayerKind::maxpool2d:
        cur = detail::maxpool_forward(l, cur, tape.pool_index[i]);
        break;
      case LayerKind::relu:
        for (auto& v : cur.data()) v = v > T{0} ? v : T{0};
        break;
      case LayerKind::flatten:
        cur = cur.reshaped({cur.size()});
        break;
      case LayerKind::softmax:
        cur = softmax(cur);
        break;
      case LayerKind::dropout:
        if (!n.mask.empty()) {
          for (std::size_t k = 0; k < cur.size(); ++k) cur[k] *= n.mask[k];
        }
        break;
    }
    tape.outputs.push_back(cur);
  }
  if (L == 0) tape.outputs.push_back(cur);
  tape.noise = std::move(noise);
  r.output = std::move(cur);
  return r;
}

/// Deterministic mode disables every stochastic layer; stochastic mode draws
/// fresh masks/noise from `rng`, which must then be non-null.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& input,
                         Mode mode = Mode::deterministic, Rng* rng = nullptr) {
  if (mode == Mode::stochastic) {
    if (!rng) throw ArgumentError("stochastic forward requires an RNG");
    return forward_with_noise(model, input, draw_noise(model, *rng));
  }
  return forward_with_noise(model, input, Noise<T>(model.num_layers()));
}

/// Re-runs a forward pass with the noise recorded in `tape`.
template <typename T>
ForwardResult<T> replay(const Model<T>& model, const Tensor<T>& input,
                        const BackwardTape<T>& tape) {
  return forward_with_noise(model, input, tape.noise);
}

/// Reverse pass from the output of layer `end - 1` back to the input.
///
/// `seed` is the gradient with respect to that layer's output. The guided
/// rule changes only relu layers: a signal passes where both the forward
/// input and the incoming signal are positive.
template <typename T>
BackwardResult<T> backward_from(const Model<T>& model, const BackwardTape<T>& tape,
                                std::size_t end, const Tensor<T>& seed,
                                BackwardRule rule = BackwardRule::standard,
                                bool want_param_grads = true) {
  const std::size_t L = model.num_layers();
  if (tape.inputs.size() != L || tape.noise.size() != L ||
      tape.outputs.size() != std::max<std::size_t>(L, 1)) {
    throw ConsistencyError("tape records " + std::to_string(tape.inputs.size()) +
                           " layers but model has " + std::to_string(L));
  }
  for (std::size_t i = 0; i < L; ++i) {
    if (tape.inputs[i].shape() != model.layer(i).in_shape) {
      throw ConsistencyError("tape activation " + std::to_string(i) +
                             " does not match the model's layer shape");
    }
  }
  if (end > L) throw ArgumentError("backward end layer out of range");
  const Shape& seed_shape = end == 0 ? model.input_shape() : model.layer(end - 1).out_shape;
  if (seed.shape() != seed_shape) {
    throw DimensionError("backward seed shape " + shape_string(seed.shape()) +
                         " expected " + shape_string(seed_shape));
  }

  BackwardResult<T> r;
  if (want_param_grads) {
    r.param_grads.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
      const auto& l = model.layer(i);
      if (l.weight.size()) r.param_grads[i].weight = Tensor<T>(l.weight.shape());
      if (l.bias.size()) r.param_grads[i].bias = Tensor<T>(l.bias.shape());
      if (l.rho.size()) r.param_grads[i].rho = Tensor<T>(l.rho.shape());
    }
  }

  Tensor<T> g = seed;
  for (std::size_t step = end; step-- > 0;) {
    const auto& l = model.layer(step);
    const auto& x = tape.inputs[step];
    const auto& n = tape.noise[step];
    Tensor<T> gin(x.shape());
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::dropconnect:
      case LayerKind::flipout_dense: {
        const std::size_t out = l.units, in = x.size();
        const bool masked = l.kind == LayerKind::dropconnect && !n.mask.empty();
        const bool flip = l.kind == LayerKind::flipout_dense && !n.eps.empty();
        auto* gw = want_param_grads ? &r.param_grads[step].weight : nullptr;
        auto* gb = want_param_grads ? &r.param_grads[step].bias : nullptr;
        auto* grho = want_param_grads ? &r.param_grads[step].rho : nullptr;
        for (std::size_t o = 0; o < out; ++o) {
          const T go = g[o];
          const std::size_t row = o * in;
          if (gb) (*gb)[o] += go;
          for (std::size_t j = 0; j < in; ++j) {
            const T m = masked ? n.mask[row + j] : T{1};
            gin[j] += l.weight[row + j] * m * go;
            if (gw) (*gw)[row + j] += go * m * x[j];
          }
          if (flip) {
            const T gs = go * n.sign_out[o];
            for (std::size_t j = 0; j < in; ++j) {
              const T rho = l.rho[row + j];
              const T xs = x[j] * n.sign_in[j];
              gin[j] += softplus(rho) * n.eps[row + j] * gs * n.sign_in[j];
              if (grho) (*grho)[row + j] += gs * n.eps[row + j] * xs * sigmoid(rho);
            }
          }
        }
        break;
      }
      case LayerKind::conv2d: {
        const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
        const std::size_t F = l.units, K = l.kernel, S = l.stride, P = l.padding;
        const std::size_t Ho = l.out_shape[1], Wo = l.out_shape[2];
        auto* gw = want_param_grads ? &r.param_grads[step].weight : nullptr;
        auto* gb = want_param_grads ? &r.param_grads[step].bias : nullptr;
        for (std::size_t f = 0; f < F; ++f) {
          for (std::size_t oi = 0; oi < Ho; ++oi) {
            for (std::size_t oj = 0; oj < Wo; ++oj) {
              const T go = g[(f * Ho + oi) * Wo + oj];
              if (gb) (*gb)[f] += go;
              for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t ki = 0; ki < K; ++ki) {
                  const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * S + ki) -
                                            static_cast<std::ptrdiff_t>(P);
                  if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kj = 0; kj < K; ++kj) {
                    const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * S + kj) -
                                              static_cast<std::ptrdiff_t>(P);
                    if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                    const std::size_t xi = (c * H + static_cast<std::size_t>(ii)) * W +
                                           static_cast<std::size_t>(jj);
                    const std::size_t wi = ((f * C + c) * K + ki) * K + kj;
                    gin[xi] += l.weight[wi] * go;
                    if (gw) (*gw)[wi] += x[xi] * go;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::maxpool2d: {
        const auto& idx = tape.pool_index[step];
        for (std::size_t o = 0; o < idx.size(); ++o) gin[idx[o]] += g[o];
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < x.size(); ++k) {
          const bool live = x[k] > T{0};
          if (rule == BackwardRule::guided) {
            gin[k] = (live && g[k] > T{0}) ? g[k] : T{0};
          } else {
            gin[k] = live ? g[k] : T{0};
          }
        }
        break;
      case LayerKind::flatten:
        gin = g.reshaped(x.shape());
        break;
      case LayerKind::softmax: {
        const auto& y = tape.outputs[step];
        T dot{0};
        for (std::size_t k = 0; k < y.size(); ++k) dot += y[k] * g[k];
        for (std::size_t k = 0; k < y.size(); ++k) gin[k] = y[k] * (g[k] - dot);
        break;
      }
      case LayerKind::dropout:
        for (std::size_t k = 0; k < x.size(); ++k) {
          gin[k] = n.mask.empty() ? g[k] : g[k] * n.mask[k];
        }
        break;
    }
    g = std::move(gin);
  }
  r.input_grad = std::move(g);
  return r;
}

/// Reverse pass seeded at the model output.
template <typename T>
BackwardResult<T> backward(const Model<T>& model, const BackwardTape<T>& tape,
                           const Tensor<T>& output_seed,
                           BackwardRule rule = BackwardRule::standard) {
  return backward_from(model, tape, model.num_layers(), output_seed, rule, true);
}

// Pre-softmax output recorded in a tape.
template <typename T>
const Tensor<T>& logits_of(const Model<T>& model, const BackwardTape<T>& tape) {
  const std::size_t k = model.logit_layers();
  return k == 0 ? tape.inputs.front() : tape.outputs[k - 1];
}

}  // namespace xunc
