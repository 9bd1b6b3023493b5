#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xunc/error.hpp"
#include "xunc/expl_uncertainty.hpp"
#include "xunc/tensor.hpp"
#include "xunc/uncertainty.hpp"

namespace xunc {

enum class ChannelAgg { abs_sum, abs_max };
enum class DeletionFill { zero, dataset_mean };
enum class InsertionReference { blur, zero };
enum class ScorerKind { mean_of_T_probs, deterministic_prob };
enum class HeatmapKind { mean, std };

inline ChannelAgg channel_agg_from_string(std::string_view s) {
  if (s == "abs_sum") return ChannelAgg::abs_sum;
  if (s == "abs_max") return ChannelAgg::abs_max;
  throw ConfigError("unknown channel_agg '" + std::string(s) + "'");
}

inline DeletionFill deletion_fill_from_string(std::string_view s) {
  if (s == "zero") return DeletionFill::zero;
  if (s == "dataset_mean") return DeletionFill::dataset_mean;
  throw ConfigError("unknown deletion_fill '" + std::string(s) + "'");
}

inline InsertionReference insertion_reference_from_string(std::string_view s) {
  if (s == "blur") return InsertionReference::blur;
  if (s == "zero") return InsertionReference::zero;
  throw ConfigError("unknown insertion_reference '" + std::string(s) + "'");
}

inline ScorerKind scorer_from_string(std::string_view s) {
  if (s == "mean_of_T_probs") return ScorerKind::mean_of_T_probs;
  if (s == "deterministic_prob") return ScorerKind::deterministic_prob;
  throw ConfigError("unknown scorer '" + std::string(s) + "'");
}

inline std::string_view to_string(HeatmapKind k) { return k == HeatmapKind::mean ? "mean" : "std"; }

struct PerturbationConfig {
  std::size_t num_steps = 100;
  DeletionFill deletion_fill = DeletionFill::zero;
  // Per-channel fill values, used with DeletionFill::dataset_mean.
  std::vector<double> fill_values;
  InsertionReference insertion_reference = InsertionReference::blur;
  double blur_sigma = 2.0;
  ChannelAgg channel_agg = ChannelAgg::abs_sum;
  ScorerKind scorer = ScorerKind::mean_of_T_probs;

  void validate() const {
    if (num_steps == 0) throw ConfigError("num_steps must be at least 1");
    if (insertion_reference == InsertionReference::blur && !(blur_sigma > 0)) {
      throw ConfigError("blur sigma must be positive");
    }
  }
};

struct Curve {
  std::vector<double> fraction;
  std::vector<double> score;
  double auc = 0.0;
};

/// Trapezoid rule over the fraction axis.
inline double auc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("curve axes differ in length");
  if (x.size() < 2) throw ArgumentError("a curve needs at least 2 points");
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2;
  return a;
}

inline double auc(const Curve& c) { return auc(c.fraction, c.score); }

namespace detail {

// Image geometry as (channels, height, width); rank-1 inputs are one row.
inline std::array<std::size_t, 3> image_dims(const Shape& s) {
  if (s.size() == 3) return {s[0], s[1], s[2]};
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 1) return {1, 1, s[0]};
  throw DimensionError("expected an image of rank 1 to 3, got " + shape_string(s));
}

}  // namespace detail

/// Spatial positions (row-major flat index) by descending importance.
/// Channels are reduced first; ties keep row-major order.
template <typename T>
std::vector<std::size_t> rank_pixels(const Tensor<T>& heatmap, ChannelAgg agg) {
  const auto [C, H, W] = detail::image_dims(heatmap.shape());
  const std::size_t P = H * W;
  std::vector<double> score(P, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < P; ++p) {
      const double v = std::abs(static_cast<double>(heatmap[c * P + p]));
      score[p] = agg == ChannelAgg::abs_sum ? score[p] + v : std::max(score[p], v);
    }
  }
  std::vector<std::size_t> order(P);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

/// Separable Gaussian blur per channel, kernel radius ceil(3 sigma),
/// borders clamped.
template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& image, double sigma) {
  if (!(sigma > 0)) throw ConfigError("blur sigma must be positive");
  const auto [C, H, W] = detail::image_dims(image.shape());
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-(i * i) / (2 * sigma * sigma));
  for (auto& v : k) v /= sum;
  auto clamp = [](int v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0, static_cast<int>(n) - 1));
  };
  std::vector<double> tmp(C * H * W);
  Tensor<T> out(image.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t base = c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          acc += k[i + r] * image[base + y * W + clamp(static_cast<int>(x) + i, W)];
        }
        tmp[base + y * W + x] = acc;
      }
    }
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          acc += k[i + r] * tmp[base + clamp(static_cast<int>(y) + i, H) * W + x];
        }
        out[base + y * W + x] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

/// Class probabilities for one input.
template <typename T>
using Scorer = std::function<Tensor<T>(const Tensor<T>&)>;

/// mean_of_T_probs averages T stochastic samples drawn from `seed` (the same
/// realizations for every call); deterministic_prob switches stochastic
/// layers off and averages ensemble members.
template <typename T>
Scorer<T> make_scorer(const UncertaintyModel<T>& um, ScorerKind kind, std::size_t T_,
                      std::uint64_t seed) {
  if (kind == ScorerKind::mean_of_T_probs) {
    auto reals = draw_realizations(um, T_, seed);
    return [&um, reals = std::move(reals)](const Tensor<T>& x) {
      std::vector<Tensor<T>> preds;
      preds.reserve(reals.size());
      for (const auto& r : reals) preds.push_back(predict_realization(um, r, x));
      return aggregate(std::move(preds)).mean;
    };
  }
  return [&um](const Tensor<T>& x) {
    std::vector<Tensor<T>> preds;
    for (const auto& m : um.members) preds.push_back(prediction_of(m, forward(m, x).output));
    return aggregate(std::move(preds)).mean;
  };
}

namespace detail {

// Walks the ranking in chunks of ceil(P / num_steps): `start` is scored at
// fraction 0, each step copies the next chunk of pixels from `target`.
template <typename T>
Curve perturbation_curve(const Scorer<T>& score, Tensor<T> start, const Tensor<T>& target,
                         const std::vector<std::size_t>& order, std::size_t class_index,
                         std::size_t num_steps) {
  const auto [C, H, W] = image_dims(target.shape());
  const std::size_t P = H * W;
  if (order.size() != P) {
    throw DimensionError("heatmap covers " + std::to_string(order.size()) +
                         " pixels, image has " + std::to_string(P));
  }
  const std::size_t chunk = (P + num_steps - 1) / num_steps;
  auto eval = [&](const Tensor<T>& img) {
    const auto probs = score(img);
    if (class_index >= probs.size()) {
      throw ArgumentError("class index " + std::to_string(class_index) + " out of range");
    }
    return static_cast<double>(probs[class_index]);
  };
  Curve c;
  c.fraction.push_back(0.0);
  c.score.push_back(eval(start));
  for (std::size_t done = 0; done < P;) {
    const std::size_t next = std::min(done + chunk, P);
    for (std::size_t k = done; k < next; ++k) {
      for (std::size_t ch = 0; ch < C; ++ch) start[ch * P + order[k]] = target[ch * P + order[k]];
    }
    done = next;
    c.fraction.push_back(static_cast<double>(done) / static_cast<double>(P));
    c.score.push_back(eval(start));
  }
  c.auc = auc(c);
  return c;
}

}  // namespace detail

template <typename T>
Tensor<T> deletion_fill_image(const Tensor<T>& image, const PerturbationConfig& cfg) {
  Tensor<T> filled(image.shape());
  if (cfg.deletion_fill == DeletionFill::dataset_mean) {
    const auto [C, H, W] = detail::image_dims(image.shape());
    if (cfg.fill_values.size() != C) {
      throw ConfigError("dataset_mean fill needs one value per channel (" + std::to_string(C) +
                        ")");
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t p = 0; p < H * W; ++p) {
        filled[c * H * W + p] = static_cast<T>(cfg.fill_values[c]);
      }
    }
  }
  return filled;
}

template <typename T>
Tensor<T> insertion_reference_image(const Tensor<T>& image, const PerturbationConfig& cfg) {
  if (cfg.insertion_reference == InsertionReference::zero) return Tensor<T>(image.shape());
  return gaussian_blur(image, cfg.blur_sigma);
}

/// Most important pixels are removed first; score falls from the intact
/// image to the fully filled one.
template <typename T>
Curve deletion_curve(const Scorer<T>& score, const Tensor<T>& image, const Tensor<T>& heatmap,
                     std::size_t class_index, const PerturbationConfig& cfg) {
  cfg.validate();
  return detail::perturbation_curve(score, image, deletion_fill_image(image, cfg),
                                    rank_pixels(heatmap, cfg.channel_agg), class_index,
                                    cfg.num_steps);
}

/// Starts from the reference image and restores the most important pixels
/// first; the last point scores the original image.
template <typename T>
Curve insertion_curve(const Scorer<T>& score, const Tensor<T>& image, const Tensor<T>& heatmap,
                      std::size_t class_index, const PerturbationConfig& cfg) {
  cfg.validate();
  return detail::perturbation_curve(score, insertion_reference_image(image, cfg), image,
                                    rank_pixels(heatmap, cfg.channel_agg), class_index,
                                    cfg.num_steps);
}

/// Class-averaged AUCs for one heatmap kind, plus the mean curves.
struct HeatmapAucs {
  double insertion = 0.0;
  double deletion = 0.0;
  Curve insertion_curve;
  Curve deletion_curve;
};

struct ClassRow {
  std::size_t label = 0;
  std::size_t count = 0;
  HeatmapAucs mean;
  HeatmapAucs std;
};

struct ClasswiseReport {
  std::string method;
  std::string uncertainty;
  std::vector<ClassRow> rows;
  std::vector<std::string> warnings;

  // Unweighted average over the reported classes.
  ClassRow average() const {
    ClassRow a;
    if (rows.empty()) return a;
    for (const auto& r : rows) {
      a.count += r.count;
      a.mean.insertion += r.mean.insertion;
      a.mean.deletion += r.mean.deletion;
      a.std.insertion += r.std.insertion;
      a.std.deletion += r.std.deletion;
    }
    const double n = static_cast<double>(rows.size());
    a.mean.insertion /= n;
    a.mean.deletion /= n;
    a.std.insertion /= n;
    a.std.deletion /= n;
    return a;
  }
};

struct ReportOptions {
  ExplanationConfig explanation;
  PerturbationConfig perturbation;
  std::size_t num_samples = 20;
  std::uint64_t seed = 0;
  std::size_t num_classes = 0;
};

namespace detail {

inline void accumulate(Curve& sum, const Curve& c) {
  if (sum.score.empty()) {
    sum = c;
    return;
  }
  for (std::size_t i = 0; i < c.score.size(); ++i) sum.score[i] += c.score[i];
}

inline void finish(Curve& sum, std::size_t n) {
  for (auto& s : sum.score) s /= static_cast<double>(n);
  sum.auc = auc(sum);
}

}  // namespace detail

/// Insertion and deletion AUCs per class, computed separately from the
/// explanation mean and std heatmaps of every image. Image i uses seed
/// derive_seed(seed, i) for both its explanations and its scorer.
template <typename T>
ClasswiseReport classwise_report(const UncertaintyModel<T>& um,
                                 const std::vector<Tensor<T>>& images,
                                 const std::vector<std::size_t>& labels,
                                 const ReportOptions& opt) {
  if (images.size() != labels.size()) {
    throw DimensionError("images and labels differ in count");
  }
  opt.perturbation.validate();
  std::size_t classes = opt.num_classes;
  for (auto l : labels) classes = std::max(classes, l + 1);

  struct Acc {
    std::size_t n = 0;
    double ins[2] = {0, 0}, del[2] = {0, 0};
    Curve ins_curve[2], del_curve[2];
  };
  std::vector<Acc> acc(classes);

  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::uint64_t s = derive_seed(opt.seed, i);
    ExplanationConfig ec = opt.explanation;
    if (ec.selector.mode == TargetMode::ground_truth) ec.selector.ground_truth_index = labels[i];
    const auto dist = explanation_distribution(um, images[i], ec, opt.num_samples, s);
    const auto st = stats(dist);
    const std::size_t target = dist.samples.front().target_index;
    const auto scorer = make_scorer(um, opt.perturbation.scorer, opt.num_samples, s);
    auto& a = acc[labels[i]];
    ++a.n;
    const Tensor<T>* maps[2] = {&st.mean, &st.std};
    for (int k = 0; k < 2; ++k) {
      const auto ic = insertion_curve(scorer, images[i], *maps[k], target, opt.perturbation);
      const auto dc = deletion_curve(scorer, images[i], *maps[k], target, opt.perturbation);
      a.ins[k] += ic.auc;
      a.del[k] += dc.auc;
      detail::accumulate(a.ins_curve[k], ic);
      detail::accumulate(a.del_curve[k], dc);
    }
  }

  ClasswiseReport rep;
  rep.method = std::string(to_string(opt.explanation.method));
  rep.uncertainty = std::string(to_string(um.config.method));
  for (std::size_t c = 0; c < classes; ++c) {
    auto& a = acc[c];
    if (a.n == 0) {
      rep.warnings.push_back("class " + std::to_string(c) + " has no images; skipped");
      continue;
    }
    ClassRow row;
    row.label = c;
    row.count = a.n;
    HeatmapAucs* out[2] = {&row.mean, &row.std};
    for (int k = 0; k < 2; ++k) {
      out[k]->insertion = a.ins[k] / static_cast<double>(a.n);
      out[k]->deletion = a.del[k] / static_cast<double>(a.n);
      detail::finish(a.ins_curve[k], a.n);
      detail::finish(a.del_curve[k], a.n);
      out[k]->insertion_curve = a.ins_curve[k];
      out[k]->deletion_curve = a.del_curve[k];
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void write_curve_csv(const std::filesystem::path& path, const Curve& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "fraction,score\n";
  for (std::size_t i = 0; i < c.fraction.size(); ++i) {
    out << format_double(c.fraction[i]) << ',' << format_double(c.score[i]) << '\n';
  }
}

inline const char* report_header() {
  return "method,uncertainty,class,insertion_mean,insertion_std,deletion_mean,deletion_std";
}

inline void append_report_rows(std::ostream& out, const ClasswiseReport& rep) {
  auto line = [&](const std::string& label, const ClassRow& r) {
    out << rep.method << ',' << rep.uncertainty << ',' << label << ','
        << format_double(r.mean.insertion) << ',' << format_double(r.std.insertion) << ','
        << format_double(r.mean.deletion) << ',' << format_double(r.std.deletion) << '\n';
  };
  for (const auto& r : rep.rows) line(std::to_string(r.label), r);
  line("average", rep.average());
}

inline void write_report_csv(const std::filesystem::path& path,
                             const std::vector<ClasswiseReport>& reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << report_header() << '\n';
  for (const auto& r : reports) append_report_rows(out, r);
}

/// Line plot of one or more curves on the unit square.
inline std::string curves_svg(const std::vector<std::pair<std::string, Curve>>& curves,
                              const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};
  const double w = 360, h = 260, m = 40;
  double lo = 0, hi = 1;
  for (const auto& [name, c] : curves) {
    for (double s : c.score) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  auto px = [&](double f) { return m + f * (w - 2 * m); };
  auto py = [&](double s) { return h - m - (s - lo) / (hi - lo) * (h - 2 * m); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << m << "\" y=\"20\">" << title << "</text>\n"
     << "<polyline fill=\"none\" stroke=\"black\" points=\"" << px(0) << ',' << py(hi) << ' '
     << px(0) << ',' << py(lo) << ' ' << px(1) << ',' << py(lo) << "\"/>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& [name, c] = curves[i];
    const char* col = colors[i % 5];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < c.fraction.size(); ++k) {
      os << format_double(px(c.fraction[k])) << ',' << format_double(py(c.score[k])) << ' ';
    }
    os << "\"/>\n<text x=\"" << w - m - 110 << "\" y=\"" << 35 + 14 * i << "\" fill=\"" << col
       << "\">" << name << " (auc " << std::fixed << std::setprecision(3) << c.auc
       << std::defaultfloat << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace xunc
