#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "xunc/binary_io.hpp"
#include "xunc/error.hpp"
#include "xunc/model.hpp"
#include "xunc/random.hpp"
#include "xunc/tensor.hpp"

namespace xunc {

enum class NormKind { none, standardize, pixel_scale };

/// Enough to undo whatever was applied to the raw inputs.
struct Normalization {
  NormKind kind = NormKind::none;
  std::vector<double> mean;
  std::vector<double> std;
  double scale = 1.0;
};

template <typename T>
struct Dataset {
  std::vector<Tensor<T>> inputs;
  // Class indices (stored as doubles) or regression targets.
  std::vector<double> targets;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  Normalization norm;

  std::size_t size() const { return inputs.size(); }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double v = targets[i];
      if (!(v >= 0) || v != std::floor(v)) {
        throw ConfigError("row " + std::to_string(i) + ": target " + std::to_string(v) +
                          " is not a class index");
      }
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  std::size_t num_classes() const {
    if (!class_names.empty()) return class_names.size();
    std::size_t n = 0;
    for (auto l : labels()) n = std::max(n, l + 1);
    return n;
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.feature_names = feature_names;
    d.class_names = class_names;
    d.norm = norm;
    for (auto i : idx) {
      d.inputs.push_back(inputs.at(i));
      d.targets.push_back(targets.at(i));
    }
    return d;
  }

  void validate() const {
    if (inputs.size() != targets.size()) {
      throw DimensionError("dataset has " + std::to_string(inputs.size()) + " inputs and " +
                           std::to_string(targets.size()) + " targets");
    }
    for (const auto& x : inputs) {
      if (x.shape() != inputs.front().shape()) throw DimensionError("inputs differ in shape");
    }
  }
};

namespace detail {

// One RFC-4180 record; quoted fields may contain commas and doubled quotes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw FormatError("row " + std::to_string(row) + ": unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Tabular CSV with a header row. Features are every other column in header
/// order. Row numbers in errors count the header as row 1.
template <typename T>
Dataset<T> load_csv(const std::filesystem::path& path, const std::string& target_column) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("dataset not found: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty CSV");
  auto header = detail::split_csv_line(line, 1);
  for (auto& h : header) h = std::string(detail::trim(h));
  const auto it = std::find(header.begin(), header.end(), target_column);
  if (it == header.end()) {
    throw ConfigError(path.string() + ": missing target column \"" + target_column + "\"");
  }
  const std::size_t tcol = static_cast<std::size_t>(it - header.begin());
  Dataset<T> ds;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c != tcol) ds.feature_names.push_back(header[c]);
  }
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line, row);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header.size()));
    }
    Tensor<T> x({header.size() - 1});
    std::size_t k = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto v = detail::parse_double(cells[c]);
      if (!v) {
        throw FormatError(path.string() + ": row " + std::to_string(row) + ", column \"" +
                          header[c] + "\": cannot parse '" + cells[c] + "'");
      }
      if (c == tcol) {
        ds.targets.push_back(*v);
      } else {
        x[k++] = static_cast<T>(*v);
      }
    }
    ds.inputs.push_back(std::move(x));
  }
  if (ds.inputs.empty()) throw FormatError(path.string() + ": no data rows");
  return ds;
}

/// Per-feature z-scores computed over `ds` (population std; constant
/// features keep std 1).
template <typename T>
Normalization fit_standardizer(const Dataset<T>& ds) {
  if (ds.inputs.empty()) throw ArgumentError("cannot standardize an empty dataset");
  const std::size_t d = ds.inputs.front().size();
  Normalization n;
  n.kind = NormKind::standardize;
  n.mean.assign(d, 0.0);
  n.std.assign(d, 0.0);
  for (const auto& x : ds.inputs) {
    for (std::size_t j = 0; j < d; ++j) n.mean[j] += x[j];
  }
  for (auto& m : n.mean) m /= static_cast<double>(ds.size());
  for (const auto& x : ds.inputs) {
    for (std::size_t j = 0; j < d; ++j) n.std[j] += (x[j] - n.mean[j]) * (x[j] - n.mean[j]);
  }
  for (auto& s : n.std) {
    s = std::sqrt(s / static_cast<double>(ds.size()));
    if (s == 0.0) s = 1.0;
  }
  return n;
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const Normalization& n) {
  Tensor<T> out = x;
  if (n.kind == NormKind::standardize) {
    for (std::size_t j = 0; j < x.size(); ++j) {
      out[j] = static_cast<T>((x[j] - n.mean[j]) / n.std[j]);
    }
  } else if (n.kind == NormKind::pixel_scale) {
    for (auto& v : out.data()) v = static_cast<T>(v * n.scale);
  }
  return out;
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& x, const Normalization& n) {
  Tensor<T> out = x;
  if (n.kind == NormKind::standardize) {
    for (std::size_t j = 0; j < x.size(); ++j) {
      out[j] = static_cast<T>(x[j] * n.std[j] + n.mean[j]);
    }
  } else if (n.kind == NormKind::pixel_scale) {
    for (auto& v : out.data()) v = static_cast<T>(v / n.scale);
  }
  return out;
}

template <typename T>
void apply_normalization(Dataset<T>& ds, const Normalization& n) {
  for (auto& x : ds.inputs) x = normalize(x, n);
  ds.norm = n;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Shuffled, disjoint index sets covering 0..n-1; the test set takes what
/// the train and validation fractions leave.
inline Split split_indices(std::size_t n, double train_fraction, double val_fraction,
                           std::uint64_t seed) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, 0x5b17);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  const auto ntrain = static_cast<std::size_t>(std::floor(train_fraction * n));
  const auto nval = std::min(n - ntrain, static_cast<std::size_t>(std::floor(val_fraction * n)));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + ntrain);
  s.val.assign(idx.begin() + ntrain, idx.begin() + ntrain + nval);
  s.test.assign(idx.begin() + ntrain + nval, idx.end());
  return s;
}

// ---- Netpbm ----

struct RawImage {
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

namespace detail {

inline std::size_t pnm_number(const std::vector<std::uint8_t>& b, std::size_t& pos,
                              const std::string& what) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t v = 0;
  const std::size_t start = pos;
  while (pos < b.size() && std::isdigit(b[pos])) v = v * 10 + (b[pos++] - '0');
  if (pos == start) throw FormatError(what + ": malformed header");
  return v;
}

}  // namespace detail

/// Binary 8-bit PGM (P5) or PPM (P6).
inline RawImage read_pnm(const std::filesystem::path& path) {
  const auto b = io::read_file(path);
  const std::string what = path.string();
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6')) {
    throw FormatError(what + ": bad magic number (expected P5 or P6)");
  }
  RawImage img;
  img.channels = b[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  img.width = detail::pnm_number(b, pos, what);
  img.height = detail::pnm_number(b, pos, what);
  const std::size_t maxval = detail::pnm_number(b, pos, what);
  if (img.width == 0 || img.height == 0) throw FormatError(what + ": zero image size");
  if (maxval == 0 || maxval > 255) throw FormatError(what + ": only 8-bit images are supported");
  if (pos >= b.size() || !std::isspace(b[pos])) throw FormatError(what + ": malformed header");
  ++pos;
  const std::size_t n = img.channels * img.width * img.height;
  if (b.size() - pos < n) throw FormatError(what + ": truncated pixel data");
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos),
                    b.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline void write_pnm(const std::filesystem::path& path, const RawImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("PNM needs 1 or 3 channels");
  std::string head = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                     std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(head.begin(), head.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  io::write_file(path, bytes);
}

/// [C,H,W] tensor with values in [0,1] as an 8-bit PGM/PPM.
template <typename T>
void write_image(const std::filesystem::path& path, const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("expected a [C,H,W] image");
  RawImage img{x.dim(0), x.dim(1), x.dim(2), {}};
  const std::size_t P = img.height * img.width;
  img.pixels.resize(img.channels * P);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t c = 0; c < img.channels; ++c) {
      const double v = std::clamp(static_cast<double>(x[c * P + p]), 0.0, 1.0);
      img.pixels[p * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255));
    }
  }
  write_pnm(path, img);
}

/// Class subdirectories (sorted by name, label = position) of PGM/PPM
/// files. Pixels become [C,H,W] tensors scaled by 1/255.
template <typename T>
Dataset<T> load_images(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("dataset not found: " + dir.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw FormatError(dir.string() + ": no class subdirectories");
  Dataset<T> ds;
  ds.norm.kind = NormKind::pixel_scale;
  ds.norm.scale = 1.0 / 255.0;
  Shape shape;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    ds.class_names.push_back(classes[label].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[label])) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto img = read_pnm(f);
      const Shape s{img.channels, img.height, img.width};
      if (shape.empty()) shape = s;
      if (s != shape) {
        throw FormatError(f.string() + ": image is " + shape_string(s) + ", expected " +
                          shape_string(shape));
      }
      Tensor<T> x(s);
      const std::size_t P = img.height * img.width;
      for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t c = 0; c < img.channels; ++c) {
          x[c * P + p] = static_cast<T>(img.pixels[p * img.channels + c] / 255.0);
        }
      }
      ds.inputs.push_back(std::move(x));
      ds.targets.push_back(static_cast<double>(label));
    }
  }
  if (ds.inputs.empty()) throw FormatError(dir.string() + ": no images found");
  return ds;
}

// ---- XTEN tensors ----
//
// "XTEN", u16 version (1), u16 rank, rank x u32 dims, f32 payload; all
// little-endian, row-major.

inline constexpr std::uint16_t kTensorVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_tensor(const Tensor<T>& t) {
  io::ByteWriter w;
  w.bytes("XTEN", 4);
  w.u16(kTensorVersion);
  w.u16(static_cast<std::uint16_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (auto v : t.data()) w.f32(static_cast<float>(v));
  return w.buffer();
}

template <typename T>
Tensor<T> decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string_view(magic, 4) != "XTEN") throw FormatError(what + ": not an XTEN file");
  if (const auto v = r.u16(); v != kTensorVersion) {
    throw FormatError(what + ": unsupported XTEN version " + std::to_string(v));
  }
  const std::size_t rank = r.u16();
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  const std::size_t n = shape_size(shape);
  if (r.remaining() != 4 * n) {
    throw FormatError(what + (r.remaining() < 4 * n ? ": truncated file" : ": trailing bytes"));
  }
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(r.f32());
  try {
    return Tensor<T>(std::move(shape), std::move(data));
  } catch (const DimensionError& e) {
    throw FormatError(what + ": " + e.what());
  }
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  io::write_file(path, encode_tensor(t));
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  return decode_tensor<T>(io::read_file(path), path.string());
}

// ---- heatmap export ----

enum class HeatmapNorm { minmax, symmetric };

inline HeatmapNorm heatmap_norm_from_string(std::string_view s) {
  if (s == "minmax") return HeatmapNorm::minmax;
  if (s == "symmetric") return HeatmapNorm::symmetric;
  throw ConfigError("unknown heatmap normalization '" + std::string(s) + "'");
}

/// The value range mapped onto 0..65535.
struct HeatmapSidecar {
  HeatmapNorm norm = HeatmapNorm::minmax;
  double min = 0.0;
  double max = 0.0;
  std::size_t width = 0, height = 0;
};

/// Sums channels so a [C,H,W] map becomes [H,W]; rank-1 maps become one row.
template <typename T>
Tensor<T> collapse_channels(const Tensor<T>& h) {
  if (h.rank() == 2) return h;
  if (h.rank() == 1) return h.reshaped({1, h.size()});
  if (h.rank() != 3) throw DimensionError("heatmap must have rank 1 to 3");
  const std::size_t P = h.dim(1) * h.dim(2);
  Tensor<T> out({h.dim(1), h.dim(2)});
  for (std::size_t c = 0; c < h.dim(0); ++c) {
    for (std::size_t p = 0; p < P; ++p) out[p] += h[c * P + p];
  }
  return out;
}

inline std::filesystem::path sidecar_path(std::filesystem::path p) {
  return p.replace_extension(".json");
}

/// 16-bit PGM plus a JSON sidecar (same stem) holding the mapped range.
/// A constant map is all zeros under minmax and mid-gray under symmetric.
template <typename T>
HeatmapSidecar export_heatmap(const std::filesystem::path& path, const Tensor<T>& heatmap,
                              HeatmapNorm norm) {
  const auto h = collapse_channels(heatmap);
  if (!h.all_finite()) throw NumericalError("heatmap contains non-finite values");
  HeatmapSidecar sc;
  sc.norm = norm;
  sc.height = h.dim(0);
  sc.width = h.dim(1);
  const auto [lo, hi] = std::minmax_element(h.data().begin(), h.data().end());
  if (norm == HeatmapNorm::minmax) {
    sc.min = *lo;
    sc.max = *hi;
  } else {
    const double a = std::max(std::abs(static_cast<double>(*lo)), std::abs(static_cast<double>(*hi)));
    sc.min = -a;
    sc.max = a;
  }
  const double span = sc.max - sc.min;
  std::string head = "P5\n" + std::to_string(sc.width) + " " + std::to_string(sc.height) +
                     "\n65535\n";
  std::vector<std::uint8_t> bytes(head.begin(), head.end());
  for (auto v : h.data()) {
    std::uint16_t q;
    if (span > 0) {
      q = static_cast<std::uint16_t>(std::lround((v - sc.min) / span * 65535.0));
    } else {
      q = norm == HeatmapNorm::minmax ? 0 : 32768;
    }
    bytes.push_back(static_cast<std::uint8_t>(q >> 8));  // Netpbm is big-endian
    bytes.push_back(static_cast<std::uint8_t>(q & 0xff));
  }
  io::write_file(path, bytes);
  nlohmann::ordered_json j;
  j["norm"] = norm == HeatmapNorm::minmax ? "minmax" : "symmetric";
  j["min"] = sc.min;
  j["max"] = sc.max;
  j["width"] = sc.width;
  j["height"] = sc.height;
  io::write_text(sidecar_path(path), j.dump(2) + "\n");
  return sc;
}

/// Inverse of export_heatmap up to quantization.
template <typename T>
Tensor<T> load_heatmap(const std::filesystem::path& path) {
  const auto b = io::read_file(path);
  const std::string what = path.string();
  if (b.size() < 2 || b[0] != 'P' || b[1] != '5') throw FormatError(what + ": not a PGM");
  std::size_t pos = 2;
  const std::size_t w = detail::pnm_number(b, pos, what);
  const std::size_t h = detail::pnm_number(b, pos, what);
  if (detail::pnm_number(b, pos, what) != 65535) throw FormatError(what + ": not 16-bit");
  ++pos;
  if (b.size() - pos != 2 * w * h) throw FormatError(what + ": truncated pixel data");
  std::ifstream in(sidecar_path(path));
  if (!in) throw FormatError(what + ": missing sidecar");
  const auto j = nlohmann::json::parse(in);
  const double lo = j.at("min").get<double>(), hi = j.at("max").get<double>();
  const bool minmax = j.at("norm").get<std::string>() == "minmax";
  Tensor<T> out({h, w});
  for (std::size_t i = 0; i < w * h; ++i) {
    const unsigned q = (b[pos + 2 * i] << 8) | b[pos + 2 * i + 1];
    if (hi > lo) {
      out[i] = static_cast<T>(lo + (hi - lo) * q / 65535.0);
    } else {
      out[i] = static_cast<T>(minmax ? lo : 0.0);
    }
  }
  return out;
}

// ---- synthetic data ----

/// Two-class 8x8 grayscale task: a bright 3x3 square in the left half
/// (class 0) or the right half (class 1) of a dim, noisy background.
template <typename T>
Dataset<T> synthetic_squares(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5a);
  std::uniform_real_distribution<double> bg(0.0, 0.3), fg(0.7, 1.0);
  std::uniform_int_distribution<int> row(0, 5), col(0, 1), cls(0, 1);
  Dataset<T> ds;
  ds.class_names = {"left", "right"};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = cls(rng);
    Tensor<T> x({1, 8, 8});
    for (auto& v : x.data()) v = static_cast<T>(bg(rng));
    const int r0 = row(rng), c0 = col(rng) + (label == 0 ? 0 : 4);
    for (int r = r0; r < r0 + 3; ++r) {
      for (int c = c0; c < c0 + 3; ++c) x[static_cast<std::size_t>(r * 8 + c)] = static_cast<T>(fg(rng));
    }
    ds.inputs.push_back(std::move(x));
    ds.targets.push_back(label);
  }
  return ds;
}

}  // namespace xunc
