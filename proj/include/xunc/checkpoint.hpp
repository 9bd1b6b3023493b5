#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xunc/binary_io.hpp"
#include "xunc/error.hpp"
#include "xunc/model.hpp"

namespace xunc {

// XMDL model checkpoint, all integers little-endian:
//
//   "XMDL" | u16 version | u8 task | u16 input rank | u32 dims...
//   u32 layer count, then per layer:
//     u8 kind | u32 units | u32 kernel | u32 stride | u32 padding | f32 rate
//     u8 tensor count, then per tensor:
//       u8 slot (0 weight, 1 bias, 2 rho) | u16 rank | u32 dims... | f32 data...
inline constexpr std::array<char, 4> kModelMagic{'X', 'M', 'D', 'L'};
inline constexpr std::uint16_t kModelVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_model(const Model<T>& model) {
  io::ByteWriter w;
  w.bytes(kModelMagic.data(), kModelMagic.size());
  w.u16(kModelVersion);
  w.u8(static_cast<std::uint8_t>(model.task()));
  w.u16(static_cast<std::uint16_t>(model.input_shape().size()));
  for (auto d : model.input_shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(model.num_layers()));
  for (const auto& l : model.layers()) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.units));
    w.u32(static_cast<std::uint32_t>(l.kernel));
    w.u32(static_cast<std::uint32_t>(l.stride));
    w.u32(static_cast<std::uint32_t>(l.padding));
    w.f32(l.rate);
    const std::array<const Tensor<T>*, 3> slots{&l.weight, &l.bias, &l.rho};
    std::uint8_t count = 0;
    for (const auto* t : slots) count += t->size() ? 1 : 0;
    w.u8(count);
    for (std::uint8_t s = 0; s < 3; ++s) {
      const auto& t = *slots[s];
      if (!t.size()) continue;
      w.u8(s);
      w.u16(static_cast<std::uint16_t>(t.rank()));
      for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
      for (auto v : t.data()) w.f32(static_cast<float>(v));
    }
  }
  return w.buffer();
}

template <typename T>
Model<T> decode_model(const std::vector<std::uint8_t>& bytes,
                      const std::string& what = "model checkpoint") {
  io::ByteReader r(bytes, what);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kModelMagic) throw FormatError(what + ": bad magic, expected XMDL");
  const auto version = r.u16();
  if (version != kModelVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  const auto task_tag = r.u8();
  if (task_tag > 1) throw FormatError(what + ": bad task tag");
  Shape input(r.u16());
  for (auto& d : input) d = r.u32();
  const auto n_layers = r.u32();
  std::vector<Layer<T>> ls;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    Layer<T> l;
    const auto kind = r.u8();
    if (kind < 1 || kind > 9) throw FormatError(what + ": bad layer kind tag");
    l.kind = static_cast<LayerKind>(kind);
    l.units = r.u32();
    l.kernel = r.u32();
    l.stride = r.u32();
    l.padding = r.u32();
    l.rate = r.f32();
    const auto count = r.u8();
    for (std::uint8_t k = 0; k < count; ++k) {
      const auto slot = r.u8();
      Shape shape(r.u16());
      for (auto& d : shape) d = r.u32();
      if (shape.empty() || shape_size(shape) > r.remaining() / 4) {
        throw FormatError(what + ": truncated file");
      }
      std::vector<T> data(shape_size(shape));
      for (auto& v : data) v = static_cast<T>(r.f32());
      Tensor<T> t(std::move(shape), std::move(data));
      if (slot == 0) l.weight = std::move(t);
      else if (slot == 1) l.bias = std::move(t);
      else if (slot == 2) l.rho = std::move(t);
      else throw FormatError(what + ": bad tensor slot");
    }
    ls.push_back(std::move(l));
  }
  if (!r.at_end()) throw FormatError(what + ": trailing bytes");
  try {
    return Model<T>(std::move(input), std::move(ls), static_cast<Task>(task_tag));
  } catch (const DimensionError& e) {
    throw FormatError(what + ": " + e.what());
  }
}

template <typename T>
void save_model(const std::filesystem::path& path, const Model<T>& model) {
  io::write_file(path, encode_model(model));
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  return decode_model<T>(io::read_file(path), path.string());
}

}  // namespace xunc
