#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tilessl/encoder.hpp"
#include "tilessl/error.hpp"

namespace tilessl {

// Checkpoint byte layout (all integers and floats little-endian):
//   bytes 0..7   magic "TSSLCKPT"
//   u32          format version (1)
//   u32          value width in bytes (8 = IEEE-754 binary64)
//   u32          layer count L
//   L times:     u32 rows, u32 cols, u32 bias_len
//   L times:     rows*cols weights (row-major), then bias_len biases
inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError("truncated checkpoint: " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Mlp& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, 8);
  detail::put_u32(out, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    detail::put_u32(out, static_cast<std::uint32_t>(l.weight.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(l.weight.cols()));
    detail::put_u32(out, static_cast<std::uint32_t>(l.bias.size()));
  }
  for (const auto& l : net.layers) {
    for (double v : l.weight.values()) detail::put_f64(out, v);
    for (double v : l.bias) detail::put_f64(out, v);
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

inline Mlp load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint file: " + path);
  const auto version = detail::get_u32(in, path);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  if (detail::get_u32(in, path) != 8) throw DataError("unsupported checkpoint value width: " + path);
  const auto count = detail::get_u32(in, path);
  struct Shape {
    std::uint32_t rows, cols, bias;
  };
  std::vector<Shape> shapes(count);
  for (auto& s : shapes) s = {detail::get_u32(in, path), detail::get_u32(in, path), detail::get_u32(in, path)};
  Mlp net;
  for (const auto& s : shapes) {
    DenseLayer layer{Matrix(s.rows, s.cols), std::vector<double>(s.bias)};
    const auto read_vals = [&](std::span<double> dst) {
      if (!in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * 8)))
        throw DataError("truncated checkpoint: " + path);
    };
    read_vals(layer.weight.values());
    read_vals(layer.bias);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// A bare matrix is stored as a one-layer checkpoint with an empty bias.
inline void save_matrix(const Matrix& m, const std::string& path) {
  Mlp wrap;
  wrap.layers.push_back({m, {}});
  save_checkpoint(wrap, path);
}

inline Matrix load_matrix(const std::string& path) {
  Mlp wrap = load_checkpoint(path);
  if (wrap.layers.size() != 1) throw DataError("expected a single-tensor checkpoint: " + path);
  return std::move(wrap.layers.front().weight);
}

}  // namespace tilessl
