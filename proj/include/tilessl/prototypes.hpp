#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/matrix.hpp"
#include "tilessl/pooling.hpp"

namespace tilessl {

struct PrototypeAssignment {
  std::vector<std::size_t> index;
  Matrix soft;  // N x P, rows sum to 1
};

// Post-hoc assignment: softmax over prototype similarities, argmax with the lowest
// index winning ties.
inline PrototypeAssignment assign(const Matrix& embeddings, const Matrix& prototypes, double temperature) {
  require_shape(embeddings.cols() == prototypes.cols(), "assign: embedding and prototype widths differ");
  require_shape(prototypes.rows() >= 1, "assign: no prototypes");
  if (!(temperature > 0.0)) throw ConfigError("assign: temperature must be positive");
  PrototypeAssignment out{std::vector<std::size_t>(embeddings.rows()), Matrix(embeddings.rows(), prototypes.rows())};
  const Matrix scores = matmul_nt(embeddings, prototypes);
  std::vector<double> logits(prototypes.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t p = 0; p < prototypes.rows(); ++p) {
      logits[p] = scores(i, p) / temperature;
      if (scores(i, p) > scores(i, best)) best = p;
    }
    const auto soft = softmax(logits);
    std::copy(soft.begin(), soft.end(), out.soft.row(i).begin());
    out.index[i] = best;
  }
  return out;
}

// Indices of the k embeddings closest to prototype `proto` (Euclidean), nearest
// first; equal distances keep index order.
inline std::vector<std::size_t> nearest_patches(std::size_t proto, const Matrix& embeddings, const Matrix& prototypes,
                                                std::size_t k) {
  if (embeddings.rows() == 0) throw DataError("nearest_patches: empty corpus");
  require_shape(proto < prototypes.rows(), "nearest_patches: prototype index out of range");
  require_shape(embeddings.cols() == prototypes.cols(), "nearest_patches: width mismatch");
  if (k > embeddings.rows()) throw ConfigError("nearest_patches: k exceeds corpus size");
  std::vector<double> dist(embeddings.rows());
  const auto c = prototypes.row(proto);
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    double s = 0.0;
    const auto e = embeddings.row(i);
    for (std::size_t d = 0; d < c.size(); ++d) s += (e[d] - c[d]) * (e[d] - c[d]);
    dist[i] = s;
  }
  std::vector<std::size_t> order(embeddings.rows());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
  order.resize(k);
  return order;
}

struct EnrichmentTable {
  Matrix counts;         // P x C
  Matrix per_class;      // C x P, each nonempty class row sums to 1
  Matrix per_prototype;  // P x C, each used prototype row sums to 1
};

inline EnrichmentTable enrichment(std::span<const std::size_t> assignment, std::span<const int> labels,
                                  std::size_t prototypes, std::size_t classes) {
  if (assignment.size() != labels.size()) throw DataError("enrichment: assignments and labels differ in length");
  EnrichmentTable t{Matrix(prototypes, classes), Matrix(classes, prototypes), Matrix(prototypes, classes)};
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    require_shape(assignment[i] < prototypes, "enrichment: prototype index out of range");
    require_shape(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes, "enrichment: label out of range");
    t.counts(assignment[i], static_cast<std::size_t>(labels[i])) += 1.0;
  }
  for (std::size_t c = 0; c < classes; ++c) {
    double n = 0.0;
    for (std::size_t p = 0; p < prototypes; ++p) n += t.counts(p, c);
    if (n > 0.0)
      for (std::size_t p = 0; p < prototypes; ++p) t.per_class(c, p) = t.counts(p, c) / n;
  }
  for (std::size_t p = 0; p < prototypes; ++p) {
    double n = 0.0;
    for (std::size_t c = 0; c < classes; ++c) n += t.counts(p, c);
    if (n > 0.0)
      for (std::size_t c = 0; c < classes; ++c) t.per_prototype(p, c) = t.counts(p, c) / n;
  }
  return t;
}

// Embedding export for external projection tools:
//   "TSSLEMB1" | u64 count | u32 m | count x (u64 id, m x f32), little-endian.
// The id is the row index; a companion text file maps ids to patch names.
inline constexpr char kEmbeddingMagic[8] = {'T', 'S', 'S', 'L', 'E', 'M', 'B', '1'};

inline void save_embeddings(const std::string& path, const Matrix& embeddings) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embeddings: " + path);
  auto put = [&](auto v) {
    unsigned char b[sizeof(v)];
    std::memcpy(b, &v, sizeof(v));
    out.write(reinterpret_cast<const char*>(b), sizeof(v));
  };
  out.write(kEmbeddingMagic, 8);
  put(static_cast<std::uint64_t>(embeddings.rows()));
  put(static_cast<std::uint32_t>(embeddings.cols()));
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    put(static_cast<std::uint64_t>(i));
    for (double v : embeddings.row(i)) put(static_cast<float>(v));
  }
  if (!out) throw DataError("short write: " + path);
}

inline Matrix load_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read embeddings: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kEmbeddingMagic, 8) != 0) throw DataError("not an embedding file: " + path);
  auto get = [&](auto& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw DataError("truncated embedding file: " + path);
  };
  std::uint64_t count = 0;
  std::uint32_t m = 0;
  get(count);
  get(m);
  Matrix out(count, m);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t id = 0;
    get(id);
    for (std::size_t d = 0; d < m; ++d) {
      float f = 0.0F;
      get(f);
      out(i, d) = f;
    }
  }
  return out;
}

}  // namespace tilessl
