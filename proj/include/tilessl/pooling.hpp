#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/matrix.hpp"
#include "tilessl/params.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

struct GridCell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const GridCell&, const GridCell&) = default;
};

// r x c x m grid of patch embeddings, stored row-major over cells.
struct GridEmbedding {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Matrix values;  // (rows*cols) x m

  std::size_t dim() const { return values.cols(); }
  std::span<const double> at(std::size_t r, std::size_t c) const { return values.row(r * cols + c); }
};

struct EmbeddingBag {
  Matrix embeddings;  // K x m
  std::vector<GridCell> cells;

  std::size_t size() const { return embeddings.rows(); }
  std::size_t dim() const { return embeddings.cols(); }
};

inline EmbeddingBag grid_to_bag(const GridEmbedding& grid) {
  if (grid.rows == 0 || grid.cols == 0) throw ShapeError("grid_to_bag: empty grid");
  require_shape(grid.values.rows() == grid.rows * grid.cols, "grid_to_bag: value rows != r*c");
  EmbeddingBag bag{grid.values, {}};
  bag.cells.reserve(grid.rows * grid.cols);
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) bag.cells.push_back({r, c});
  return bag;
}

inline GridEmbedding bag_to_grid(const EmbeddingBag& bag, std::size_t rows, std::size_t cols) {
  require_shape(bag.cells.size() == bag.size(), "bag_to_grid: provenance missing");
  GridEmbedding grid{rows, cols, Matrix(rows * cols, bag.dim())};
  for (std::size_t k = 0; k < bag.size(); ++k) {
    const auto [r, c] = bag.cells[k];
    require_shape(r < rows && c < cols, "bag_to_grid: provenance outside grid");
    std::copy(bag.embeddings.row(k).begin(), bag.embeddings.row(k).end(), grid.values.row(r * cols + c).begin());
  }
  return grid;
}

inline std::vector<double> weighted_sum(const Matrix& bag, std::span<const double> weights) {
  std::vector<double> z(bag.cols(), 0.0);
  for (std::size_t k = 0; k < bag.rows(); ++k) axpy(weights[k], bag.row(k), z);
  return z;
}

// Global average pooling, computed as the same weighted sum MIP uses with weights 1/K.
inline std::vector<double> gap(const Matrix& bag) {
  if (bag.rows() == 0) throw DataError("gap: empty bag");
  const std::vector<double> w(bag.rows(), 1.0 / static_cast<double>(bag.rows()));
  return weighted_sum(bag, w);
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) s += (out[k] = std::exp(logits[k] - mx));
  for (auto& v : out) v /= s;
  return out;
}

// Gated attention weights: l_k = w^T (tanh(V h_k) * sigm(U h_k)), a = softmax(l).
struct AttentionParams {
  Matrix v;  // n x m
  Matrix u;  // n x m
  std::vector<double> w;  // n

  std::size_t hidden() const { return w.size(); }
  std::size_t dim() const { return v.cols(); }

  void validate() const {
    require_shape(!w.empty(), "AttentionParams: hidden width must be >= 1");
    require_shape(v.rows() == w.size() && u.rows() == w.size() && v.cols() == u.cols(),
                  "AttentionParams: inconsistent shapes");
  }

  ParamList params() {
    return {{"mip.V", v.values(), false}, {"mip.U", u.values(), false}, {"mip.w", w, false}};
  }
};

inline AttentionParams make_attention(std::size_t m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  AttentionParams p{Matrix(n, m), Matrix(n, m), std::vector<double>(n)};
  const double bvu = std::sqrt(6.0 / static_cast<double>(m + n));
  for (auto& x : p.v.values()) x = rng.uniform(-bvu, bvu);
  for (auto& x : p.u.values()) x = rng.uniform(-bvu, bvu);
  const double bw = std::sqrt(6.0 / static_cast<double>(n + 1));
  for (auto& x : p.w) x = rng.uniform(-bw, bw);
  return p;
}

struct MipForward {
  std::vector<double> z;
  std::vector<double> scores;  // a_k
  std::vector<double> logits;
  Matrix tanh_v;  // K x n
  Matrix sig_u;   // K x n
};

inline MipForward mip_forward(const Matrix& bag, const AttentionParams& params) {
  params.validate();
  require_shape(bag.cols() == params.dim(), "mip_forward: embedding size does not match attention params");
  if (bag.rows() == 0) throw DataError("mip_forward: empty bag");
  const std::size_t k_count = bag.rows(), n = params.hidden();
  MipForward f;
  f.tanh_v = matmul_nt(bag, params.v);
  f.sig_u = matmul_nt(bag, params.u);
  f.logits.assign(k_count, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    double l = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double t = std::tanh(f.tanh_v(k, j));
      const double s = 1.0 / (1.0 + std::exp(-f.sig_u(k, j)));
      f.tanh_v(k, j) = t;
      f.sig_u(k, j) = s;
      l += params.w[j] * t * s;
    }
    f.logits[k] = l;
  }
  f.scores = softmax(f.logits);
  f.z = weighted_sum(bag, f.scores);
  return f;
}

struct MipGrads {
  Matrix v;
  Matrix u;
  std::vector<double> w;
  Matrix bag;

  GradList grads() const { return {{"mip.V", v.values()}, {"mip.U", u.values()}, {"mip.w", w}}; }
};

inline MipGrads mip_backward(const Matrix& bag, const AttentionParams& params, const MipForward& fwd,
                             std::span<const double> grad_z) {
  require_shape(grad_z.size() == bag.cols(), "mip_backward: upstream gradient size mismatch");
  const std::size_t k_count = bag.rows(), n = params.hidden();
  MipGrads g{Matrix(n, bag.cols()), Matrix(n, bag.cols()), std::vector<double>(n, 0.0), Matrix(k_count, bag.cols())};
  std::vector<double> da(k_count);
  double mean_da = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) {
    da[k] = dot(bag.row(k), grad_z);
    mean_da += fwd.scores[k] * da[k];
    axpy(fwd.scores[k], grad_z, g.bag.row(k));
  }
  std::vector<double> dpre_v(n), dpre_u(n);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double dl = fwd.scores[k] * (da[k] - mean_da);
    if (dl == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      const double t = fwd.tanh_v(k, j), s = fwd.sig_u(k, j);
      g.w[j] += dl * t * s;
      const double dg = dl * params.w[j];
      dpre_v[j] = dg * s * (1.0 - t * t);
      dpre_u[j] = dg * t * s * (1.0 - s);
    }
    auto hk = bag.row(k);
    auto dh = g.bag.row(k);
    for (std::size_t j = 0; j < n; ++j) {
      if (dpre_v[j] != 0.0) {
        axpy(dpre_v[j], hk, g.v.row(j));
        axpy(dpre_v[j], params.v.row(j), dh);
      }
      if (dpre_u[j] != 0.0) {
        axpy(dpre_u[j], hk, g.u.row(j));
        axpy(dpre_u[j], params.u.row(j), dh);
      }
    }
  }
  return g;
}

inline MipGrads mip_backward(const Matrix& bag, const AttentionParams& params, std::span<const double> grad_z) {
  return mip_backward(bag, params, mip_forward(bag, params), grad_z);
}

// Single-head self-attention over [cls; h_1..h_K] with a residual connection.
struct SaParams {
  Matrix wq;  // m x m
  Matrix wk;
  Matrix wv;
  std::vector<double> cls;

  std::size_t dim() const { return cls.size(); }
  void validate() const {
    const std::size_t m = cls.size();
    require_shape(m > 0 && wq.rows() == m && wq.cols() == m && wk.same_shape(wq) && wv.same_shape(wq),
                  "SaParams: inconsistent shapes");
  }
  ParamList params() {
    return {{"sa.Wq", wq.values(), false}, {"sa.Wk", wk.values(), false}, {"sa.Wv", wv.values(), false},
            {"sa.cls", cls, false}};
  }
};

inline SaParams make_self_attention(std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  SaParams p{Matrix(m, m), Matrix(m, m), Matrix(m, m), std::vector<double>(m)};
  const double bound = std::sqrt(6.0 / static_cast<double>(2 * m));
  for (Matrix* mat : {&p.wq, &p.wk, &p.wv})
    for (auto& x : mat->values()) x = rng.uniform(-bound, bound);
  for (auto& x : p.cls) x = 0.02 * rng.normal();
  return p;
}

struct SaForward {
  std::vector<double> z;
  Matrix tokens;     // (K+1) x m
  Matrix queries;    // (K+1) x m
  Matrix keys;
  Matrix values;
  Matrix attention;  // (K+1) x (K+1), rows sum to 1
};

inline SaForward sa_forward(const Matrix& bag, const SaParams& params) {
  params.validate();
  require_shape(bag.cols() == params.dim(), "sa_pool: embedding size mismatch");
  if (bag.rows() == 0) throw DataError("sa_pool: empty bag");
  const std::size_t m = params.dim(), t = bag.rows() + 1;
  SaForward f;
  f.tokens = Matrix(t, m);
  std::copy(params.cls.begin(), params.cls.end(), f.tokens.row(0).begin());
  std::copy(bag.storage().begin(), bag.storage().end(), f.tokens.storage().begin() + static_cast<std::ptrdiff_t>(m));
  f.queries = matmul_nt(f.tokens, params.wq);
  f.keys = matmul_nt(f.tokens, params.wk);
  f.values = matmul_nt(f.tokens, params.wv);
  Matrix logits = matmul_nt(f.queries, f.keys);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (auto& v : logits.values()) v *= scale;
  f.attention = Matrix(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    const auto row = softmax(logits.row(i));
    std::copy(row.begin(), row.end(), f.attention.row(i).begin());
  }
  f.z = params.cls;
  for (std::size_t j = 0; j < t; ++j) axpy(f.attention(0, j), f.values.row(j), f.z);
  return f;
}

inline std::vector<double> sa_pool(const Matrix& bag, const SaParams& params) { return sa_forward(bag, params).z; }

struct SaGrads {
  Matrix wq;
  Matrix wk;
  Matrix wv;
  std::vector<double> cls;
  Matrix bag;

  GradList grads() const {
    return {{"sa.Wq", wq.values()}, {"sa.Wk", wk.values()}, {"sa.Wv", wv.values()}, {"sa.cls", cls}};
  }
};

// Only the cls row of the layer output reaches z, so only that query row is differentiated.
inline SaGrads sa_backward(const SaParams& params, const SaForward& f, std::span<const double> grad_z) {
  const std::size_t m = params.dim(), t = f.tokens.rows();
  require_shape(grad_z.size() == m, "sa_backward: upstream gradient size mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  SaGrads g{Matrix(m, m), Matrix(m, m), Matrix(m, m), std::vector<double>(grad_z.begin(), grad_z.end()), Matrix(t - 1, m)};
  Matrix dtokens(t, m);
  std::vector<double> da(t);
  double mean_da = 0.0;
  for (std::size_t j = 0; j < t; ++j) {
    da[j] = dot(f.values.row(j), grad_z);
    mean_da += f.attention(0, j) * da[j];
  }
  std::vector<double> dq(m, 0.0), dk(m), dv(m);
  auto q0 = f.queries.row(0);
  for (std::size_t j = 0; j < t; ++j) {
    const double dlogit = f.attention(0, j) * (da[j] - mean_da) * scale;
    axpy(dlogit, f.keys.row(j), dq);
    for (std::size_t c = 0; c < m; ++c) {
      dk[c] = dlogit * q0[c];
      dv[c] = f.attention(0, j) * grad_z[c];
    }
    auto tj = f.tokens.row(j);
    auto dtj = dtokens.row(j);
    for (std::size_t r = 0; r < m; ++r) {
      if (dk[r] != 0.0) {
        axpy(dk[r], tj, g.wk.row(r));
        axpy(dk[r], params.wk.row(r), dtj);
      }
      if (dv[r] != 0.0) {
        axpy(dv[r], tj, g.wv.row(r));
        axpy(dv[r], params.wv.row(r), dtj);
      }
    }
  }
  auto t0 = f.tokens.row(0);
  for (std::size_t r = 0; r < m; ++r) {
    if (dq[r] == 0.0) continue;
    axpy(dq[r], t0, g.wq.row(r));
    axpy(dq[r], params.wq.row(r), dtokens.row(0));
  }
  axpy(1.0, dtokens.row(0), g.cls);
  std::copy(dtokens.storage().begin() + static_cast<std::ptrdiff_t>(m), dtokens.storage().end(), g.bag.storage().begin());
  return g;
}

// Attention map on the patch grid plus an overlap-resolved coverage map: the image
// is cut at every patch boundary and each resulting cell takes the mean score of the
// patches covering it.
struct PatchPlacement {
  GridCell cell;
  std::size_t x = 0;
  std::size_t y = 0;
};

struct Heatmap {
  Matrix grid;                      // rows x cols, a_k at each grid position
  std::vector<std::size_t> xs;      // coverage cell boundaries along x
  std::vector<std::size_t> ys;      // coverage cell boundaries along y
  Matrix coverage;                  // (ys.size()-1) x (xs.size()-1)
  std::size_t width = 0;            // raster size in pixels
  std::size_t height = 0;
  std::vector<std::uint8_t> raster; // width*height, max-normalized to 255
};

inline Heatmap attention_heatmap(std::span<const double> scores, std::span<const PatchPlacement> placements,
                                 std::size_t rows, std::size_t cols, std::size_t patch_size) {
  if (placements.size() != scores.size()) throw DataError("attention_heatmap: provenance missing for some scores");
  Heatmap h;
  h.grid = Matrix(rows, cols);
  std::vector<std::size_t> xs, ys;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const auto& p = placements[k];
    if (p.cell.row >= rows || p.cell.col >= cols) throw DataError("attention_heatmap: provenance outside grid");
    h.grid(p.cell.row, p.cell.col) = scores[k];
    xs.push_back(p.x);
    xs.push_back(p.x + patch_size);
    ys.push_back(p.y);
    ys.push_back(p.y + patch_size);
  }
  const auto uniq = [](std::vector<std::size_t>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  uniq(xs);
  uniq(ys);
  h.xs = xs;
  h.ys = ys;
  const std::size_t cr = ys.size() - 1, cc = xs.size() - 1;
  Matrix sum(cr, cc), count(cr, cc);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const auto& p = placements[k];
    const auto y0 = static_cast<std::size_t>(std::lower_bound(ys.begin(), ys.end(), p.y) - ys.begin());
    const auto y1 = static_cast<std::size_t>(std::lower_bound(ys.begin(), ys.end(), p.y + patch_size) - ys.begin());
    const auto x0 = static_cast<std::size_t>(std::lower_bound(xs.begin(), xs.end(), p.x) - xs.begin());
    const auto x1 = static_cast<std::size_t>(std::lower_bound(xs.begin(), xs.end(), p.x + patch_size) - xs.begin());
    for (std::size_t r = y0; r < y1; ++r)
      for (std::size_t c = x0; c < x1; ++c) {
        sum(r, c) += scores[k];
        count(r, c) += 1.0;
      }
  }
  h.coverage = Matrix(cr, cc);
  double mx = 0.0;
  for (std::size_t i = 0; i < h.coverage.size(); ++i) {
    h.coverage.storage()[i] = count.storage()[i] > 0.0 ? sum.storage()[i] / count.storage()[i] : 0.0;
    mx = std::max(mx, h.coverage.storage()[i]);
  }
  h.width = xs.back();
  h.height = ys.back();
  h.raster.assign(h.width * h.height, 0);
  for (std::size_t r = 0; r < cr; ++r)
    for (std::size_t c = 0; c < cc; ++c) {
      const double v = mx > 0.0 ? h.coverage(r, c) / mx : 0.0;
      const auto level = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      for (std::size_t y = ys[r]; y < ys[r + 1]; ++y)
        for (std::size_t x = xs[c]; x < xs[c + 1]; ++x) h.raster[y * h.width + x] = level;
    }
  return h;
}

// Binary portable graymap (P5), 8-bit.
inline void write_pgm(const std::string& path, std::size_t width, std::size_t height, std::span<const std::uint8_t> raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write graymap: " + path);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw DataError("failed writing graymap: " + path);
}

}  // namespace tilessl
