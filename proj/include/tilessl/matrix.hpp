#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "tilessl/error.hpp"

namespace tilessl {

// Dense row-major matrix of doubles. Batches are stored one sample per row.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_shape(data_.size() == rows_ * cols_, "Matrix: data size does not match shape");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// out = a * b^T, shapes (n x k) * (m x k)^T -> (n x m).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

// out = a * b, shapes (n x k) * (k x m) -> (n x m).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) axpy(a(i, k), b.row(k), out.row(i));
  return out;
}

// out = a^T * b, shapes (k x n)^T * (k x m) -> (n x m).
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn: inner dimensions differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k)
    for (std::size_t i = 0; i < a.cols(); ++i) axpy(a(k, i), b.row(k), out.row(i));
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  require_shape(a.same_shape(b), "add_inplace: shape mismatch");
  axpy(1.0, b.values(), a.values());
}

inline Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.empty() && a.rows() == 0) return b;
  require_shape(a.cols() == b.cols() || b.rows() == 0, "vstack: column counts differ");
  Matrix out(a.rows() + b.rows(), a.cols());
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(),
            out.storage().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Row-wise L2 normalization with its backward pass.
struct RowNormalized {
  Matrix unit;
  std::vector<double> norms;
};

inline RowNormalized normalize_rows(const Matrix& x) {
  RowNormalized out{Matrix(x.rows(), x.cols()), std::vector<double>(x.rows())};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double n = l2_norm(x.row(i));
    if (!(n > 0.0)) throw NumericError("normalize_rows: zero-norm embedding at row " + std::to_string(i));
    out.norms[i] = n;
    auto dst = out.unit.row(i);
    auto src = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) dst[j] = src[j] / n;
  }
  return out;
}

// Gradient wrt x given the gradient wrt unit = x / |x|.
inline Matrix normalize_rows_backward(const RowNormalized& fwd, const Matrix& grad_unit) {
  Matrix grad(grad_unit.rows(), grad_unit.cols());
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    auto u = fwd.unit.row(i);
    auto g = grad_unit.row(i);
    const double proj = dot(u, g);
    auto dst = grad.row(i);
    for (std::size_t j = 0; j < grad.cols(); ++j) dst[j] = (g[j] - u[j] * proj) / fwd.norms[i];
  }
  return grad;
}

}  // namespace tilessl
