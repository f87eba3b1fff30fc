#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/matrix.hpp"
#include "tilessl/params.hpp"

namespace tilessl {

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

struct NtXentConfig {
  double temperature = 0.5;
};

// NT-Xent over 2N views where rows (2i, 2i+1) are positive pairs. Every row is an
// anchor; the other 2N-1 rows form its softmax denominator.
inline LossAndGrad nt_xent_loss(const Matrix& embeddings, const NtXentConfig& config) {
  if (!(config.temperature > 0.0)) throw ConfigError("nt_xent temperature must be positive");
  const std::size_t n = embeddings.rows();
  if (n < 4 || n % 2 != 0) throw ShapeError("nt_xent_loss: need 2N rows with N >= 2");
  const RowNormalized norm = normalize_rows(embeddings);
  const Matrix& u = norm.unit;
  const double inv_t = 1.0 / config.temperature;
  Matrix logits = matmul_nt(u, u);
  for (auto& v : logits.values()) v *= inv_t;

  Matrix dlogits(n, n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = i ^ 1u;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, logits(i, k));
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(logits(i, k) - mx);
    loss += -(logits(i, pos) - mx) + std::log(denom);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      dlogits(i, k) = std::exp(logits(i, k) - mx) / denom / static_cast<double>(n);
    }
    dlogits(i, pos) -= 1.0 / static_cast<double>(n);
  }
  loss /= static_cast<double>(n);

  // logits = u u^T / t, so du_i = sum_k (d_ik + d_ki) u_k / t.
  Matrix du(n, u.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double c = (dlogits(i, k) + dlogits(k, i)) * inv_t;
      if (c != 0.0) axpy(c, u.row(k), du.row(i));
    }
  return {loss, normalize_rows_backward(norm, du)};
}

struct ByolLoss {
  double loss = 0.0;
  Matrix grad_online;
  Matrix grad_target;  // always zero: the target branch is a stop-gradient
};

// Mean over rows of 2 - 2 cos(p_i, t_i).
inline ByolLoss byol_loss(const Matrix& online_prediction, const Matrix& target_projection) {
  require_shape(online_prediction.same_shape(target_projection), "byol_loss: shape mismatch");
  if (online_prediction.rows() == 0) throw ShapeError("byol_loss: empty batch");
  const RowNormalized p = normalize_rows(online_prediction);
  const RowNormalized t = normalize_rows(target_projection);
  const double b = static_cast<double>(online_prediction.rows());
  double loss = 0.0;
  Matrix dp(p.unit.rows(), p.unit.cols());
  for (std::size_t i = 0; i < p.unit.rows(); ++i) {
    loss += 2.0 - 2.0 * dot(p.unit.row(i), t.unit.row(i));
    axpy(-2.0 / b, t.unit.row(i), dp.row(i));
  }
  return {loss / b, normalize_rows_backward(p, dp), Matrix(target_projection.rows(), target_projection.cols())};
}

struct SymmetricByolLoss {
  double loss = 0.0;
  Matrix grad_pred_a;
  Matrix grad_pred_b;
};

// Average of both view orderings: (L(p_a, t_b) + L(p_b, t_a)) / 2.
inline SymmetricByolLoss byol_symmetric_loss(const Matrix& pred_a, const Matrix& pred_b, const Matrix& target_a,
                                             const Matrix& target_b) {
  auto ab = byol_loss(pred_a, target_b);
  auto ba = byol_loss(pred_b, target_a);
  for (auto& v : ab.grad_online.values()) v *= 0.5;
  for (auto& v : ba.grad_online.values()) v *= 0.5;
  return {0.5 * (ab.loss + ba.loss), std::move(ab.grad_online), std::move(ba.grad_online)};
}

// target' = decay * target + (1 - decay) * online, elementwise, in place.
inline void ema_update(ParamList target, const ParamList& online, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema decay must lie in [0,1]");
  require_shape(target.size() == online.size(), "ema_update: parameter list mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    require_shape(target[i].values.size() == online[i].values.size(), "ema_update: tensor size mismatch");
    auto& t = target[i].values;
    const auto& o = online[i].values;
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = decay * t[j] + (1.0 - decay) * o[j];
  }
}

// Sinkhorn-Knopp equipartition. Q starts as exp(scores/epsilon) with per-row max
// subtraction, then each iteration rescales columns to sum B/P and rows to sum 1.
inline Matrix sinkhorn_assign(const Matrix& scores, double epsilon, std::size_t iters) {
  const std::size_t b = scores.rows(), p = scores.cols();
  if (b == 0 || p == 0) throw ShapeError("sinkhorn_assign: empty score matrix");
  if (!(epsilon > 0.0)) throw ConfigError("sinkhorn epsilon must be positive");
  if (!all_finite(scores.values())) throw NumericError("sinkhorn_assign: non-finite scores");
  Matrix q(b, p);
  for (std::size_t i = 0; i < b; ++i) {
    auto row = scores.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    for (std::size_t k = 0; k < p; ++k) q(i, k) = std::exp((row[k] - mx) / epsilon);
  }
  const double col_target = static_cast<double>(b) / static_cast<double>(p);
  std::vector<double> col(p);
  const auto normalize_rows_to_one = [&] {
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) s += q(i, k);
      for (std::size_t k = 0; k < p; ++k) q(i, k) /= s;
    }
  };
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < p; ++k) col[k] += q(i, k);
    for (std::size_t k = 0; k < p; ++k)
      if (!(col[k] > 0.0)) throw NumericError("sinkhorn_assign: prototype column underflowed to zero");
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < p; ++k) q(i, k) *= col_target / col[k];
    normalize_rows_to_one();
  }
  if (iters == 0) normalize_rows_to_one();
  return q;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) s += (out(i, k) = std::exp(row[k] - mx));
    for (std::size_t k = 0; k < row.size(); ++k) out(i, k) /= s;
  }
  return out;
}

// Bounded FIFO of past (unit-norm) embeddings.
class EmbeddingQueue {
 public:
  EmbeddingQueue() = default;
  EmbeddingQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {}

  std::size_t size() const { return rows_.size(); }
  std::size_t capacity() const { return capacity_; }

  void push(const Matrix& batch) {
    if (capacity_ == 0) return;
    require_shape(batch.cols() == dim_, "EmbeddingQueue: dimension mismatch");
    for (std::size_t i = 0; i < batch.rows(); ++i) {
      rows_.emplace_back(batch.row(i).begin(), batch.row(i).end());
      if (rows_.size() > capacity_) rows_.pop_front();
    }
  }

  Matrix as_matrix() const {
    Matrix m(rows_.size(), dim_);
    for (std::size_t i = 0; i < rows_.size(); ++i) std::copy(rows_[i].begin(), rows_[i].end(), m.row(i).begin());
    return m;
  }

  void clear() { rows_.clear(); }

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::deque<std::vector<double>> rows_;
};

struct SwavState {
  Matrix prototypes;  // P x m, unit rows
  EmbeddingQueue queue_a;
  EmbeddingQueue queue_b;
  double temperature = 0.1;
  double sinkhorn_epsilon = 0.05;
  std::size_t sinkhorn_iters = 3;

  void normalize_prototypes() {
    for (std::size_t k = 0; k < prototypes.rows(); ++k) {
      auto row = prototypes.row(k);
      const double n = l2_norm(row);
      if (!(n > 0.0)) throw NumericError("prototype row collapsed to zero");
      for (auto& v : row) v /= n;
    }
  }
};

struct SwavLoss {
  double loss = 0.0;
  Matrix grad_a;
  Matrix grad_b;
  Matrix grad_prototypes;
  Matrix codes_a;
  Matrix codes_b;
};

// Swapped prediction with frozen codes: code of view a supervises the softmax of
// view b and vice versa, averaged over both directions and the batch.
inline SwavLoss swav_loss_with_codes(const Matrix& za, const Matrix& zb, const Matrix& prototypes, const Matrix& codes_a,
                                     const Matrix& codes_b, double temperature) {
  require_shape(za.same_shape(zb), "swav_loss: view shapes differ");
  require_shape(za.cols() == prototypes.cols(), "swav_loss: embedding and prototype dims differ");
  require_shape(codes_a.rows() == za.rows() && codes_a.cols() == prototypes.rows() && codes_b.same_shape(codes_a),
                "swav_loss: code shape mismatch");
  const double b = static_cast<double>(za.rows());
  SwavLoss out;
  out.grad_a = Matrix(za.rows(), za.cols());
  out.grad_b = Matrix(zb.rows(), zb.cols());
  out.grad_prototypes = Matrix(prototypes.rows(), prototypes.cols());
  const auto direction = [&](const Matrix& z, const Matrix& codes, Matrix& grad_z) {
    Matrix logits = matmul_nt(z, prototypes);
    for (auto& v : logits.values()) v /= temperature;
    const Matrix probs = softmax_rows(logits);
    Matrix dlogits(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      double qsum = 0.0;
      for (std::size_t k = 0; k < logits.cols(); ++k) {
        const double q = codes(i, k);
        qsum += q;
        if (q != 0.0) out.loss -= q * std::log(std::max(probs(i, k), std::numeric_limits<double>::min())) / (2.0 * b);
      }
      for (std::size_t k = 0; k < logits.cols(); ++k)
        dlogits(i, k) = (probs(i, k) * qsum - codes(i, k)) / (2.0 * b * temperature);
    }
    add_inplace(grad_z, matmul(dlogits, prototypes));
    add_inplace(out.grad_prototypes, matmul_tn(dlogits, z));
  };
  direction(zb, codes_a, out.grad_b);
  direction(za, codes_b, out.grad_a);
  out.codes_a = codes_a;
  out.codes_b = codes_b;
  return out;
}

inline Matrix swav_codes(const Matrix& z, const EmbeddingQueue& queue, const SwavState& state) {
  const Matrix stacked = queue.size() > 0 ? vstack(z, queue.as_matrix()) : z;
  const Matrix scores = matmul_nt(stacked, state.prototypes);
  const Matrix q = sinkhorn_assign(scores, state.sinkhorn_epsilon, state.sinkhorn_iters);
  Matrix head(z.rows(), q.cols());
  std::copy_n(q.storage().begin(), head.size(), head.storage().begin());
  return head;
}

// Full SwAV step on unit-norm embeddings. Queue rows join the Sinkhorn problem but
// their codes are dropped; the queues receive this batch after the loss is formed.
inline SwavLoss swav_loss(const Matrix& za, const Matrix& zb, SwavState& state, bool update_queue = true) {
  if (za.rows() == 0) throw DataError("swav_loss: empty batch");
  const Matrix codes_a = swav_codes(za, state.queue_a, state);
  const Matrix codes_b = swav_codes(zb, state.queue_b, state);
  SwavLoss out = swav_loss_with_codes(za, zb, state.prototypes, codes_a, codes_b, state.temperature);
  if (update_queue) {
    state.queue_a.push(za);
    state.queue_b.push(zb);
  }
  return out;
}

}  // namespace tilessl
