#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tilessl/augment.hpp"
#include "tilessl/encoder.hpp"
#include "tilessl/error.hpp"
#include "tilessl/losses.hpp"
#include "tilessl/optim.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

enum class SslMethod { simclr, byol, swav };

inline std::string_view method_name(SslMethod m) {
  switch (m) {
    case SslMethod::simclr: return "simclr";
    case SslMethod::byol: return "byol";
    case SslMethod::swav: return "swav";
  }
  return "?";
}

inline std::optional<SslMethod> parse_method(std::string_view s) {
  if (s == "simclr") return SslMethod::simclr;
  if (s == "byol") return SslMethod::byol;
  if (s == "swav") return SslMethod::swav;
  return std::nullopt;
}

enum class OptimizerKind { lars, adam, adamw };

struct SwavConfig {
  std::size_t prototypes = 20;
  std::size_t queue_capacity = 3000;
  double temperature = 0.1;
  double epsilon = 0.05;
  std::size_t sinkhorn_iters = 3;
};

struct PretrainConfig {
  SslMethod method = SslMethod::byol;
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  InputSpec input;
  std::vector<std::size_t> encoder_hidden{128, 128};
  std::size_t embedding = 64;
  std::size_t head_hidden = 64;  // projector / predictor hidden width (m -> h -> m)
  OptimizerKind optimizer = OptimizerKind::lars;
  LarsConfig lars;
  AdamConfig adam;
  NtXentConfig nt_xent;
  double ema_decay = 0.99;
  SwavConfig swav;
  AugmentPipeline augment;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  std::vector<std::size_t> encoder_dims() const {
    std::vector<std::size_t> dims{input.dim()};
    dims.insert(dims.end(), encoder_hidden.begin(), encoder_hidden.end());
    dims.push_back(embedding);
    return dims;
  }
};

struct SslModel {
  Mlp encoder;
  Mlp projector;
  Mlp predictor;         // BYOL only
  Mlp target_encoder;    // BYOL only
  Mlp target_projector;  // BYOL only
  Matrix prototypes;     // SwAV only

  ParamList online_params(SslMethod method) {
    ParamList out;
    for (auto& p : encoder.params()) out.push_back({"encoder." + p.name, p.values, p.bias_like});
    for (auto& p : projector.params()) out.push_back({"projector." + p.name, p.values, p.bias_like});
    if (method == SslMethod::byol)
      for (auto& p : predictor.params()) out.push_back({"predictor." + p.name, p.values, p.bias_like});
    if (method == SslMethod::swav) out.push_back({"prototypes", prototypes.values(), false});
    return out;
  }
};

inline SslModel make_ssl_model(const PretrainConfig& config) {
  SslModel m;
  m.encoder = make_mlp(config.encoder_dims(), derive_seed(config.seed, {0xe0}));
  const std::vector<std::size_t> head{config.embedding, config.head_hidden, config.embedding};
  m.projector = make_mlp(head, derive_seed(config.seed, {0xe1}));
  if (config.method == SslMethod::byol) {
    m.predictor = make_mlp(head, derive_seed(config.seed, {0xe2}));
    m.target_encoder = m.encoder;
    m.target_projector = m.projector;
  }
  if (config.method == SslMethod::swav) {
    Rng rng(derive_seed(config.seed, {0xe3}));
    m.prototypes = Matrix(config.swav.prototypes, config.embedding);
    for (auto& v : m.prototypes.values()) v = rng.normal();
    SwavState tmp;
    tmp.prototypes = std::move(m.prototypes);
    tmp.normalize_prototypes();
    m.prototypes = std::move(tmp.prototypes);
  }
  return m;
}

struct LossRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
};

struct PretrainResult {
  std::vector<LossRecord> history;
  std::vector<SslModel> checkpoints;  // one per epoch
  std::size_t best_epoch = 0;         // 1-based index into checkpoints
  SslModel best;
};

namespace detail {

// Interleaved view batch: row 2i is view a of sample i, row 2i+1 is view b.
inline Matrix view_batch(std::span<const Image16> patches, std::span<const std::size_t> ids,
                         const PretrainConfig& config, std::uint64_t stream) {
  Matrix x(2 * ids.size(), config.input.dim());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    AugmentPipeline pipe = config.augment;
    pipe.seed = derive_seed(config.seed, {stream, ids[j]});
    const ViewPair views = make_view_pair(patches[ids[j]], pipe);
    const auto a = encoder_input(views.a, config.input);
    const auto b = encoder_input(views.b, config.input);
    std::copy(a.begin(), a.end(), x.row(2 * j).begin());
    std::copy(b.begin(), b.end(), x.row(2 * j + 1).begin());
  }
  return x;
}

inline Matrix rows_with_parity(const Matrix& m, std::size_t parity) {
  Matrix out(m.rows() / 2, m.cols());
  for (std::size_t i = 0; i < out.rows(); ++i)
    std::copy(m.row(2 * i + parity).begin(), m.row(2 * i + parity).end(), out.row(i).begin());
  return out;
}

inline Matrix interleave(const Matrix& a, const Matrix& b) {
  Matrix out(2 * a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), out.row(2 * i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), out.row(2 * i + 1).begin());
  }
  return out;
}

struct StepResult {
  double loss = 0.0;
  GradBuffer grads;
};

// Loss (and optionally gradients wrt online params) for one interleaved batch.
inline StepResult ssl_step(SslModel& model, const Matrix& x, const PretrainConfig& config, SwavState* swav,
                           bool want_grads, bool update_queue) {
  StepResult out;
  const auto enc = forward_tape(model.encoder, x);
  const auto proj = forward_tape(model.projector, enc.output);
  Matrix d_proj_out;
  std::optional<GradBundle> g_pred;
  Matrix proto_grad;
  switch (config.method) {
    case SslMethod::simclr: {
      auto l = nt_xent_loss(proj.output, config.nt_xent);
      out.loss = l.loss;
      d_proj_out = std::move(l.grad);
      break;
    }
    case SslMethod::byol: {
      const auto pred = forward_tape(model.predictor, proj.output);
      const Matrix target = encode(model.target_projector, encode(model.target_encoder, x));
      auto l = byol_symmetric_loss(rows_with_parity(pred.output, 0), rows_with_parity(pred.output, 1),
                                   rows_with_parity(target, 0), rows_with_parity(target, 1));
      out.loss = l.loss;
      if (want_grads) {
        g_pred = backward_tape(model.predictor, pred, interleave(l.grad_pred_a, l.grad_pred_b));
        d_proj_out = g_pred->input;
      }
      break;
    }
    case SslMethod::swav: {
      const RowNormalized unit = normalize_rows(proj.output);
      auto l = swav_loss(rows_with_parity(unit.unit, 0), rows_with_parity(unit.unit, 1), *swav, update_queue);
      out.loss = l.loss;
      if (want_grads) {
        d_proj_out = normalize_rows_backward(unit, interleave(l.grad_a, l.grad_b));
        proto_grad = std::move(l.grad_prototypes);
      }
      break;
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("pretraining loss is not finite");
  if (!want_grads) return out;

  const auto g_proj = backward_tape(model.projector, proj, d_proj_out);
  const auto g_enc = config.workers > 1 ? encode_backward_sharded(model.encoder, x, g_proj.input, config.workers)
                                        : backward_tape(model.encoder, enc, g_proj.input);
  out.grads = GradBuffer(model.online_params(config.method));
  GradList all = g_enc.grads();
  append(all, g_proj.grads());
  if (g_pred) append(all, g_pred->grads());
  if (config.method == SslMethod::swav) all.push_back({"prototypes", proto_grad.values()});
  out.grads.add(all);
  return out;
}

}  // namespace detail

// Runs SSL pretraining on unlabeled patches and keeps a checkpoint per epoch. The
// returned `best` minimizes the validation loss; ties go to the earliest epoch.
inline PretrainResult pretrain(std::span<const Image16> train, std::span<const Image16> val, const PretrainConfig& config) {
  if (train.size() < 2) throw DataError("pretrain: training set needs at least 2 patches");
  if (val.size() < 2) throw DataError("pretrain: validation set needs at least 2 patches");
  config.augment.validate();
  SslModel model = make_ssl_model(config);
  SwavState swav;
  if (config.method == SslMethod::swav) {
    swav.prototypes = model.prototypes;
    swav.queue_a = EmbeddingQueue(config.swav.queue_capacity, config.embedding);
    swav.queue_b = EmbeddingQueue(config.swav.queue_capacity, config.embedding);
    swav.temperature = config.swav.temperature;
    swav.sinkhorn_epsilon = config.swav.epsilon;
    swav.sinkhorn_iters = config.swav.sinkhorn_iters;
  }
  LarsState lars;
  AdamState adam;
  PretrainResult result;
  Rng order_rng(derive_seed(config.seed, {0x0de5}));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> val_ids(val.size());
  std::iota(val_ids.begin(), val_ids.end(), 0);
  const std::size_t batch = std::max<std::size_t>(2, config.batch_size);
  double best_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    double train_sum = 0.0;
    std::size_t train_n = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      if (end - start < 2) break;
      const std::span<const std::size_t> ids(order.data() + start, end - start);
      const Matrix x = detail::view_batch(train, ids, config, epoch);
      auto step = detail::ssl_step(model, x, config, &swav, true, true);
      train_sum += step.loss * static_cast<double>(ids.size());
      train_n += ids.size();
      ParamList params = model.online_params(config.method);
      switch (config.optimizer) {
        case OptimizerKind::lars: lars_step(params, step.grads.view(), config.lars, lars); break;
        case OptimizerKind::adam:
        case OptimizerKind::adamw: {
          AdamConfig a = config.adam;
          a.decoupled = config.optimizer == OptimizerKind::adamw;
          adam_step(params, step.grads.view(), a, adam);
          break;
        }
      }
      if (config.method == SslMethod::swav) {
        swav.prototypes = model.prototypes;
        swav.normalize_prototypes();
        model.prototypes = swav.prototypes;
      }
      if (config.method == SslMethod::byol) {
        ema_update(model.target_encoder.params(), model.encoder.params(), config.ema_decay);
        ema_update(model.target_projector.params(), model.projector.params(), config.ema_decay);
      }
    }
    result.history.push_back({epoch, "train", train_n ? train_sum / static_cast<double>(train_n) : 0.0});

    // Validation views use a fixed stream so losses are comparable across epochs.
    SwavState val_state = swav;
    val_state.queue_a.clear();
    val_state.queue_b.clear();
    double val_sum = 0.0;
    std::size_t val_n = 0;
    for (std::size_t start = 0; start + 2 <= val_ids.size(); start += batch) {
      const std::size_t end = std::min(val_ids.size(), start + batch);
      if (end - start < 2) break;
      const std::span<const std::size_t> ids(val_ids.data() + start, end - start);
      const Matrix x = detail::view_batch(val, ids, config, 0x7a1ULL << 32);
      const auto step = detail::ssl_step(model, x, config, &val_state, false, false);
      val_sum += step.loss * static_cast<double>(ids.size());
      val_n += ids.size();
    }
    const double val_loss = val_sum / static_cast<double>(val_n);
    result.history.push_back({epoch, "val", val_loss});
    result.checkpoints.push_back(model);
    if (val_loss < best_val) {
      best_val = val_loss;
      result.best_epoch = epoch;
    }
  }
  if (result.best_epoch > 0) {
    result.best = result.checkpoints[result.best_epoch - 1];
  } else {
    result.best = model;
  }
  return result;
}

}  // namespace tilessl
