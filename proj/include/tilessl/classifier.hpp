#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/losses.hpp"
#include "tilessl/matrix.hpp"
#include "tilessl/metrics.hpp"
#include "tilessl/optim.hpp"
#include "tilessl/params.hpp"
#include "tilessl/pooling.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

enum class PoolingKind { gap, mip, sa };

inline std::string_view pooling_name(PoolingKind k) {
  switch (k) {
    case PoolingKind::gap: return "gap";
    case PoolingKind::mip: return "mip";
    case PoolingKind::sa: return "sa";
  }
  return "?";
}

inline std::optional<PoolingKind> parse_pooling(std::string_view s) {
  if (s == "gap") return PoolingKind::gap;
  if (s == "mip") return PoolingKind::mip;
  if (s == "sa") return PoolingKind::sa;
  return std::nullopt;
}

struct LinearHead {
  Matrix weight;  // classes x features
  std::vector<double> bias;

  std::size_t classes() const { return weight.rows(); }
  ParamList params() { return {{"head.weight", weight.values(), false}, {"head.bias", bias, true}}; }
  friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

inline LinearHead make_linear_head(std::size_t features, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  LinearHead h{Matrix(classes, features), std::vector<double>(classes, 0.0)};
  const double bound = std::sqrt(6.0 / static_cast<double>(features + classes));
  for (auto& w : h.weight.values()) w = rng.uniform(-bound, bound);
  return h;
}

// Pooling layer followed by a linear softmax head. A bag with a single row under
// GAP pools to that row, so plain feature vectors use the same path.
struct PooledClassifier {
  PoolingKind kind = PoolingKind::gap;
  // Fixed per-feature standardization applied to every bag row before pooling;
  // empty means identity. Not trained.
  std::vector<double> shift;
  std::vector<double> scale;
  AttentionParams mip;
  SaParams sa;
  LinearHead head;

  ParamList params() {
    ParamList out = head.params();
    if (kind == PoolingKind::mip) append(out, mip.params());
    if (kind == PoolingKind::sa) append(out, sa.params());
    return out;
  }
};

inline PooledClassifier make_classifier(PoolingKind kind, std::size_t m, std::size_t classes, std::size_t attention_hidden,
                                        std::uint64_t seed) {
  PooledClassifier c;
  c.kind = kind;
  c.head = make_linear_head(m, classes, derive_seed(seed, {1}));
  if (kind == PoolingKind::mip) c.mip = make_attention(m, attention_hidden, derive_seed(seed, {2}));
  if (kind == PoolingKind::sa) c.sa = make_self_attention(m, derive_seed(seed, {3}));
  return c;
}

struct ClassifierPass {
  Matrix input;  // bag after standardization
  std::vector<double> z;
  std::vector<double> probs;
  MipForward mip;
  SaForward sa;
};

inline std::vector<double> pool(const PooledClassifier& c, const Matrix& bag, MipForward* mip_out = nullptr,
                                SaForward* sa_out = nullptr) {
  switch (c.kind) {
    case PoolingKind::gap: return gap(bag);
    case PoolingKind::mip: {
      auto f = mip_forward(bag, c.mip);
      auto z = f.z;
      if (mip_out) *mip_out = std::move(f);
      return z;
    }
    case PoolingKind::sa: {
      auto f = sa_forward(bag, c.sa);
      auto z = f.z;
      if (sa_out) *sa_out = std::move(f);
      return z;
    }
  }
  return {};
}

inline Matrix standardize(const PooledClassifier& c, const Matrix& bag) {
  if (c.scale.empty()) return bag;
  require_shape(c.scale.size() == bag.cols() && c.shift.size() == bag.cols(), "classifier: scaler width mismatch");
  Matrix out = bag;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t d = 0; d < r.size(); ++d) r[d] = (r[d] - c.shift[d]) * c.scale[d];
  }
  return out;
}

// Mean and inverse standard deviation over all rows of the selected bags.
inline void fit_standardizer(PooledClassifier& c, const std::vector<Matrix>& bags, std::span<const std::size_t> idx) {
  const std::size_t m = bags.at(idx.front()).cols();
  std::vector<double> sum(m, 0.0), sq(m, 0.0);
  double n = 0.0;
  for (auto i : idx)
    for (std::size_t k = 0; k < bags[i].rows(); ++k) {
      const auto r = bags[i].row(k);
      for (std::size_t d = 0; d < m; ++d) {
        sum[d] += r[d];
        sq[d] += r[d] * r[d];
      }
      n += 1.0;
    }
  c.shift.assign(m, 0.0);
  c.scale.assign(m, 1.0);
  for (std::size_t d = 0; d < m; ++d) {
    c.shift[d] = sum[d] / n;
    const double var = sq[d] / n - c.shift[d] * c.shift[d];
    c.scale[d] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
  }
}

inline ClassifierPass classifier_forward(const PooledClassifier& c, const Matrix& bag) {
  ClassifierPass pass;
  pass.input = standardize(c, bag);
  pass.z = pool(c, pass.input, &pass.mip, &pass.sa);
  require_shape(pass.z.size() == c.head.weight.cols(), "classifier: pooled feature size does not match head");
  std::vector<double> logits(c.head.classes());
  for (std::size_t k = 0; k < logits.size(); ++k) logits[k] = dot(c.head.weight.row(k), pass.z) + c.head.bias[k];
  pass.probs = softmax(logits);
  return pass;
}

struct ClassifierGrads {
  LinearHead head;
  MipGrads mip;
  SaGrads sa;
  Matrix bag;
  double loss = 0.0;

  GradList grads(PoolingKind kind) const {
    GradList out{{"head.weight", head.weight.values()}, {"head.bias", head.bias}};
    if (kind == PoolingKind::mip) append(out, mip.grads());
    if (kind == PoolingKind::sa) append(out, sa.grads());
    return out;
  }
};

// Cross-entropy gradient for one labelled bag.
inline ClassifierGrads classifier_backward(const PooledClassifier& c, const ClassifierPass& pass, int label) {
  const Matrix& bag = pass.input;
  const std::size_t classes = c.head.classes(), m = pass.z.size();
  ClassifierGrads g;
  g.loss = -std::log(std::max(pass.probs[static_cast<std::size_t>(label)], std::numeric_limits<double>::min()));
  g.head = {Matrix(classes, m), std::vector<double>(classes)};
  std::vector<double> dz(m, 0.0);
  for (std::size_t k = 0; k < classes; ++k) {
    const double d = pass.probs[k] - (static_cast<int>(k) == label ? 1.0 : 0.0);
    g.head.bias[k] = d;
    axpy(d, pass.z, g.head.weight.row(k));
    axpy(d, c.head.weight.row(k), dz);
  }
  switch (c.kind) {
    case PoolingKind::gap: {
      g.bag = Matrix(bag.rows(), bag.cols());
      const double inv = 1.0 / static_cast<double>(bag.rows());
      for (std::size_t k = 0; k < bag.rows(); ++k) axpy(inv, dz, g.bag.row(k));
      break;
    }
    case PoolingKind::mip:
      g.mip = mip_backward(bag, c.mip, pass.mip, dz);
      g.bag = g.mip.bag;
      break;
    case PoolingKind::sa:
      g.sa = sa_backward(c.sa, pass.sa, dz);
      g.bag = g.sa.bag;
      break;
  }
  if (!c.scale.empty())
    for (std::size_t k = 0; k < g.bag.rows(); ++k) {
      auto r = g.bag.row(k);
      for (std::size_t d = 0; d < r.size(); ++d) r[d] *= c.scale[d];
    }
  return g;
}

struct DataSplits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool standardize = true;  // fit the input standardizer on the training split when the model has none
};

struct Evaluation {
  double auc = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double loss = 0.0;
};

inline Evaluation evaluate_classifier(const PooledClassifier& c, const std::vector<Matrix>& bags,
                                      std::span<const int> labels, std::span<const std::size_t> idx) {
  Evaluation e;
  if (idx.empty()) return e;
  std::vector<std::vector<double>> probs;
  std::vector<int> y, pred;
  for (auto i : idx) {
    auto pass = classifier_forward(c, bags[i]);
    const int label = labels[i];
    e.loss -= std::log(std::max(pass.probs[static_cast<std::size_t>(label)], std::numeric_limits<double>::min()));
    pred.push_back(static_cast<int>(std::max_element(pass.probs.begin(), pass.probs.end()) - pass.probs.begin()));
    probs.push_back(std::move(pass.probs));
    y.push_back(label);
  }
  e.loss /= static_cast<double>(idx.size());
  e.accuracy = accuracy(pred, y);
  e.auc = class_auc(probs, y);
  return e;
}

// Model-selection score: AUC for binary tasks, accuracy otherwise.
inline double selection_score(const Evaluation& e, std::size_t classes) {
  const double s = classes == 2 ? e.auc : e.accuracy;
  return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
}

inline void require_usable_splits(const DataSplits& s, std::span<const int> labels, std::size_t classes) {
  if (s.train.empty() || s.test.empty()) throw DataError("degenerate split: train and test must be nonempty");
  std::vector<int> seen(classes, 0);
  for (auto i : s.train) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw DataError("label outside class range");
    seen[static_cast<std::size_t>(labels[i])] = 1;
  }
  if (std::count(seen.begin(), seen.end(), 1) < 2) throw DataError("degenerate split: training set has a single class");
}

struct ClassifierFit {
  PooledClassifier model;
  MetricReport report;
  std::vector<Evaluation> val_history;
};

inline MetricReport make_report(const Evaluation& test, const DataSplits& s, std::size_t best_epoch) {
  MetricReport r;
  r.auc = test.auc;
  r.accuracy = test.accuracy;
  r.loss = test.loss;
  r.n_train = s.train.size();
  r.n_val = s.val.size();
  r.n_test = s.test.size();
  r.best_epoch = best_epoch;
  return r;
}

// Trains pooling + head on frozen bags with Adam (coupled L2 decay). The returned
// model is the epoch with the best validation score; with zero epochs it is `init`.
inline ClassifierFit train_classifier(PooledClassifier init, const std::vector<Matrix>& bags, std::span<const int> labels,
                                      const DataSplits& splits, const TrainConfig& config) {
  const std::size_t classes = init.head.classes();
  require_usable_splits(splits, labels, classes);
  if (config.standardize && init.scale.empty()) fit_standardizer(init, bags, splits.train);
  ClassifierFit fit{init, {}, {}};
  PooledClassifier model = std::move(init);
  AdamConfig adam{config.lr, 0.9, 0.999, 1e-8, config.weight_decay, false};
  AdamState state;
  Rng rng(derive_seed(config.seed, {0xc1a5}));
  std::vector<std::size_t> order = splits.train;
  double best = -std::numeric_limits<double>::infinity();
  const auto& val_idx = splits.val.empty() ? splits.train : splits.val;
  GradBuffer buffer(model.params());
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      buffer.zero();
      for (std::size_t j = start; j < end; ++j) {
        const auto i = order[j];
        const auto pass = classifier_forward(model, bags[i]);
        const auto g = classifier_backward(model, pass, labels[i]);
        buffer.add(g.grads(model.kind), 1.0 / static_cast<double>(end - start));
      }
      adam_step(model.params(), buffer.view(), adam, state);
    }
    const Evaluation val = evaluate_classifier(model, bags, labels, val_idx);
    fit.val_history.push_back(val);
    const double score = selection_score(val, classes);
    if (score > best) {
      best = score;
      fit.model = model;
      fit.report.best_epoch = epoch;
    }
  }
  const Evaluation test = evaluate_classifier(fit.model, bags, labels, splits.test);
  fit.report = make_report(test, splits, fit.report.best_epoch);
  return fit;
}

struct LinearEvalResult {
  PooledClassifier model;  // head plus the fitted standardizer
  LinearHead head;
  MetricReport report;
};

// Linear evaluation on fixed feature vectors (one row per sample).
inline LinearEvalResult linear_eval(const Matrix& features, std::span<const int> labels, const DataSplits& splits,
                                    std::size_t classes, const TrainConfig& config) {
  require_shape(features.rows() == labels.size(), "linear_eval: features and labels differ in length");
  std::vector<Matrix> bags;
  bags.reserve(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i)
    bags.emplace_back(1, features.cols(), std::vector<double>(features.row(i).begin(), features.row(i).end()));
  auto init = make_classifier(PoolingKind::gap, features.cols(), classes, 1, config.seed);
  auto fit = train_classifier(std::move(init), bags, labels, splits, config);
  return {fit.model, fit.model.head, fit.report};
}

}  // namespace tilessl
