#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <thread>
#include <vector>

#include "tilessl/classifier.hpp"
#include "tilessl/encoder.hpp"
#include "tilessl/error.hpp"
#include "tilessl/imaging.hpp"
#include "tilessl/optim.hpp"
#include "tilessl/params.hpp"
#include "tilessl/pooling.hpp"
#include "tilessl/rng.hpp"
#include "tilessl/tiling.hpp"

namespace tilessl {

struct BagSpec {
  PatchSpec patch;
  InputSpec input;
};

// Encoder inputs for every grid patch of one image. Background patches stay in
// the bag; pooling decides what to ignore.
struct BagInputs {
  Matrix x;
  std::vector<PatchPlacement> placements;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline BagInputs bag_inputs(const Image16& image, const BagSpec& spec) {
  spec.patch.validate();
  const auto layout = grid_layout(image.width, image.height, spec.patch);
  const auto patches = tile_grid(image, spec.patch);
  std::vector<Image16> raw;
  raw.reserve(patches.size());
  BagInputs out;
  out.rows = layout.ys.size();
  out.cols = layout.xs.size();
  for (const auto& p : patches) {
    raw.push_back(p.image);
    out.placements.push_back({{p.grid_row, p.grid_col}, p.x, p.y});
  }
  out.x = encoder_batch(raw, spec.input);
  return out;
}

inline std::vector<BagInputs> bag_inputs_all(std::span<const Image16> images, const BagSpec& spec, std::size_t workers = 1) {
  std::vector<BagInputs> out(images.size());
  workers = std::max<std::size_t>(1, std::min(workers, images.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < images.size(); ++i) out[i] = bag_inputs(images[i], spec);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < images.size(); i += workers) out[i] = bag_inputs(images[i], spec);
    });
  for (auto& t : pool) t.join();
  return out;
}

inline std::vector<Matrix> encode_bags(const Mlp& encoder, const std::vector<BagInputs>& inputs) {
  std::vector<Matrix> bags;
  bags.reserve(inputs.size());
  for (const auto& b : inputs) bags.push_back(encode(encoder, b.x));
  return bags;
}

// Whole-image augmentation used while finetuning: resized crop, flips, rotation
// about the center and a brightness offset in 16-bit units. Pixels mapped from
// outside the source are zero.
struct WholeImageAugment {
  Range scale{0.8, 1.2};
  bool hflip = true;
  bool vflip = true;
  Range rotation_deg{-25.0, 25.0};
  Range brightness{-20.0 * 257.0, 20.0 * 257.0};
};

inline Image16 augment_whole_image(const Image16& image, const WholeImageAugment& aug, Rng& rng) {
  const double s = rng.uniform(aug.scale.lo, aug.scale.hi);
  const bool fx = aug.hflip && rng.coin(), fy = aug.vflip && rng.coin();
  const double theta = rng.uniform(aug.rotation_deg.lo, aug.rotation_deg.hi) * std::numbers::pi / 180.0;
  const double delta = rng.uniform(aug.brightness.lo, aug.brightness.hi);
  const double cx = 0.5 * static_cast<double>(image.width - 1), cy = 0.5 * static_cast<double>(image.height - 1);
  // Output side covers a crop of relative size 1/s; s > 1 zooms in.
  const double ct = std::cos(theta) / s, st = std::sin(theta) / s;
  Image16 out{image.width, image.height, std::vector<std::uint16_t>(image.pixels.size(), 0)};
  const double maxx = static_cast<double>(image.width - 1), maxy = static_cast<double>(image.height - 1);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      if (fx) dx = -dx;
      if (fy) dy = -dy;
      const double sx = cx + ct * dx - st * dy, sy = cy + st * dx + ct * dy;
      if (sx < -0.5 || sy < -0.5 || sx > maxx + 0.5 || sy > maxy + 0.5) continue;
      const double v = sample_bilinear(image, sx, sy);
      out.pixels[y * image.width + x] = static_cast<std::uint16_t>(std::clamp(std::round(v + delta), 0.0, 65535.0));
    }
  return out;
}

struct FinetuneProtocol {
  TrainConfig stage1{100, 1e-4, 1e-3, 32, 0};
  TrainConfig stage2{50, 1e-5, 1e-2, 32, 0};
  WholeImageAugment augment;
};

struct WholeImageData {
  std::span<const Image16> images;
  std::span<const int> labels;
  DataSplits splits;
  std::size_t classes = 2;
};

struct EndToEndFit {
  Mlp encoder;
  PooledClassifier classifier;
  MetricReport report;
  std::vector<Evaluation> val_history;
};

struct FinetuneResult {
  Mlp encoder;
  PooledClassifier classifier;
  MetricReport stage1;
  MetricReport report;
};

namespace detail {

inline Evaluation evaluate_end_to_end(const Mlp& encoder, const PooledClassifier& c, const std::vector<BagInputs>& inputs,
                                      std::span<const int> labels, std::span<const std::size_t> idx) {
  std::vector<Matrix> bags(inputs.size());
  for (auto i : idx) bags[i] = encode(encoder, inputs[i].x);
  return evaluate_classifier(c, bags, labels, idx);
}

}  // namespace detail

// Trains encoder, pooling and head jointly with Adam. Training images are
// re-augmented every epoch from a per-(epoch, image) seed; validation and test use
// the plain images. The returned model is the best validation epoch, with the
// starting point counted as epoch 0.
inline EndToEndFit train_end_to_end(Mlp encoder, PooledClassifier classifier, const WholeImageData& data,
                                    const std::vector<BagInputs>& plain, const BagSpec& spec, const TrainConfig& config,
                                    const WholeImageAugment* augment) {
  require_usable_splits(data.splits, data.labels, data.classes);
  const auto& val_idx = data.splits.val.empty() ? data.splits.train : data.splits.val;
  if (config.standardize && classifier.scale.empty()) {
    std::vector<Matrix> bags(plain.size());
    for (auto i : data.splits.train) bags[i] = encode(encoder, plain[i].x);
    fit_standardizer(classifier, bags, data.splits.train);
  }
  EndToEndFit fit{encoder, classifier, {}, {}};
  double best = selection_score(detail::evaluate_end_to_end(encoder, classifier, plain, data.labels, val_idx), data.classes);
  fit.report.best_epoch = 0;

  auto all_params = [&] {
    ParamList p = classifier.params();
    append(p, encoder.params());
    return p;
  };
  GradBuffer buffer(all_params());
  AdamConfig adam{config.lr, 0.9, 0.999, 1e-8, config.weight_decay, false};
  AdamState state;
  Rng order_rng(derive_seed(config.seed, {0xe2e}));
  std::vector<std::size_t> order = data.splits.train;
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      buffer.zero();
      for (std::size_t j = start; j < end; ++j) {
        const auto i = order[j];
        Matrix x;
        if (augment) {
          Rng rng(derive_seed(config.seed, {epoch, i}));
          x = bag_inputs(augment_whole_image(data.images[i], *augment, rng), spec).x;
        } else {
          x = plain[i].x;
        }
        const auto tape = forward_tape(encoder, x);
        const auto pass = classifier_forward(classifier, tape.output);
        const auto g = classifier_backward(classifier, pass, data.labels[i]);
        const auto ge = backward_tape(encoder, tape, g.bag);
        GradList grads = g.grads(classifier.kind);
        append(grads, ge.grads());
        buffer.add(grads, 1.0 / static_cast<double>(end - start));
      }
      adam_step(all_params(), buffer.view(), adam, state);
    }
    const auto val = detail::evaluate_end_to_end(encoder, classifier, plain, data.labels, val_idx);
    fit.val_history.push_back(val);
    const double score = selection_score(val, data.classes);
    if (score > best) {
      best = score;
      fit.encoder = encoder;
      fit.classifier = classifier;
      fit.report.best_epoch = epoch;
    }
  }
  const auto test = detail::evaluate_end_to_end(fit.encoder, fit.classifier, plain, data.labels, data.splits.test);
  fit.report = make_report(test, data.splits, fit.report.best_epoch);
  return fit;
}

// Stage 1 trains pooling + head on frozen bags; stage 2 unfreezes the encoder and
// trains everything on augmented images. With zero stage-2 epochs the result is
// exactly the stage-1 fit.
inline FinetuneResult finetune(const Mlp& encoder, PooledClassifier init, const WholeImageData& data, const BagSpec& spec,
                               const FinetuneProtocol& protocol, std::size_t workers = 1) {
  const auto plain = bag_inputs_all(data.images, spec, workers);
  const auto bags = encode_bags(encoder, plain);
  auto stage1 = train_classifier(std::move(init), bags, data.labels, data.splits, protocol.stage1);
  FinetuneResult out{encoder, stage1.model, stage1.report, stage1.report};
  if (protocol.stage2.epochs == 0) return out;
  auto fit = train_end_to_end(encoder, stage1.model, data, plain, spec, protocol.stage2, &protocol.augment);
  out.encoder = std::move(fit.encoder);
  out.classifier = std::move(fit.classifier);
  out.report = fit.report;
  return out;
}

// Supervised baseline: random encoder and classifier trained end to end.
inline EndToEndFit train_scratch(const std::vector<std::size_t>& encoder_dims, PoolingKind pooling,
                                 std::size_t attention_hidden, const WholeImageData& data, const BagSpec& spec,
                                 const TrainConfig& config, const WholeImageAugment* augment, std::size_t workers = 1) {
  const auto plain = bag_inputs_all(data.images, spec, workers);
  Mlp encoder = make_mlp(encoder_dims, derive_seed(config.seed, {0x5c7a}));
  auto classifier = make_classifier(pooling, encoder.output_dim(), data.classes, attention_hidden, derive_seed(config.seed, {0xc1f}));
  return train_end_to_end(std::move(encoder), std::move(classifier), data, plain, spec, config, augment);
}

}  // namespace tilessl
