#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tilessl/augment.hpp"
#include "tilessl/classifier.hpp"
#include "tilessl/encoder.hpp"
#include "tilessl/error.hpp"
#include "tilessl/manifest.hpp"
#include "tilessl/pretrain.hpp"
#include "tilessl/rng.hpp"
#include "tilessl/wholeimage.hpp"

namespace tilessl {

// Entry indices of each split produced by stratified_patient_split.
inline DataSplits patient_split_indices(const Manifest& manifest, const std::array<double, 3>& ratios, std::uint64_t seed) {
  const auto split = stratified_patient_split(manifest, ratios, seed);
  std::map<std::string, int> where;
  for (const auto& e : split.train.entries) where[e.patient_id] = 0;
  for (const auto& e : split.val.entries) where[e.patient_id] = 1;
  for (const auto& e : split.test.entries) where[e.patient_id] = 2;
  DataSplits out;
  std::array<std::vector<std::size_t>*, 3> dst{&out.train, &out.val, &out.test};
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) dst[where.at(manifest.entries[i].patient_id)]->push_back(i);
  return out;
}

// Nested patient-level subsets of `pool` (entry indices). Patients of each stratum
// are shuffled once; a fraction takes the first round(f * n) of every stratum, so
// a smaller fraction is always a prefix of a larger one.
inline std::vector<std::vector<std::size_t>> nested_patient_subsets(const Manifest& manifest,
                                                                    std::span<const std::size_t> pool,
                                                                    std::span<const double> fractions,
                                                                    std::uint64_t seed) {
  Manifest sub;
  sub.scheme = manifest.scheme;
  for (auto i : pool) sub.entries.push_back(manifest.entries[i]);
  const auto groups = group_patients(sub);
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t g = 0; g < groups.size(); ++g) strata[groups[g].stratum].push_back(g);
  for (auto& [stratum, members] : strata) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(stratum), 0x5e7}));
    rng.shuffle(std::span<std::size_t>(members));
  }
  std::vector<std::vector<std::size_t>> out;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("subset fraction must lie in (0, 1]");
    std::vector<std::size_t> picked;
    std::set<int> classes;
    for (const auto& [stratum, members] : strata) {
      const auto take = static_cast<std::size_t>(std::lround(f * static_cast<double>(members.size())));
      for (std::size_t k = 0; k < std::min(take, members.size()); ++k)
        for (auto e : groups[members[k]].entries) {
          picked.push_back(pool[e]);
          classes.insert(sub.entries[e].label);
        }
    }
    if (classes.size() < strata.size())
      throw DataError("training fraction " + std::to_string(f) + " leaves a class without images");
    std::sort(picked.begin(), picked.end());
    out.push_back(std::move(picked));
  }
  return out;
}

struct SweepConfig {
  std::vector<double> fractions{0.10, 0.25, 0.50, 0.75, 0.90, 1.0};
  PoolingKind pooling = PoolingKind::gap;
  std::size_t attention_hidden = 32;
  FinetuneProtocol pretrained;  // stage2.epochs == 0 gives a linear head on frozen features
  TrainConfig scratch{30, 1e-3, 1e-4, 16, 0};
  bool scratch_augment = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct SweepRecord {
  double fraction = 0.0;
  std::string condition;  // "pretrained" or "scratch"
  std::size_t patients = 0;
  MetricReport report;
};

// Pretrained-vs-scratch comparison over nested training fractions. Val and test
// splits are fixed; only the training patients shrink.
inline std::vector<SweepRecord> data_efficiency_sweep(const Manifest& manifest, std::span<const Image16> images,
                                                      const DataSplits& splits, const Mlp& pretrained_encoder,
                                                      const BagSpec& spec, const SweepConfig& config) {
  require_shape(images.size() == manifest.entries.size(), "sweep: images and manifest differ in length");
  std::vector<int> labels;
  for (const auto& e : manifest.entries) labels.push_back(e.label);
  const auto subsets = nested_patient_subsets(manifest, splits.train, config.fractions, config.seed);
  const std::size_t classes = label_count(manifest.scheme);
  std::vector<std::size_t> dims{pretrained_encoder.input_dim()};
  for (const auto& l : pretrained_encoder.layers) dims.push_back(l.out());

  std::vector<SweepRecord> out;
  for (std::size_t f = 0; f < subsets.size(); ++f) {
    WholeImageData data{images, labels, {subsets[f], splits.val, splits.test}, classes};
    std::set<std::string> patients;
    for (auto i : subsets[f]) patients.insert(manifest.entries[i].patient_id);

    FinetuneProtocol protocol = config.pretrained;
    protocol.stage1.seed = derive_seed(config.seed, {f, 1});
    protocol.stage2.seed = derive_seed(config.seed, {f, 2});
    auto init = make_classifier(config.pooling, pretrained_encoder.output_dim(), classes, config.attention_hidden,
                                derive_seed(config.seed, {f, 3}));
    const auto ft = finetune(pretrained_encoder, std::move(init), data, spec, protocol, config.workers);
    out.push_back({config.fractions[f], "pretrained", patients.size(), ft.report});

    TrainConfig scratch = config.scratch;
    scratch.seed = derive_seed(config.seed, {f, 4});
    const auto sc = train_scratch(dims, config.pooling, config.attention_hidden, data, spec, scratch,
                                  config.scratch_augment ? &protocol.augment : nullptr, config.workers);
    out.push_back({config.fractions[f], "scratch", patients.size(), sc.report});
  }
  return out;
}

struct LabelledPatches {
  std::span<const Image16> patches;
  std::span<const int> labels;
  DataSplits splits;
  std::size_t classes = 5;
};

struct GridExperimentConfig {
  std::vector<TransformKind> transforms;
  std::size_t pair_budget = std::numeric_limits<std::size_t>::max();
  PretrainConfig pretrain;
  TrainConfig eval{100, 1e-3, 1e-2, 32, 0};
};

// Frozen-encoder features for every patch.
inline Matrix patch_features(const Mlp& encoder, std::span<const Image16> patches, const InputSpec& input) {
  return encode(encoder, encoder_batch(patches, input));
}

// Cell (i, j) pretrains with the pipeline [t_i, t_j] ([t_i] on the diagonal) and
// records linear-eval test accuracy. Cells are visited row-major; once the budget
// is spent the remaining cells stay NaN.
inline Matrix transform_grid_experiment(const LabelledPatches& data, const GridExperimentConfig& config) {
  const std::size_t n = config.transforms.size();
  if (n == 0) throw ConfigError("transform grid needs at least one transform");
  Matrix acc(n, n, std::numeric_limits<double>::quiet_NaN());
  std::vector<Image16> train, val;
  for (auto i : data.splits.train) train.push_back(data.patches[i]);
  for (auto i : data.splits.val) val.push_back(data.patches[i]);
  std::size_t spent = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (spent++ >= config.pair_budget) return acc;
      PretrainConfig pc = config.pretrain;
      pc.augment.kinds = i == j ? std::vector<TransformKind>{config.transforms[i]}
                                : std::vector<TransformKind>{config.transforms[i], config.transforms[j]};
      const auto run = pretrain(train, val, pc);
      const Matrix features = patch_features(run.best.encoder, data.patches, pc.input);
      TrainConfig ec = config.eval;
      ec.seed = derive_seed(config.eval.seed, {i, j});
      acc(i, j) = linear_eval(features, data.labels, data.splits, data.classes, ec).report.accuracy;
    }
  return acc;
}

}  // namespace tilessl
