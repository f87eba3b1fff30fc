#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilessl/augment.hpp"
#include "tilessl/classifier.hpp"
#include "tilessl/error.hpp"
#include "tilessl/experiments.hpp"
#include "tilessl/phantom.hpp"
#include "tilessl/pretrain.hpp"
#include "tilessl/tiling.hpp"
#include "tilessl/wholeimage.hpp"

namespace tilessl {

using Json = nlohmann::json;

struct PathsConfig {
  std::string manifest;
  std::string output_dir;
  std::string encoder;     // encoder checkpoint
  std::string projector;   // projector checkpoint (prototype analysis)
  std::string prototypes;  // prototype matrix checkpoint
};

struct PhantomCommandConfig {
  std::string kind = "whole";  // "whole" or "annotated"
  PhantomDatasetConfig whole;
  AnnotatedPhantomConfig annotated;
};

struct HeatmapConfig {
  std::vector<std::size_t> images;  // manifest rows; empty = positive test images
  std::size_t max_images = 4;
};

struct PrototypeCommandConfig {
  double temperature = 0.1;
  std::size_t nearest = 8;
};

struct ProfileConfig {
  std::string image;
  LineProbe probe;
};

// Everything a command may need. Sections absent from the file keep defaults.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  PathsConfig paths;
  PhantomCommandConfig phantom;
  PatchSpec patch;
  std::array<double, 3> split{0.6, 0.2, 0.2};
  PretrainConfig pretrain;
  std::size_t max_pretrain_patches = 0;  // 0 = all
  PoolingKind pooling = PoolingKind::mip;
  std::size_t attention_hidden = 32;
  TrainConfig eval{100, 1e-3, 1e-2, 32, 0};
  FinetuneProtocol finetune;
  SweepConfig sweep;
  GridExperimentConfig gridexp;
  HeatmapConfig heatmap;
  PrototypeCommandConfig prototypes;
  ProfileConfig profile;

  BagSpec bag_spec() const { return {patch, pretrain.input}; }
};

inline RunConfig default_run_config() {
  RunConfig c;
  c.patch.size = 32;
  c.pretrain.input.side = 16;
  c.pretrain.encoder_hidden = {64, 64};
  c.pretrain.embedding = 32;
  c.pretrain.head_hidden = 32;
  c.pretrain.batch_size = 128;
  c.pretrain.epochs = 8;
  c.pretrain.optimizer = OptimizerKind::adam;
  c.pretrain.adam.lr = 3e-4;
  c.pretrain.augment.kinds = {TransformKind::crop_resize, TransformKind::gamma, TransformKind::contrast};
  c.pretrain.swav.queue_capacity = 300;
  c.gridexp.pretrain = c.pretrain;
  c.finetune.stage1 = {100, 1e-3, 1e-3, 32, 0};
  c.sweep.pooling = c.pooling;
  c.sweep.pretrained.stage2.epochs = 0;
  return c;
}

namespace detail {

// A JSON object whose keys must all be consumed; `finish` rejects leftovers.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ConfigError("config key '" + name(key) + "' has the wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  std::optional<Section> sub(const char* key) {
    used_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), name(key));
  }

  std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key().c_str()) + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_range(Section& s, const char* key, Range& r) {
  std::vector<double> v;
  if (!s.has(key)) {
    s.get(key, v);
    return;
  }
  s.get(key, v);
  if (v.size() != 2) throw ConfigError("config key '" + s.name(key) + "' must be [lo, hi]");
  r = {v[0], v[1]};
}

inline std::vector<TransformKind> read_transforms(Section& s, const char* key, std::vector<TransformKind> fallback) {
  std::vector<std::string> names;
  if (!s.has(key)) {
    s.get(key, names);
    return fallback;
  }
  s.get(key, names);
  std::vector<TransformKind> out;
  for (const auto& n : names) {
    const auto k = parse_transform(n);
    if (!k) throw ConfigError("unknown transform '" + n + "'");
    out.push_back(*k);
  }
  return out;
}

inline void read_augment(Section& s, AugmentPipeline& a) {
  a.kinds = read_transforms(s, "transforms", a.kinds);
  read_range(s, "crop_scale", a.ranges.crop_scale);
  read_range(s, "brightness", a.ranges.brightness);
  read_range(s, "contrast", a.ranges.contrast);
  read_range(s, "gamma", a.ranges.gamma);
  read_range(s, "blur_sigma", a.ranges.blur_sigma);
  read_range(s, "sharpen", a.ranges.sharpen);
  s.get("sharpen_sigma", a.ranges.sharpen_sigma);
  s.finish();
}

inline void read_train(Section& s, TrainConfig& t) {
  s.get("epochs", t.epochs);
  s.get("lr", t.lr);
  s.get("weight_decay", t.weight_decay);
  s.get("batch_size", t.batch_size);
  s.get("standardize", t.standardize);
  s.finish();
}

inline void read_whole_augment(Section& s, WholeImageAugment& a) {
  read_range(s, "scale", a.scale);
  s.get("hflip", a.hflip);
  s.get("vflip", a.vflip);
  read_range(s, "rotation_deg", a.rotation_deg);
  read_range(s, "brightness", a.brightness);
  s.finish();
}

inline void read_phantom_image(Section& s, PhantomConfig& p) {
  s.get("width", p.width);
  s.get("height", p.height);
  s.get("base_lo", p.base_lo);
  s.get("base_hi", p.base_hi);
  s.get("blobs", p.blobs);
  s.get("blob_amplitude", p.blob_amplitude);
  s.get("blob_sigma", p.blob_sigma);
  s.get("texture_sigma", p.texture_sigma);
  s.get("texture_smooth", p.texture_smooth);
  s.get("gamma_lo", p.gamma_lo);
  s.get("gamma_hi", p.gamma_hi);
  s.get("breast_mask", p.breast_mask);
  s.get("lesion_contrast", p.lesion_contrast);
  s.get("lesion_radius_lo", p.lesion_radius_lo);
  s.get("lesion_radius_hi", p.lesion_radius_hi);
}

inline void read_pretrain(Section& s, PretrainConfig& p, std::size_t* max_patches) {
  std::string method;
  s.get("method", method);
  if (!method.empty()) {
    const auto m = parse_method(method);
    if (!m) throw ConfigError("unknown SSL method '" + method + "'");
    p.method = *m;
  }
  s.get("epochs", p.epochs);
  s.get("batch_size", p.batch_size);
  s.get("input_side", p.input.side);
  s.get("channels", p.input.channels);
  if (p.input.channels != 1 && p.input.channels != 3) throw ConfigError("pretrain.channels must be 1 or 3");
  s.get("encoder_hidden", p.encoder_hidden);
  s.get("embedding", p.embedding);
  if (p.embedding < 2) throw ConfigError("pretrain.embedding must be >= 2");
  s.get("head_hidden", p.head_hidden);
  std::string opt;
  s.get("optimizer", opt);
  if (opt == "lars") p.optimizer = OptimizerKind::lars;
  else if (opt == "adam") p.optimizer = OptimizerKind::adam;
  else if (opt == "adamw") p.optimizer = OptimizerKind::adamw;
  else if (!opt.empty()) throw ConfigError("unknown optimizer '" + opt + "'");
  if (auto l = s.sub("lars")) {
    l->get("base_lr", p.lars.base_lr);
    l->get("weight_decay", p.lars.weight_decay);
    l->get("trust", p.lars.trust);
    l->get("momentum", p.lars.momentum);
    l->finish();
  }
  if (auto a = s.sub("adam")) {
    a->get("lr", p.adam.lr);
    a->get("beta1", p.adam.beta1);
    a->get("beta2", p.adam.beta2);
    a->get("eps", p.adam.eps);
    a->get("weight_decay", p.adam.weight_decay);
    a->finish();
  }
  s.get("temperature", p.nt_xent.temperature);
  if (!(p.nt_xent.temperature > 0.0)) throw ConfigError("pretrain.temperature must be positive");
  s.get("ema_decay", p.ema_decay);
  if (!(p.ema_decay >= 0.0 && p.ema_decay <= 1.0)) throw ConfigError("pretrain.ema_decay must lie in [0,1]");
  if (auto w = s.sub("swav")) {
    w->get("prototypes", p.swav.prototypes);
    w->get("queue", p.swav.queue_capacity);
    w->get("temperature", p.swav.temperature);
    w->get("epsilon", p.swav.epsilon);
    w->get("sinkhorn_iters", p.swav.sinkhorn_iters);
    w->finish();
  }
  if (auto a = s.sub("augment")) read_augment(*a, p.augment);
  if (max_patches) s.get("max_patches", *max_patches);
  s.finish();
}

inline PoolingKind read_pooling(Section& s, const char* key, PoolingKind fallback) {
  std::string name;
  s.get(key, name);
  if (name.empty()) return fallback;
  const auto k = parse_pooling(name);
  if (!k) throw ConfigError("unknown pooling '" + name + "'");
  return *k;
}

}  // namespace detail

inline RunConfig parse_run_config(const Json& root) {
  RunConfig c = default_run_config();
  detail::Section top(root, "");
  if (top.has("seed")) {
    std::uint64_t seed = 0;
    top.get("seed", seed);
    c.seed = seed;
  } else {
    top.get("seed", c.workers);  // marks the key as known
  }
  top.get("workers", c.workers);
  if (c.workers == 0) throw ConfigError("workers must be >= 1");

  if (auto s = top.sub("paths")) {
    s->get("manifest", c.paths.manifest);
    s->get("output_dir", c.paths.output_dir);
    s->get("encoder", c.paths.encoder);
    s->get("projector", c.paths.projector);
    s->get("prototypes", c.paths.prototypes);
    s->finish();
  }
  if (auto s = top.sub("phantom")) {
    s->get("kind", c.phantom.kind);
    if (c.phantom.kind != "whole" && c.phantom.kind != "annotated")
      throw ConfigError("phantom.kind must be 'whole' or 'annotated'");
    s->get("patients", c.phantom.whole.patients);
    s->get("views", c.phantom.whole.views);
    s->get("prevalence", c.phantom.whole.prevalence);
    s->get("images", c.phantom.annotated.images);
    s->get("patch_size", c.phantom.annotated.patch_size);
    if (auto img = s->sub("image")) {
      detail::read_phantom_image(*img, c.phantom.whole.image);
      c.phantom.annotated.image = c.phantom.whole.image;
      img->finish();
    }
    s->finish();
  }
  if (auto s = top.sub("patch")) {
    s->get("size", c.patch.size);
    s->get("overlap", c.patch.overlap_fraction);
    s->get("background_max", c.patch.background_max);
    s->get("background_threshold", c.patch.background_threshold);
    s->finish();
  }
  c.patch.validate();
  if (auto s = top.sub("split")) {
    s->get("train", c.split[0]);
    s->get("val", c.split[1]);
    s->get("test", c.split[2]);
    s->finish();
  }
  if (auto s = top.sub("pretrain")) detail::read_pretrain(*s, c.pretrain, &c.max_pretrain_patches);
  c.gridexp.pretrain = c.pretrain;
  if (auto s = top.sub("pooling")) {
    c.pooling = detail::read_pooling(*s, "kind", c.pooling);
    s->get("attention_hidden", c.attention_hidden);
    s->finish();
  }
  c.sweep.pooling = c.pooling;
  c.sweep.attention_hidden = c.attention_hidden;
  if (auto s = top.sub("eval")) detail::read_train(*s, c.eval);
  if (auto s = top.sub("finetune")) {
    if (auto t = s->sub("stage1")) detail::read_train(*t, c.finetune.stage1);
    if (auto t = s->sub("stage2")) detail::read_train(*t, c.finetune.stage2);
    if (auto a = s->sub("augment")) detail::read_whole_augment(*a, c.finetune.augment);
    s->finish();
  }
  c.sweep.pretrained.stage1 = c.finetune.stage1;
  c.sweep.pretrained.augment = c.finetune.augment;
  if (auto s = top.sub("sweep")) {
    s->get("fractions", c.sweep.fractions);
    s->get("stage2_epochs", c.sweep.pretrained.stage2.epochs);
    if (auto t = s->sub("scratch")) detail::read_train(*t, c.sweep.scratch);
    s->get("scratch_augment", c.sweep.scratch_augment);
    c.sweep.pooling = detail::read_pooling(*s, "pooling", c.sweep.pooling);
    s->finish();
  }
  if (c.sweep.pretrained.stage2.epochs > 0) {
    const auto epochs = c.sweep.pretrained.stage2.epochs;
    c.sweep.pretrained.stage2 = c.finetune.stage2;
    c.sweep.pretrained.stage2.epochs = epochs;
  }
  c.gridexp.eval = c.eval;
  c.gridexp.transforms = {TransformKind::crop_resize, TransformKind::gamma, TransformKind::contrast};
  if (auto s = top.sub("gridexp")) {
    c.gridexp.transforms = detail::read_transforms(*s, "transforms", c.gridexp.transforms);
    s->get("pair_budget", c.gridexp.pair_budget);
    if (auto p = s->sub("pretrain")) detail::read_pretrain(*p, c.gridexp.pretrain, nullptr);
    s->finish();
  }
  if (auto s = top.sub("heatmap")) {
    s->get("images", c.heatmap.images);
    s->get("max_images", c.heatmap.max_images);
    s->finish();
  }
  if (auto s = top.sub("prototypes")) {
    s->get("temperature", c.prototypes.temperature);
    s->get("nearest", c.prototypes.nearest);
    s->finish();
  }
  if (auto s = top.sub("profile")) {
    s->get("image", c.profile.image);
    std::vector<double> a, b;
    s->get("start", a);
    s->get("end", b);
    if (!a.empty()) {
      if (a.size() != 2) throw ConfigError("profile.start must be [x, y]");
      c.profile.probe.start = {a[0], a[1]};
    }
    if (!b.empty()) {
      if (b.size() != 2) throw ConfigError("profile.end must be [x, y]");
      c.profile.probe.end = {b[0], b[1]};
    }
    s->get("samples", c.profile.probe.samples);
    s->finish();
  }
  top.finish();

  if (c.seed) {
    const auto seed = *c.seed;
    c.pretrain.seed = c.gridexp.pretrain.seed = seed;
    c.pretrain.augment.seed = c.gridexp.pretrain.augment.seed = seed;
    c.eval.seed = c.gridexp.eval.seed = derive_seed(seed, {0xe7a1});
    c.finetune.stage1.seed = derive_seed(seed, {0xf1});
    c.finetune.stage2.seed = derive_seed(seed, {0xf2});
    c.sweep.seed = derive_seed(seed, {0x5e});
  }
  c.pretrain.workers = c.gridexp.pretrain.workers = c.workers;
  c.sweep.workers = c.workers;
  return c;
}

// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
// possible, otherwise taken as a string.
inline void apply_override(Json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;
  }
  Json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override has an empty key segment: " + assignment);
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline Json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

}  // namespace tilessl
