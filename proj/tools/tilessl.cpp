// tilessl command-line front end. Every command reads one JSON run config
// (--config), optionally patched with --set key.path=value, and writes its
// artifacts under paths.output_dir.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tilessl/checkpoint.hpp"
#include "tilessl/config.hpp"
#include "tilessl/experiments.hpp"
#include "tilessl/imaging.hpp"
#include "tilessl/manifest.hpp"
#include "tilessl/phantom.hpp"
#include "tilessl/pretrain.hpp"
#include "tilessl/prototypes.hpp"
#include "tilessl/tiling.hpp"
#include "tilessl/wholeimage.hpp"

namespace fs = std::filesystem;
using namespace tilessl;

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

class Tsv {
 public:
  Tsv(const fs::path& path, const std::string& header) : path_(path), out_(path) {
    if (!out_) throw DataError("cannot write " + path.string());
    out_ << header << '\n';
  }
  template <typename... T>
  void row(const T&... fields) {
    std::size_t i = 0;
    ((out_ << (i++ ? "\t" : "") << fields), ...);
    out_ << '\n';
  }
  ~Tsv() = default;

 private:
  fs::path path_;
  std::ofstream out_;
};

struct Context {
  RunConfig config;
  fs::path out;
};

fs::path require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("config is missing ") + what);
  if (!fs::exists(path)) throw DataError(std::string(what) + " not found: " + path);
  return path;
}

struct Dataset {
  Manifest manifest;
  std::vector<Image16> images;
  std::vector<int> labels;
};

Dataset load_dataset(const std::string& manifest_path) {
  require_file(manifest_path, "paths.manifest");
  Dataset d;
  d.manifest = read_manifest(manifest_path);
  for (const auto& e : d.manifest.entries) {
    const auto path = resolve_path(manifest_path, e.image_path);
    try {
      d.images.push_back(load_png16(path));
    } catch (const DataError& err) {
      throw DataError(std::string(err.what()) + " (manifest row " + e.image_path + ")");
    }
    d.labels.push_back(e.label);
  }
  return d;
}

Mlp load_encoder(const RunConfig& c) {
  require_file(c.paths.encoder, "paths.encoder");
  return load_checkpoint(c.paths.encoder);
}

void write_report(Tsv& t, const std::string& protocol, const std::string& pooling, const MetricReport& r) {
  t.row(protocol, pooling, fmt(r.auc), fmt(r.accuracy), fmt(r.loss), r.n_train, r.n_val, r.n_test, r.best_epoch);
}

const char* kReportHeader = "protocol\tpooling\tauc\taccuracy\tloss\tn_train\tn_val\tn_test\tbest_epoch";

void summary(const std::string& command, const std::vector<std::pair<std::string, Json>>& fields) {
  Json j;
  j["command"] = command;
  for (const auto& [k, v] : fields) j[k] = v;
  std::cout << j.dump() << std::endl;
}

// ---- commands ----------------------------------------------------------------

void cmd_phantom(const Context& ctx) {
  const auto& c = ctx.config;
  const std::uint64_t seed = *c.seed;
  fs::create_directories(ctx.out / "images");
  Manifest manifest;
  std::size_t count = 0;
  if (c.phantom.kind == "whole") {
    auto ds = make_whole_image_dataset(c.phantom.whole, seed);
    Tsv lesions(ctx.out / "lesions.tsv", "image_path\tcenter_x\tcenter_y\tradius\tclass");
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      auto& e = ds.manifest.entries[i];
      e.image_path = "images/" + e.image_path;
      save_png16(ds.images[i], (ctx.out / e.image_path).string());
      for (const auto& l : ds.lesions[i])
        lesions.row(e.image_path, fmt(l.cx), fmt(l.cy), fmt(l.radius), label_name(LabelScheme::five_class, static_cast<int>(l.kind)));
    }
    manifest = std::move(ds.manifest);
    count = ds.images.size();
  } else {
    auto ds = make_annotated_dataset(c.phantom.annotated, seed);
    for (std::size_t i = 0; i < ds.patches.size(); ++i) {
      auto& e = ds.manifest.entries[i];
      e.image_path = "images/" + e.image_path;
      save_png16(ds.patches[i], (ctx.out / e.image_path).string());
    }
    manifest = std::move(ds.manifest);
    count = ds.patches.size();
  }
  write_manifest(manifest, (ctx.out / "manifest.tsv").string());
  summary("phantom", {{"kind", c.phantom.kind}, {"images", count}});
}

void cmd_tile(const Context& ctx) {
  const auto& c = ctx.config;
  require_file(c.paths.manifest, "paths.manifest");
  const Manifest manifest = read_manifest(c.paths.manifest);
  fs::create_directories(ctx.out / "patches");
  Manifest patches;
  patches.scheme = manifest.scheme;
  Tsv sum(ctx.out / "tile_summary.tsv", "image_path\tgrid_patches\tkept_patches");
  std::size_t total = 0, kept_total = 0;
  for (const auto& e : manifest.entries) {
    const auto path = resolve_path(c.paths.manifest, e.image_path);
    Image16 image;
    try {
      image = load_png16(path);
    } catch (const DataError& err) {
      throw DataError(std::string(err.what()) + " (manifest row " + e.image_path + ")");
    }
    const auto stem = fs::path(e.image_path).stem().string();
    auto grid = tile_grid(image, c.patch, stem);
    const auto kept = filter_patches(grid, c.patch);
    for (const auto& p : kept) {
      char name[256];
      std::snprintf(name, sizeof(name), "patches/%s_x%05zu_y%05zu.png", stem.c_str(), p.x, p.y);
      save_png16(p.image, (ctx.out / name).string());
      patches.entries.push_back({name, e.patient_id, e.label, e.view});
    }
    sum.row(e.image_path, grid.size(), kept.size());
    total += grid.size();
    kept_total += kept.size();
  }
  write_manifest(patches, (ctx.out / "patches.tsv").string());
  summary("tile", {{"images", manifest.entries.size()}, {"grid_patches", total}, {"patches", kept_total}});
}

void cmd_pretrain(const Context& ctx) {
  const auto& c = ctx.config;
  const Dataset d = load_dataset(c.paths.manifest);
  const auto splits = patient_split_indices(d.manifest, c.split, *c.seed);
  std::vector<std::size_t> train_idx = splits.train, val_idx = splits.val;
  if (c.max_pretrain_patches > 0) {
    Rng rng(derive_seed(*c.seed, {0x9a7c}));
    for (auto* idx : {&train_idx, &val_idx}) {
      rng.shuffle(std::span<std::size_t>(*idx));
      const std::size_t cap = idx == &train_idx ? c.max_pretrain_patches : std::max<std::size_t>(2, c.max_pretrain_patches / 5);
      if (idx->size() > cap) idx->resize(cap);
      std::sort(idx->begin(), idx->end());
    }
  }
  std::vector<Image16> train, val;
  for (auto i : train_idx) train.push_back(d.images[i]);
  for (auto i : val_idx) val.push_back(d.images[i]);
  const auto result = pretrain(train, val, c.pretrain);
  Tsv hist(ctx.out / "loss_history.tsv", "epoch\tsplit\tloss");
  for (const auto& r : result.history) hist.row(r.epoch, r.split, fmt(r.loss));
  save_checkpoint(result.best.encoder, (ctx.out / "encoder.ckpt").string());
  save_checkpoint(result.best.projector, (ctx.out / "projector.ckpt").string());
  if (c.pretrain.method == SslMethod::swav) save_matrix(result.best.prototypes, (ctx.out / "prototypes.ckpt").string());
  if (c.pretrain.method == SslMethod::byol) save_checkpoint(result.best.predictor, (ctx.out / "predictor.ckpt").string());
  double best_val = 0.0;
  for (const auto& r : result.history)
    if (r.split == "val" && r.epoch == result.best_epoch) best_val = r.loss;
  Tsv s(ctx.out / "pretrain_summary.tsv", "method\tepochs\ttrain_patches\tval_patches\tbest_epoch\tbest_val_loss");
  s.row(method_name(c.pretrain.method), c.pretrain.epochs, train.size(), val.size(), result.best_epoch, fmt(best_val));
  summary("pretrain", {{"method", method_name(c.pretrain.method)}, {"best_epoch", result.best_epoch}});
}

void cmd_linear_eval(const Context& ctx) {
  const auto& c = ctx.config;
  const Mlp encoder = load_encoder(c);
  const Dataset d = load_dataset(c.paths.manifest);
  const auto splits = patient_split_indices(d.manifest, c.split, *c.seed);
  const std::size_t classes = label_count(d.manifest.scheme);
  Tsv t(ctx.out / "metrics.tsv", kReportHeader);
  MetricReport report;
  std::string pooling;
  if (d.manifest.scheme == LabelScheme::five_class) {
    // Patch-level task: one feature vector per patch.
    const Matrix f = patch_features(encoder, d.images, c.pretrain.input);
    report = linear_eval(f, d.labels, splits, classes, c.eval).report;
    pooling = "none";
  } else {
    const auto inputs = bag_inputs_all(d.images, c.bag_spec(), c.workers);
    const auto bags = encode_bags(encoder, inputs);
    auto init = make_classifier(c.pooling, encoder.output_dim(), classes, c.attention_hidden, derive_seed(*c.seed, {0x11}));
    report = train_classifier(std::move(init), bags, d.labels, splits, c.eval).report;
    pooling = pooling_name(c.pooling);
  }
  write_report(t, "linear_eval", pooling, report);
  summary("linear-eval", {{"auc", report.auc}, {"accuracy", report.accuracy}});
}

void cmd_finetune(const Context& ctx) {
  const auto& c = ctx.config;
  const Mlp encoder = load_encoder(c);
  const Dataset d = load_dataset(c.paths.manifest);
  if (d.manifest.scheme != LabelScheme::binary) throw DataError("finetune expects a whole-image (binary) manifest");
  const auto splits = patient_split_indices(d.manifest, c.split, *c.seed);
  WholeImageData data{d.images, d.labels, splits, 2};
  auto init = make_classifier(c.pooling, encoder.output_dim(), 2, c.attention_hidden, derive_seed(*c.seed, {0x11}));
  const auto r = finetune(encoder, std::move(init), data, c.bag_spec(), c.finetune, c.workers);
  Tsv t(ctx.out / "metrics.tsv", kReportHeader);
  write_report(t, "stage1", std::string(pooling_name(c.pooling)), r.stage1);
  write_report(t, "stage2", std::string(pooling_name(c.pooling)), r.report);
  save_checkpoint(r.encoder, (ctx.out / "finetuned_encoder.ckpt").string());
  summary("finetune", {{"stage1_auc", r.stage1.auc}, {"auc", r.report.auc}});
}

void cmd_sweep(const Context& ctx) {
  const auto& c = ctx.config;
  const Mlp encoder = load_encoder(c);
  const Dataset d = load_dataset(c.paths.manifest);
  if (d.manifest.scheme != LabelScheme::binary) throw DataError("sweep expects a whole-image (binary) manifest");
  const auto splits = patient_split_indices(d.manifest, c.split, *c.seed);
  const auto records = data_efficiency_sweep(d.manifest, d.images, splits, encoder, c.bag_spec(), c.sweep);
  Tsv t(ctx.out / "sweep.tsv", "fraction\tcondition\tpatients\tauc\taccuracy\tn_train\tn_val\tn_test\tbest_epoch");
  for (const auto& r : records)
    t.row(fmt(r.fraction), r.condition, r.patients, fmt(r.report.auc), fmt(r.report.accuracy), r.report.n_train,
          r.report.n_val, r.report.n_test, r.report.best_epoch);
  summary("sweep", {{"records", records.size()}});
}

void cmd_gridexp(const Context& ctx) {
  const auto& c = ctx.config;
  const Dataset d = load_dataset(c.paths.manifest);
  const auto splits = patient_split_indices(d.manifest, c.split, *c.seed);
  LabelledPatches data{d.images, d.labels, splits, label_count(d.manifest.scheme)};
  const Matrix acc = transform_grid_experiment(data, c.gridexp);
  std::ofstream out(ctx.out / "grid.tsv");
  if (!out) throw DataError("cannot write grid.tsv");
  out << "first\\second";
  for (auto k : c.gridexp.transforms) out << '\t' << transform_name(k);
  out << '\n';
  std::size_t filled = 0;
  for (std::size_t i = 0; i < acc.rows(); ++i) {
    out << transform_name(c.gridexp.transforms[i]);
    for (std::size_t j = 0; j < acc.cols(); ++j) {
      out << '\t' << fmt(acc(i, j));
      if (!std::isnan(acc(i, j))) ++filled;
    }
    out << '\n';
  }
  summary("gridexp", {{"cells", filled}});
}

void cmd_heatmap(const Context& ctx) {
  const auto& c = ctx.config;
  const Mlp encoder = load_encoder(c);
  const Dataset d = load_dataset(c.paths.manifest);
  if (d.manifest.scheme != LabelScheme::binary) throw DataError("heatmap expects a whole-image (binary) manifest");
  const auto splits = patient_split_indices(d.manifest, c.split, *c.seed);
  const auto inputs = bag_inputs_all(d.images, c.bag_spec(), c.workers);
  const auto bags = encode_bags(encoder, inputs);
  auto init = make_classifier(PoolingKind::mip, encoder.output_dim(), 2, c.attention_hidden, derive_seed(*c.seed, {0x11}));
  const auto fit = train_classifier(std::move(init), bags, d.labels, splits, c.eval);

  std::vector<std::size_t> chosen = c.heatmap.images;
  if (chosen.empty())
    for (auto i : splits.test)
      if (d.labels[i] == 1 && chosen.size() < c.heatmap.max_images) chosen.push_back(i);
  fs::create_directories(ctx.out / "heatmaps");
  Tsv index(ctx.out / "heatmaps.tsv", "image_path\tlabel\tprob_positive\trows\tcols\tgrid_file\traster_file");
  for (auto i : chosen) {
    if (i >= d.images.size()) throw ConfigError("heatmap.images refers to row " + std::to_string(i) + " beyond the manifest");
    const auto pass = classifier_forward(fit.model, bags[i]);
    const auto& b = inputs[i];
    const Heatmap h = attention_heatmap(pass.mip.scores, b.placements, b.rows, b.cols, c.patch.size);
    const auto stem = fs::path(d.manifest.entries[i].image_path).stem().string();
    const auto grid_file = "heatmaps/" + stem + ".tsv", raster_file = "heatmaps/" + stem + ".pgm";
    std::ofstream g(ctx.out / grid_file);
    for (std::size_t r = 0; r < h.grid.rows(); ++r) {
      for (std::size_t col = 0; col < h.grid.cols(); ++col) g << (col ? "\t" : "") << fmt(h.grid(r, col));
      g << '\n';
    }
    write_pgm((ctx.out / raster_file).string(), h.width, h.height, h.raster);
    index.row(d.manifest.entries[i].image_path, d.labels[i], fmt(pass.probs[1]), b.rows, b.cols, grid_file, raster_file);
  }
  summary("heatmap", {{"images", chosen.size()}, {"auc", fit.report.auc}});
}

void cmd_prototypes(const Context& ctx) {
  const auto& c = ctx.config;
  const Mlp encoder = load_encoder(c);
  require_file(c.paths.projector, "paths.projector");
  require_file(c.paths.prototypes, "paths.prototypes");
  const Mlp projector = load_checkpoint(c.paths.projector);
  Matrix protos = load_matrix(c.paths.prototypes);
  const Dataset d = load_dataset(c.paths.manifest);
  const Matrix z = normalize_rows(encode(projector, patch_features(encoder, d.images, c.pretrain.input))).unit;
  protos = normalize_rows(protos).unit;
  const auto a = assign(z, protos, c.prototypes.temperature);
  const std::size_t classes = label_count(d.manifest.scheme);
  const auto table = enrichment(a.index, d.labels, protos.rows(), classes);

  Tsv as(ctx.out / "assignments.tsv", "image_path\tlabel\tprototype\tprobability");
  for (std::size_t i = 0; i < z.rows(); ++i)
    as.row(d.manifest.entries[i].image_path, label_name(d.manifest.scheme, d.labels[i]), a.index[i], fmt(a.soft(i, a.index[i])));
  auto write_table = [&](const char* file, const Matrix& m, bool prototype_rows) {
    std::ofstream out(ctx.out / file);
    out << (prototype_rows ? "prototype" : "class");
    const std::size_t cols = m.cols();
    for (std::size_t j = 0; j < cols; ++j)
      out << '\t' << (prototype_rows ? std::string(label_name(d.manifest.scheme, static_cast<int>(j))) : "p" + std::to_string(j));
    out << '\n';
    for (std::size_t r = 0; r < m.rows(); ++r) {
      out << (prototype_rows ? "p" + std::to_string(r) : std::string(label_name(d.manifest.scheme, static_cast<int>(r))));
      for (std::size_t j = 0; j < cols; ++j) out << '\t' << fmt(m(r, j));
      out << '\n';
    }
  };
  write_table("enrichment_counts.tsv", table.counts, true);
  write_table("enrichment_per_class.tsv", table.per_class, false);
  write_table("enrichment_per_prototype.tsv", table.per_prototype, true);

  Tsv near(ctx.out / "nearest.tsv", "prototype\trank\timage_path\tdistance");
  const std::size_t k = std::min(c.prototypes.nearest, z.rows());
  for (std::size_t p = 0; p < protos.rows(); ++p) {
    const auto idx = nearest_patches(p, z, protos, k);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < z.cols(); ++j) s += (z(idx[r], j) - protos(p, j)) * (z(idx[r], j) - protos(p, j));
      near.row(p, r, d.manifest.entries[idx[r]].image_path, fmt(std::sqrt(s)));
    }
  }
  save_embeddings((ctx.out / "embeddings.bin").string(), z);
  Tsv ids(ctx.out / "embeddings_ids.tsv", "id\timage_path\tlabel");
  for (std::size_t i = 0; i < z.rows(); ++i)
    ids.row(i, d.manifest.entries[i].image_path, label_name(d.manifest.scheme, d.labels[i]));
  summary("prototypes", {{"embeddings", z.rows()}, {"prototypes", protos.rows()}});
}

void cmd_profile(const Context& ctx) {
  const auto& c = ctx.config;
  require_file(c.profile.image, "profile.image");
  const Image16 image = load_png16(c.profile.image);
  const auto values = intensity_profile(image, c.profile.probe);
  Tsv t(ctx.out / "profile.tsv", "index\tx\ty\tintensity");
  const auto& p = c.profile.probe;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(values.size() - 1);
    t.row(i, fmt(p.start.x + f * (p.end.x - p.start.x)), fmt(p.start.y + f * (p.end.y - p.start.y)), fmt(values[i]));
  }
  summary("profile", {{"samples", values.size()}});
}

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
  }
  return 1;
}

const char* kind_name(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
  }
  return "internal";
}

void report_error(const char* kind, const std::string& message) {
  Json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiled-patch self-supervised learning pipeline"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;

  using Command = void (*)(const Context&);
  const std::vector<std::tuple<std::string, std::string, Command>> commands{
      {"phantom", "generate a synthetic phantom dataset", cmd_phantom},
      {"tile", "tile manifest images into filtered patches", cmd_tile},
      {"pretrain", "self-supervised pretraining on patches", cmd_pretrain},
      {"linear-eval", "linear evaluation with a frozen encoder", cmd_linear_eval},
      {"finetune", "two-stage whole-image finetuning", cmd_finetune},
      {"sweep", "data-efficiency sweep, pretrained vs scratch", cmd_sweep},
      {"gridexp", "pairwise transformation experiment", cmd_gridexp},
      {"heatmap", "MIP attention heatmaps", cmd_heatmap},
      {"prototypes", "prototype assignment, retrieval and enrichment", cmd_prototypes},
      {"profile", "intensity profile along a line probe", cmd_profile},
  };
  std::map<std::string, Command> dispatch;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "run config (JSON)")->required();
    sub->add_option("--set", overrides, "override a config key: section.key=value");
    sub->add_option("-o,--out", out_dir, "output directory (overrides paths.output_dir)");
    sub->add_option("--seed", seed, "seed (overrides the config)");
    sub->add_option("--workers", workers, "worker threads");
    dispatch[name] = fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("config", e.what());
    return 2;
  }

  try {
    Json root = load_config_json(config_path);
    for (const auto& o : overrides) apply_override(root, o);
    if (seed) root["seed"] = *seed;
    if (workers) root["workers"] = *workers;
    if (!out_dir.empty()) root["paths"]["output_dir"] = out_dir;
    Context ctx{parse_run_config(root), {}};
    if (!ctx.config.seed) throw ConfigError("a seed is required (config key 'seed' or --seed)");
    if (ctx.config.paths.output_dir.empty()) throw ConfigError("paths.output_dir is required");
    ctx.out = ctx.config.paths.output_dir;
    fs::create_directories(ctx.out);
    dispatch.at(app.get_subcommands().front()->get_name())(ctx);
  } catch (const Error& e) {
    report_error(kind_name(e), e.what());
    return exit_code(e);
  } catch (const std::invalid_argument& e) {
    report_error("config", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    report_error("data", e.what());
    return 3;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 0;
}
