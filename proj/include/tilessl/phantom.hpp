#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tilessl/augment.hpp"
#include "tilessl/imaging.hpp"
#include "tilessl/manifest.hpp"
#include "tilessl/rng.hpp"
#include "tilessl/tiling.hpp"

namespace tilessl {

// Synthetic mammogram-like phantoms: smooth tissue background with per-image
// brightness and density variation, fine texture, an optional breast outline on
// a zero background, and small bright lesions.
struct PhantomConfig {
  std::size_t width = 128;
  std::size_t height = 128;
  double base_lo = 0.20;
  double base_hi = 0.60;
  std::size_t blobs = 8;
  double blob_amplitude = 0.12;
  double blob_sigma = 0.12;  // fraction of the image side
  double texture_sigma = 0.03;
  double texture_smooth = 1.0;
  double gamma_lo = 0.5;  // per-image display gamma, mimics scanner differences
  double gamma_hi = 2.0;
  bool breast_mask = false;
  double lesion_contrast = 0.25;
  double lesion_radius_lo = 6.0;
  double lesion_radius_hi = 9.0;
};

struct Lesion {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
  LesionClass kind = LesionClass::malignant_mass;
};

struct Phantom {
  Image16 image;
  std::vector<Lesion> lesions;
};

namespace detail {

inline void add_disk(std::vector<double>& buf, std::size_t w, std::size_t h, double cx, double cy, double rx, double ry,
                     double angle, double amplitude) {
  const double reach = std::max(rx, ry) + 2.0;
  const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - reach)), x1 = static_cast<std::ptrdiff_t>(std::ceil(cx + reach));
  const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - reach)), y1 = static_cast<std::ptrdiff_t>(std::ceil(cy + reach));
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0); y <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h) - 1, y1); ++y)
    for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0); x <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w) - 1, x1); ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
      const double r = std::sqrt(u * u + v * v);
      // Anti-aliased edge about one pixel wide in the scaled metric.
      const double edge = std::clamp((1.0 - r) * std::min(rx, ry) + 0.5, 0.0, 1.0);
      buf[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] += amplitude * edge;
    }
}

inline void add_segment(std::vector<double>& buf, std::size_t w, std::size_t h, double x0, double y0, double x1, double y1,
                        double amplitude) {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const auto steps = static_cast<std::size_t>(std::ceil(len * 2.0)) + 1;
  for (std::size_t s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / static_cast<double>(steps);
    const auto x = static_cast<std::ptrdiff_t>(std::lround(x0 + t * (x1 - x0)));
    const auto y = static_cast<std::ptrdiff_t>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) || y >= static_cast<std::ptrdiff_t>(h)) continue;
    auto& px = buf[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    px = std::max(px, amplitude);
  }
}

inline bool inside_breast(const PhantomConfig& c, double x, double y) {
  if (!c.breast_mask) return true;
  const double ax = 0.95 * static_cast<double>(c.width), ay = 0.47 * static_cast<double>(c.height);
  const double dx = x / ax, dy = (y - 0.5 * static_cast<double>(c.height)) / ay;
  return dx * dx + dy * dy <= 1.0;
}

}  // namespace detail

inline Lesion render_lesion(std::vector<double>& overlay, const PhantomConfig& c, LesionClass kind, double cx, double cy,
                            Rng& rng) {
  const std::size_t w = c.width, h = c.height;
  const double r = rng.uniform(c.lesion_radius_lo, c.lesion_radius_hi);
  const double amp = c.lesion_contrast;
  switch (kind) {
    case LesionClass::malignant_mass: {
      const double angle = rng.uniform(0.0, std::numbers::pi);
      detail::add_disk(overlay, w, h, cx, cy, r, r * rng.uniform(0.6, 0.9), angle, amp);
      std::vector<double> spikes(w * h, 0.0);
      const int count = 5 + static_cast<int>(rng.below(3));
      for (int s = 0; s < count; ++s) {
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double len = r * rng.uniform(1.6, 2.2);
        detail::add_segment(spikes, w, h, cx, cy, cx + len * std::cos(a), cy + len * std::sin(a), 0.6 * amp);
      }
      for (std::size_t i = 0; i < overlay.size(); ++i) overlay[i] = std::max(overlay[i], spikes[i]);
      break;
    }
    case LesionClass::benign_mass: detail::add_disk(overlay, w, h, cx, cy, r, r, 0.0, 0.8 * amp); break;
    case LesionClass::malignant_calcification: {
      const int count = 6 + static_cast<int>(rng.below(5));
      for (int s = 0; s < count; ++s) {
        const double a = rng.uniform(0.0, 2.0 * std::numbers::pi), d = r * std::sqrt(rng.uniform());
        detail::add_disk(overlay, w, h, cx + d * std::cos(a), cy + d * std::sin(a), 0.7, 0.7, 0.0, 1.8 * amp);
      }
      break;
    }
    case LesionClass::benign_calcification: {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      detail::add_disk(overlay, w, h, cx + 0.5 * r * std::cos(a), cy + 0.5 * r * std::sin(a), 1.5, 1.5, 0.0, 1.8 * amp);
      detail::add_disk(overlay, w, h, cx - 0.5 * r * std::cos(a), cy - 0.5 * r * std::sin(a), 1.5, 1.5, 0.0, 1.8 * amp);
      break;
    }
    case LesionClass::background: break;
  }
  return {cx, cy, r, kind};
}

inline Phantom make_phantom(const PhantomConfig& c, std::uint64_t seed, const std::vector<LesionClass>& lesions = {}) {
  Rng rng(seed);
  const std::size_t w = c.width, h = c.height;
  std::vector<double> buf(w * h, 0.0);
  const double base = rng.uniform(c.base_lo, c.base_hi);
  const double side = static_cast<double>(std::min(w, h));
  struct Blob {
    double x, y, s, a;
  };
  std::vector<Blob> blobs;
  for (std::size_t b = 0; b < c.blobs; ++b)
    blobs.push_back({rng.uniform(0.0, static_cast<double>(w)), rng.uniform(0.0, static_cast<double>(h)),
                     c.blob_sigma * side * rng.uniform(0.6, 1.6), c.blob_amplitude * rng.uniform(-1.0, 1.0)});
  std::vector<double> noise(w * h);
  for (auto& n : noise) n = rng.normal();
  if (c.texture_smooth > 0.0) noise = gaussian_blur_unit(noise, w, h, c.texture_smooth);
  double sd = 0.0;
  for (double n : noise) sd += n * n;
  sd = std::sqrt(sd / static_cast<double>(noise.size()));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = base;
      for (const auto& b : blobs) {
        const double dx = static_cast<double>(x) - b.x, dy = static_cast<double>(y) - b.y;
        v += b.a * std::exp(-(dx * dx + dy * dy) / (2.0 * b.s * b.s));
      }
      v += c.texture_sigma * noise[y * w + x] / (sd > 0.0 ? sd : 1.0);
      buf[y * w + x] = v;
    }

  Phantom out;
  std::vector<double> overlay(w * h, 0.0);
  const double margin = c.lesion_radius_hi * 2.5 + 2.0;
  for (auto kind : lesions) {
    double cx = 0.0, cy = 0.0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      cx = rng.uniform(margin, static_cast<double>(w) - margin);
      cy = rng.uniform(margin, static_cast<double>(h) - margin);
      if (detail::inside_breast(c, cx - margin, cy) && detail::inside_breast(c, cx + margin, cy) &&
          detail::inside_breast(c, cx, cy - margin) && detail::inside_breast(c, cx, cy + margin))
        break;
    }
    out.lesions.push_back(render_lesion(overlay, c, kind, cx, cy, rng));
  }
  const double gamma = std::exp(rng.uniform(std::log(c.gamma_lo), std::log(c.gamma_hi)));
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = std::pow(std::clamp(buf[i] + overlay[i], 0.0, 1.0), gamma);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (!detail::inside_breast(c, static_cast<double>(x), static_cast<double>(y))) buf[y * w + x] = 0.0;
      else buf[y * w + x] = std::clamp(buf[y * w + x], 1.0 / 65535.0, 1.0);
  out.image = from_unit(w, h, buf);
  return out;
}

// Whole-image binary dataset: `patients` patients with `views` images each; a
// positive patient carries one malignant mass in every view.
struct PhantomDatasetConfig {
  std::size_t patients = 250;
  std::size_t views = 2;
  double prevalence = 0.5;
  PhantomConfig image;
};

struct PhantomDataset {
  Manifest manifest;
  std::vector<Image16> images;
  std::vector<std::vector<Lesion>> lesions;
};

inline PhantomDataset make_whole_image_dataset(const PhantomDatasetConfig& config, std::uint64_t seed) {
  PhantomDataset ds;
  ds.manifest.scheme = LabelScheme::binary;
  Rng rng(derive_seed(seed, {0xda7a}));
  const auto positives = static_cast<std::size_t>(std::lround(config.prevalence * static_cast<double>(config.patients)));
  std::vector<int> labels(config.patients, 0);
  std::fill_n(labels.begin(), positives, 1);
  rng.shuffle(std::span<int>(labels));
  static const char* kViews[] = {"CC", "MLO"};
  for (std::size_t p = 0; p < config.patients; ++p) {
    char pid[32];
    std::snprintf(pid, sizeof(pid), "P%04zu", p);
    for (std::size_t v = 0; v < config.views; ++v) {
      std::vector<LesionClass> lesions;
      if (labels[p] == 1) lesions.push_back(LesionClass::malignant_mass);
      Phantom ph = make_phantom(config.image, derive_seed(seed, {p, v}), lesions);
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%s.png", pid, kViews[v % 2]);
      ds.manifest.entries.push_back({name, pid, labels[p], kViews[v % 2]});
      ds.images.push_back(std::move(ph.image));
      ds.lesions.push_back(std::move(ph.lesions));
    }
  }
  return ds;
}

// Annotated five-class patch dataset: each image carries one lesion of a random
// class; it contributes its ROI-centered patch and one random background patch.
struct AnnotatedPhantomConfig {
  std::size_t images = 200;
  std::size_t patch_size = 32;
  PhantomConfig image;
};

struct AnnotatedPatchDataset {
  Manifest manifest;  // five-class labels, one entry per patch
  std::vector<Image16> patches;
};

inline AnnotatedPatchDataset make_annotated_dataset(const AnnotatedPhantomConfig& config, std::uint64_t seed) {
  AnnotatedPatchDataset ds;
  ds.manifest.scheme = LabelScheme::five_class;
  PatchSpec spec;
  spec.size = config.patch_size;
  spec.background_max = 0.20;
  Rng pick(derive_seed(seed, {0xa770}));
  for (std::size_t i = 0; i < config.images; ++i) {
    const auto kind = static_cast<LesionClass>(1 + pick.below(4));
    Phantom ph = make_phantom(config.image, derive_seed(seed, {i}), {kind});
    const auto& lesion = ph.lesions.front();
    RoiAnnotation roi{static_cast<std::size_t>(std::lround(lesion.cx)), static_cast<std::size_t>(std::lround(lesion.cy)), kind};
    Rng rng(derive_seed(seed, {i, 0x7a4d}));
    char pid[32];
    std::snprintf(pid, sizeof(pid), "A%04zu", i);
    auto pair = extract_annotated_pair(ph.image, roi, spec, rng, pid);
    char name[64];
    std::snprintf(name, sizeof(name), "%s_roi.png", pid);
    ds.manifest.entries.push_back({name, pid, static_cast<int>(kind), "ROI"});
    ds.patches.push_back(std::move(pair.roi.image));
    std::snprintf(name, sizeof(name), "%s_rand.png", pid);
    ds.manifest.entries.push_back({name, pid, 0, "RANDOM"});
    ds.patches.push_back(std::move(pair.random.image));
  }
  return ds;
}

}  // namespace tilessl
