#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/imaging.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

enum class TransformKind { crop_resize, brightness, contrast, gamma, gaussian_blur, hist_eq, sharpen, highpass };

inline constexpr std::array<std::string_view, 8> kTransformNames{
    "crop_resize", "brightness", "contrast", "gamma", "gaussian_blur", "hist_eq", "sharpen", "highpass"};

inline std::string_view transform_name(TransformKind kind) { return kTransformNames[static_cast<std::size_t>(kind)]; }

inline std::optional<TransformKind> parse_transform(std::string_view name) {
  for (std::size_t i = 0; i < kTransformNames.size(); ++i)
    if (kTransformNames[i] == name) return static_cast<TransformKind>(i);
  // Short aliases as used in experiment tables.
  if (name == "crop") return TransformKind::crop_resize;
  if (name == "blur") return TransformKind::gaussian_blur;
  return std::nullopt;
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double sample(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
};

struct TransformRanges {
  Range crop_scale{0.5, 1.0};  // side length of the crop as a fraction of the patch side
  Range brightness{-0.2, 0.2};
  Range contrast{0.6, 1.4};
  Range gamma{0.5, 2.0};
  Range blur_sigma{0.5, 2.0};
  Range sharpen{0.5, 2.0};
  double sharpen_sigma = 1.0;

  void validate() const {
    const auto check = [](const Range& r, const char* name, double min_lo) {
      if (!(r.lo <= r.hi) || r.lo < min_lo) throw ConfigError(std::string("invalid augmentation range: ") + name);
    };
    check(crop_scale, "crop_scale", 1e-3);
    if (crop_scale.hi > 1.0) throw ConfigError("crop_scale must not exceed 1");
    check(brightness, "brightness", -1.0);
    check(contrast, "contrast", 0.0);
    check(gamma, "gamma", 1e-6);
    check(blur_sigma, "blur_sigma", 1e-6);
    check(sharpen, "sharpen", 0.0);
    if (!(sharpen_sigma > 0.0)) throw ConfigError("sharpen_sigma must be positive");
  }
};

// One transformation with its sampled parameters. Fields irrelevant to `kind` are ignored.
struct TransformSpec {
  TransformKind kind = TransformKind::gamma;
  double crop_scale = 1.0;
  double crop_offset_x = 0.0;  // fraction of the available slack, in [0,1]
  double crop_offset_y = 0.0;
  double delta = 0.0;
  double factor = 1.0;
  double gamma = 1.0;
  double sigma = 1.0;
  double strength = 0.0;
};

inline TransformSpec sample_transform(TransformKind kind, const TransformRanges& ranges, Rng& rng) {
  TransformSpec spec;
  spec.kind = kind;
  switch (kind) {
    case TransformKind::crop_resize:
      spec.crop_scale = ranges.crop_scale.sample(rng);
      spec.crop_offset_x = rng.uniform();
      spec.crop_offset_y = rng.uniform();
      break;
    case TransformKind::brightness: spec.delta = ranges.brightness.sample(rng); break;
    case TransformKind::contrast: spec.factor = ranges.contrast.sample(rng); break;
    case TransformKind::gamma: spec.gamma = ranges.gamma.sample(rng); break;
    case TransformKind::gaussian_blur:
    case TransformKind::highpass: spec.sigma = ranges.blur_sigma.sample(rng); break;
    case TransformKind::sharpen:
      spec.strength = ranges.sharpen.sample(rng);
      spec.sigma = ranges.sharpen_sigma;
      break;
    case TransformKind::hist_eq: break;
  }
  return spec;
}

namespace detail {

// Reflect-101 (mirror without repeating the edge sample).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace detail

// Separable Gaussian blur on a unit-range buffer, kernel truncated at 3 sigma, reflect padding.
inline std::vector<double> gaussian_blur_unit(const std::vector<double>& src, std::size_t w, std::size_t h, double sigma) {
  const auto kernel = detail::gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k)
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               src[y * w + detail::reflect_index(static_cast<std::ptrdiff_t>(x) + k, w)];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k)
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               tmp[detail::reflect_index(static_cast<std::ptrdiff_t>(y) + k, h) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

// CDF remap restricted to the occupied range [min, max] of the patch.
inline Image16 histogram_equalize(const Image16& patch) {
  const auto [lo_it, hi_it] = std::minmax_element(patch.pixels.begin(), patch.pixels.end());
  const std::uint32_t lo = *lo_it, hi = *hi_it;
  if (lo == hi) return patch;
  std::vector<std::uint32_t> cdf(hi - lo + 1, 0);
  for (auto p : patch.pixels) ++cdf[p - lo];
  for (std::size_t i = 1; i < cdf.size(); ++i) cdf[i] += cdf[i - 1];
  const double cdf_min = cdf[0];
  const double denom = static_cast<double>(patch.pixels.size()) - cdf_min;
  Image16 out(patch.width, patch.height);
  for (std::size_t i = 0; i < patch.pixels.size(); ++i) {
    const double t = denom > 0.0 ? (cdf[patch.pixels[i] - lo] - cdf_min) / denom : 0.0;
    out.pixels[i] = quantize16(static_cast<double>(lo) + t * static_cast<double>(hi - lo));
  }
  return out;
}

inline Image16 apply_transform(const Image16& patch, const TransformSpec& spec) {
  const std::size_t w = patch.width, h = patch.height;
  switch (spec.kind) {
    case TransformKind::crop_resize: {
      const auto side = [&](std::size_t extent) {
        const auto s = static_cast<std::size_t>(std::lround(spec.crop_scale * static_cast<double>(extent)));
        return std::clamp<std::size_t>(s, 1, extent);
      };
      const std::size_t cw = side(w), ch = side(h);
      const auto ox = static_cast<std::size_t>(std::lround(std::clamp(spec.crop_offset_x, 0.0, 1.0) * static_cast<double>(w - cw)));
      const auto oy = static_cast<std::size_t>(std::lround(std::clamp(spec.crop_offset_y, 0.0, 1.0) * static_cast<double>(h - ch)));
      Image16 sub(cw, ch);
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) sub.at(x, y) = patch.at(ox + x, oy + y);
      return resize(sub, w, h);
    }
    case TransformKind::hist_eq: return histogram_equalize(patch);
    default: break;
  }

  auto unit = to_unit(patch);
  switch (spec.kind) {
    case TransformKind::brightness:
      for (auto& p : unit) p += spec.delta;
      break;
    case TransformKind::contrast: {
      double mean = 0.0;
      for (double p : unit) mean += p;
      mean /= static_cast<double>(unit.size());
      for (auto& p : unit) p = (p - mean) * spec.factor + mean;
      break;
    }
    case TransformKind::gamma:
      for (auto& p : unit) p = std::pow(p, spec.gamma);
      break;
    case TransformKind::gaussian_blur: unit = gaussian_blur_unit(unit, w, h, spec.sigma); break;
    case TransformKind::sharpen: {
      const auto blurred = gaussian_blur_unit(unit, w, h, spec.sigma);
      for (std::size_t i = 0; i < unit.size(); ++i) unit[i] += spec.strength * (unit[i] - blurred[i]);
      break;
    }
    case TransformKind::highpass: {
      const auto blurred = gaussian_blur_unit(unit, w, h, spec.sigma);
      for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = unit[i] - blurred[i] + 0.5;
      break;
    }
    default: break;
  }
  return from_unit(w, h, unit);
}

struct AugmentPipeline {
  std::vector<TransformKind> kinds;
  TransformRanges ranges;
  std::uint64_t seed = 0;

  void validate() const {
    if (kinds.empty()) throw ConfigError("augmentation pipeline must contain at least one transform");
    ranges.validate();
  }
};

inline std::vector<TransformSpec> sample_pipeline(const AugmentPipeline& pipeline, Rng& rng) {
  std::vector<TransformSpec> specs;
  specs.reserve(pipeline.kinds.size());
  for (auto kind : pipeline.kinds) specs.push_back(sample_transform(kind, pipeline.ranges, rng));
  return specs;
}

inline Image16 apply_pipeline(const Image16& patch, const std::vector<TransformSpec>& specs) {
  Image16 out = patch;
  for (const auto& s : specs) out = apply_transform(out, s);
  return out;
}

struct ViewPair {
  Image16 a;
  Image16 b;
  std::vector<TransformSpec> params_a;
  std::vector<TransformSpec> params_b;
};

// Both views run the same ordered transform list with independently drawn parameters.
inline ViewPair make_view_pair(const Image16& patch, const AugmentPipeline& pipeline) {
  pipeline.validate();
  Rng rng(pipeline.seed);
  ViewPair pair;
  pair.params_a = sample_pipeline(pipeline, rng);
  pair.params_b = sample_pipeline(pipeline, rng);
  pair.a = apply_pipeline(patch, pair.params_a);
  pair.b = apply_pipeline(patch, pair.params_b);
  return pair;
}

// Planar three-channel raster; casting happens after every transform.
struct Raster3 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> planes;  // 3 * width * height, channel-major

  std::span<const std::uint16_t> channel(std::size_t c) const {
    return {planes.data() + c * width * height, width * height};
  }
};

inline Raster3 to_three_channel(const Image16& patch) {
  Raster3 out{patch.width, patch.height, {}};
  out.planes.reserve(3 * patch.pixels.size());
  for (int c = 0; c < 3; ++c) out.planes.insert(out.planes.end(), patch.pixels.begin(), patch.pixels.end());
  return out;
}

}  // namespace tilessl
