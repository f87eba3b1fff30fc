#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/imaging.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

struct PatchSpec {
  std::size_t size = 96;
  double overlap_fraction = 0.5;
  double background_max = 0.20;
  std::uint16_t background_threshold = 0;

  void validate() const {
    if (size < 8) throw ConfigError("patch size must be >= 8");
    if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) throw ConfigError("overlap_fraction must lie in [0,1)");
    if (!(background_max >= 0.0 && background_max <= 1.0)) throw ConfigError("background_max must lie in [0,1]");
  }

  std::size_t stride() const {
    const auto s = static_cast<std::size_t>(std::lround(static_cast<double>(size) * (1.0 - overlap_fraction)));
    return std::max<std::size_t>(1, s);
  }
};

struct Patch {
  Image16 image;
  std::size_t x = 0;  // top-left origin in source coordinates
  std::size_t y = 0;
  std::size_t grid_row = 0;
  std::size_t grid_col = 0;
  std::string source_id;
};

// Origins along one axis: multiples of the stride, plus one flush with the far edge.
inline std::vector<std::size_t> axis_origins(std::size_t extent, std::size_t size, std::size_t stride) {
  if (extent < size) throw DataError("image smaller than patch");
  std::vector<std::size_t> origins;
  for (std::size_t o = 0; o + size <= extent; o += stride) origins.push_back(o);
  if (origins.back() + size < extent) origins.push_back(extent - size);
  return origins;
}

inline Image16 crop(const Image16& image, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > image.width || y + h > image.height) throw ShapeError("crop: window outside image");
  Image16 out(w, h);
  for (std::size_t r = 0; r < h; ++r)
    std::copy_n(image.pixels.begin() + static_cast<std::ptrdiff_t>((y + r) * image.width + x), w,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(r * w));
  return out;
}

struct GridLayout {
  std::vector<std::size_t> xs;
  std::vector<std::size_t> ys;
  std::size_t rows() const { return ys.size(); }
  std::size_t cols() const { return xs.size(); }
};

inline GridLayout grid_layout(std::size_t width, std::size_t height, const PatchSpec& spec) {
  if (width < spec.size || height < spec.size)
    throw DataError("image " + std::to_string(width) + "x" + std::to_string(height) + " smaller than patch " +
                    std::to_string(spec.size));
  return {axis_origins(width, spec.size, spec.stride()), axis_origins(height, spec.size, spec.stride())};
}

// Row-major grid of patches covering the whole image.
inline std::vector<Patch> tile_grid(const Image16& image, const PatchSpec& spec, const std::string& source_id = {}) {
  spec.validate();
  const GridLayout layout = grid_layout(image.width, image.height, spec);
  std::vector<Patch> patches;
  patches.reserve(layout.rows() * layout.cols());
  for (std::size_t r = 0; r < layout.rows(); ++r)
    for (std::size_t c = 0; c < layout.cols(); ++c)
      patches.push_back({crop(image, layout.xs[c], layout.ys[r], spec.size, spec.size), layout.xs[c], layout.ys[r], r,
                         c, source_id});
  return patches;
}

inline double background_fraction(const Image16& patch, std::uint16_t threshold) {
  if (patch.pixels.empty()) return 1.0;
  const auto n = std::count_if(patch.pixels.begin(), patch.pixels.end(), [&](std::uint16_t p) { return p <= threshold; });
  return static_cast<double>(n) / static_cast<double>(patch.pixels.size());
}

// Drops patches with strictly more than background_max background.
inline std::vector<Patch> filter_patches(std::vector<Patch> patches, const PatchSpec& spec) {
  std::erase_if(patches, [&](const Patch& p) {
    return background_fraction(p.image, spec.background_threshold) > spec.background_max;
  });
  return patches;
}

enum class LesionClass : int {
  background = 0,
  malignant_mass = 1,
  benign_mass = 2,
  malignant_calcification = 3,
  benign_calcification = 4,
};

struct RoiAnnotation {
  std::size_t center_x = 0;
  std::size_t center_y = 0;
  LesionClass lesion_class = LesionClass::background;
};

struct AnnotatedPair {
  Patch roi;
  Patch random;
};

// Summed-area table of background pixels, (w+1) x (h+1).
inline std::vector<std::uint32_t> background_integral(const Image16& image, std::uint16_t threshold) {
  const std::size_t w = image.width + 1;
  std::vector<std::uint32_t> table(w * (image.height + 1), 0);
  for (std::size_t y = 0; y < image.height; ++y) {
    std::uint32_t run = 0;
    for (std::size_t x = 0; x < image.width; ++x) {
      run += image.at(x, y) <= threshold ? 1u : 0u;
      table[(y + 1) * w + x + 1] = table[y * w + x + 1] + run;
    }
  }
  return table;
}

// One patch centered on the ROI plus one uniformly drawn eligible non-overlapping patch.
inline AnnotatedPair extract_annotated_pair(const Image16& image, const RoiAnnotation& roi, const PatchSpec& spec,
                                            Rng& rng, const std::string& source_id = {}) {
  const std::size_t size = spec.size;
  if (image.width < size || image.height < size) throw DataError("extract_annotated_pair: image smaller than patch");
  const auto clamp_origin = [&](std::size_t center, std::size_t extent) {
    const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(center) - static_cast<std::ptrdiff_t>(size / 2);
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(o, 0, static_cast<std::ptrdiff_t>(extent - size)));
  };
  const std::size_t rx = clamp_origin(roi.center_x, image.width);
  const std::size_t ry = clamp_origin(roi.center_y, image.height);

  const auto table = background_integral(image, spec.background_threshold);
  const std::size_t tw = image.width + 1;
  const auto count_bg = [&](std::size_t x, std::size_t y) {
    return table[(y + size) * tw + x + size] - table[y * tw + x + size] - table[(y + size) * tw + x] + table[y * tw + x];
  };
  const double area = static_cast<double>(size * size);
  std::vector<std::pair<std::size_t, std::size_t>> eligible;
  for (std::size_t y = 0; y + size <= image.height; ++y) {
    for (std::size_t x = 0; x + size <= image.width; ++x) {
      const bool overlaps = (x < rx + size && rx < x + size) && (y < ry + size && ry < y + size);
      if (overlaps) continue;
      if (static_cast<double>(count_bg(x, y)) / area > spec.background_max) continue;
      eligible.emplace_back(x, y);
    }
  }
  if (eligible.empty()) throw DataError("extract_annotated_pair: no eligible random patch position");
  const auto [ox, oy] = eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
  return {Patch{crop(image, rx, ry, size, size), rx, ry, 0, 0, source_id},
          Patch{crop(image, ox, oy, size, size), ox, oy, 0, 0, source_id}};
}

}  // namespace tilessl
