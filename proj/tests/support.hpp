#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tilessl/imaging.hpp"
#include "tilessl/matrix.hpp"
#include "tilessl/rng.hpp"

namespace testing_support {

using tilessl::Image16;
using tilessl::Matrix;
using tilessl::Rng;

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (auto& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

inline Image16 random_image(std::size_t w, std::size_t h, std::uint64_t seed, std::uint16_t lo = 0, std::uint16_t hi = 65535) {
  Rng rng(seed);
  Image16 img{w, h, std::vector<std::uint16_t>(w * h)};
  for (auto& p : img.pixels) p = static_cast<std::uint16_t>(lo + rng.below(static_cast<std::uint64_t>(hi - lo) + 1));
  return img;
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Compares `analytic` against central differences of `loss` for every entry of
// `x`. Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps entries
// whose true gradient is ~0 from dividing round-off by round-off.
inline GradCheck check_gradient(const std::function<double()>& loss, std::span<double> x,
                                std::span<const double> analytic, double h = 1e-4, double floor = 1e-6) {
  GradCheck out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = loss();
    x[i] = keep - h;
    const double down = loss();
    x[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    out.max_rel = std::max(out.max_rel, std::abs(analytic[i] - numeric) / denom);
    ++out.checked;
  }
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tilessl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
