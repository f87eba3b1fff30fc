#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <csetjmp>
#include <string>
#include <vector>

#include "tilessl/error.hpp"

namespace tilessl {

// Single-channel 16-bit raster, row-major.
struct Image16 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> pixels;

  Image16() = default;
  Image16(std::size_t w, std::size_t h, std::uint16_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}
  Image16(std::size_t w, std::size_t h, std::vector<std::uint16_t> px) : width(w), height(h), pixels(std::move(px)) {
    if (w == 0 || h == 0 || pixels.size() != w * h) throw ShapeError("Image16: pixel count does not match dimensions");
  }

  std::uint16_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint16_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  bool valid() const { return width >= 1 && height >= 1 && pixels.size() == width * height; }

  friend bool operator==(const Image16&, const Image16&) = default;
};

class ImageIoError : public DataError {
 public:
  enum class Reason { missing_file, multi_channel, unsupported_depth, corrupt_stream, unwritable };
  ImageIoError(Reason reason, const std::string& what) : DataError(what), reason_(reason) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

namespace detail {

struct PngErrorSink {
  char message[256] = {0};
};

inline void png_error_to_sink(png_structp png, png_const_charp msg) {
  auto* sink = static_cast<PngErrorSink*>(png_get_error_ptr(png));
  std::snprintf(sink->message, sizeof(sink->message), "%s", msg ? msg : "unknown libpng error");
  png_longjmp(png, 1);
}

inline void png_warning_ignore(png_structp, png_const_charp) {}

struct PngReadJob {
  PngErrorSink sink;
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int bit_depth = 0;
  int color_type = 0;
  bool header_only_failure = false;  // set when the header is valid but unsupported
  std::vector<unsigned char> raw;
};

// Only trivially destructible locals live in this frame, so longjmp is safe.
inline bool png_read_raw(std::FILE* fp, PngReadJob& job) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &job.sink, png_error_to_sink, png_warning_ignore);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  job.width = png_get_image_width(png, info);
  job.height = png_get_image_height(png, info);
  job.bit_depth = png_get_bit_depth(png, info);
  job.color_type = png_get_color_type(png, info);
  if (job.color_type != PNG_COLOR_TYPE_GRAY || (job.bit_depth != 8 && job.bit_depth != 16)) {
    job.header_only_failure = true;
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  if (job.bit_depth == 16) png_set_swap(png);  // little-endian host order
  png_read_update_info(png, info);
  const png_size_t stride = png_get_rowbytes(png, info);
  job.raw.resize(stride * job.height);
  for (png_uint_32 y = 0; y < job.height; ++y) png_read_row(png, job.raw.data() + y * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool png_write_raw(std::FILE* fp, const Image16& image, PngErrorSink& sink) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink, png_error_to_sink, png_warning_ignore);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_set_swap(png);
  for (std::size_t y = 0; y < image.height; ++y) {
    // libpng takes a non-const row pointer but does not modify the row.
    auto* row = reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(image.pixels.data() + y * image.width));
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

// Reads a grayscale PNG of bit depth 8 or 16. 8-bit samples are promoted by x257.
inline Image16 load_png16(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw ImageIoError(ImageIoError::Reason::missing_file, "cannot open image: " + path);
  unsigned char signature[8] = {0};
  const std::size_t got = std::fread(signature, 1, 8, fp);
  if (got != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    std::fclose(fp);
    throw ImageIoError(ImageIoError::Reason::corrupt_stream, "not a PNG stream: " + path);
  }
  std::rewind(fp);
  detail::PngReadJob job;
  const bool ok = detail::png_read_raw(fp, job);
  std::fclose(fp);
  if (!ok) {
    if (job.header_only_failure) {
      if (job.color_type != PNG_COLOR_TYPE_GRAY)
        throw ImageIoError(ImageIoError::Reason::multi_channel, "image is not single-channel grayscale: " + path);
      throw ImageIoError(ImageIoError::Reason::unsupported_depth,
                         "unsupported bit depth " + std::to_string(job.bit_depth) + ": " + path);
    }
    throw ImageIoError(ImageIoError::Reason::corrupt_stream,
                       "corrupt PNG stream (" + std::string(job.sink.message) + "): " + path);
  }
  Image16 image(job.width, job.height);
  if (job.bit_depth == 16) {
    std::memcpy(image.pixels.data(), job.raw.data(), image.pixels.size() * sizeof(std::uint16_t));
  } else {
    for (std::size_t i = 0; i < image.pixels.size(); ++i)
      image.pixels[i] = static_cast<std::uint16_t>(job.raw[i] * 257u);
  }
  return image;
}

inline void save_png16(const Image16& image, const std::string& path) {
  if (!image.valid()) throw ShapeError("save_png16: invalid image");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw ImageIoError(ImageIoError::Reason::unwritable, "cannot write image: " + path);
  detail::PngErrorSink sink;
  const bool ok = detail::png_write_raw(fp, image, sink);
  const bool closed = std::fclose(fp) == 0;
  if (!ok || !closed)
    throw ImageIoError(ImageIoError::Reason::unwritable, "failed writing PNG (" + std::string(sink.message) + "): " + path);
}

inline std::uint16_t quantize16(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 65535.0) return 65535;
  return static_cast<std::uint16_t>(std::floor(v + 0.5));
}

// Bilinear sample at continuous pixel coordinates; coordinates are clamped to the image.
inline double sample_bilinear(const Image16& image, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(image.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(image.height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, image.width - 1);
  const std::size_t y1 = std::min(y0 + 1, image.height - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double top = image.at(x0, y0) * (1.0 - fx) + image.at(x1, y0) * fx;
  const double bottom = image.at(x0, y1) * (1.0 - fx) + image.at(x1, y1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

// Corner-aligned bilinear resize: output corners sample input corners exactly.
inline Image16 resize(const Image16& image, std::size_t new_width, std::size_t new_height) {
  if (new_width == 0 || new_height == 0) throw ShapeError("resize: target dimensions must be >= 1");
  if (new_width == image.width && new_height == image.height) return image;
  const double sx = new_width > 1 ? static_cast<double>(image.width - 1) / static_cast<double>(new_width - 1) : 0.0;
  const double sy = new_height > 1 ? static_cast<double>(image.height - 1) / static_cast<double>(new_height - 1) : 0.0;
  Image16 out(new_width, new_height);
  for (std::size_t y = 0; y < new_height; ++y)
    for (std::size_t x = 0; x < new_width; ++x)
      out.at(x, y) = quantize16(sample_bilinear(image, static_cast<double>(x) * sx, static_cast<double>(y) * sy));
  return out;
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct LineProbe {
  Point2 start;
  Point2 end;
  std::size_t samples = 2;
};

inline std::vector<double> intensity_profile(const Image16& image, const LineProbe& probe) {
  const auto inside = [&](Point2 p) {
    return p.x >= 0.0 && p.y >= 0.0 && p.x <= static_cast<double>(image.width - 1) &&
           p.y <= static_cast<double>(image.height - 1);
  };
  if (probe.samples < 2) throw DataError("intensity_profile: probe needs at least 2 samples");
  if (!inside(probe.start) || !inside(probe.end)) throw DataError("intensity_profile: probe endpoint outside image");
  std::vector<double> out(probe.samples);
  const double steps = static_cast<double>(probe.samples - 1);
  for (std::size_t i = 0; i < probe.samples; ++i) {
    const double t = static_cast<double>(i) / steps;
    out[i] = sample_bilinear(image, probe.start.x + t * (probe.end.x - probe.start.x),
                             probe.start.y + t * (probe.end.y - probe.start.y));
  }
  return out;
}

// Normalized [0,1] view used by all pixel math.
inline std::vector<double> to_unit(const Image16& image) {
  std::vector<double> out(image.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = image.pixels[i] / 65535.0;
  return out;
}

inline Image16 from_unit(std::size_t width, std::size_t height, const std::vector<double>& unit) {
  Image16 out(width, height);
  for (std::size_t i = 0; i < unit.size(); ++i) out.pixels[i] = quantize16(std::clamp(unit[i], 0.0, 1.0) * 65535.0);
  return out;
}

}  // namespace tilessl
