#include <gtest/gtest.h>
#include <png.h>

#include <cstdio>
#include <fstream>

#include "support.hpp"
#include "tilessl/imaging.hpp"

using namespace tilessl;
using testing_support::random_image;
using testing_support::temp_dir;

namespace {

// Minimal libpng writer for fixtures the library itself never produces (8-bit, RGB).
void write_png(const std::string& path, int w, int h, int color_type, int depth, const std::vector<unsigned char>& rows) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  ASSERT_NE(fp, nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = rows.size() / static_cast<std::size_t>(h);
  for (int y = 0; y < h; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * stride);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

ImageIoError::Reason load_failure(const std::string& path) {
  try {
    load_png16(path);
  } catch (const ImageIoError& e) {
    return e.reason();
  }
  ADD_FAILURE() << "expected load failure for " << path;
  return ImageIoError::Reason::unwritable;
}

// Independent bilinear oracle.
double bilinear(const Image16& im, double x, double y) {
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  const int x1 = std::min<int>(x0 + 1, static_cast<int>(im.width) - 1);
  const int y1 = std::min<int>(y0 + 1, static_cast<int>(im.height) - 1);
  const double ax = x - x0, ay = y - y0;
  auto p = [&](int xx, int yy) { return static_cast<double>(im.pixels[static_cast<std::size_t>(yy) * im.width + static_cast<std::size_t>(xx)]); };
  return (1 - ay) * ((1 - ax) * p(x0, y0) + ax * p(x1, y0)) + ay * ((1 - ax) * p(x0, y1) + ax * p(x1, y1));
}

}  // namespace

TEST(Imaging, TinyRoundTrip) {
  const auto dir = temp_dir("img_tiny");
  Image16 im(2, 2, std::vector<std::uint16_t>{0, 65535, 256, 512});
  save_png16(im, (dir / "a.png").string());
  EXPECT_EQ(load_png16((dir / "a.png").string()), im);
}

TEST(Imaging, RandomRoundTripIsBitExact) {
  const auto dir = temp_dir("img_rand");
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto im = random_image(64, 64, seed);
    save_png16(im, (dir / "r.png").string());
    EXPECT_EQ(load_png16((dir / "r.png").string()), im);
  }
}

TEST(Imaging, ZeroRampAndSinglePixelRoundTrip) {
  const auto dir = temp_dir("img_misc");
  Image16 zero(4, 4, 0);
  Image16 ramp(256, 1);
  for (std::size_t i = 0; i < 256; ++i) ramp.pixels[i] = static_cast<std::uint16_t>(i * 257);
  ramp.pixels.back() = 65535;
  Image16 one(1, 1, 12345);
  for (const auto* im : {&zero, &ramp, &one}) {
    save_png16(*im, (dir / "x.png").string());
    EXPECT_EQ(load_png16((dir / "x.png").string()), *im);
  }
}

TEST(Imaging, EightBitIsPromotedBy257) {
  const auto dir = temp_dir("img_8bit");
  write_png((dir / "g8.png").string(), 3, 1, PNG_COLOR_TYPE_GRAY, 8, {0, 1, 255});
  const auto im = load_png16((dir / "g8.png").string());
  EXPECT_EQ(im.width, 3u);
  EXPECT_EQ(im.height, 1u);
  EXPECT_EQ(im.pixels, (std::vector<std::uint16_t>{0, 257, 65535}));
}

TEST(Imaging, LoadErrorsAreDistinct) {
  const auto dir = temp_dir("img_err");
  EXPECT_EQ(load_failure((dir / "missing.png").string()), ImageIoError::Reason::missing_file);

  write_png((dir / "rgb.png").string(), 2, 2, PNG_COLOR_TYPE_RGB, 8, std::vector<unsigned char>(12, 7));
  EXPECT_EQ(load_failure((dir / "rgb.png").string()), ImageIoError::Reason::multi_channel);

  {
    std::ofstream f(dir / "junk.png", std::ios::binary);
    f << "definitely not a png";
  }
  EXPECT_EQ(load_failure((dir / "junk.png").string()), ImageIoError::Reason::corrupt_stream);

  // Valid signature and header, truncated data.
  save_png16(random_image(32, 32, 9), (dir / "ok.png").string());
  std::ifstream in(dir / "ok.png", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  {
    std::ofstream f(dir / "cut.png", std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_EQ(load_failure((dir / "cut.png").string()), ImageIoError::Reason::corrupt_stream);
}

TEST(Imaging, UnwritablePath) {
  try {
    save_png16(Image16(2, 2, 1), "/nonexistent_dir_xyz/a.png");
    FAIL();
  } catch (const ImageIoError& e) {
    EXPECT_EQ(e.reason(), ImageIoError::Reason::unwritable);
  }
}

TEST(Imaging, ResizeIdentityAndKnownValues) {
  const auto im = random_image(7, 5, 4);
  EXPECT_EQ(resize(im, 7, 5), im);
  Image16 two(2, 1, std::vector<std::uint16_t>{0, 65535});
  EXPECT_EQ(resize(two, 3, 1).pixels, (std::vector<std::uint16_t>{0, 32768, 65535}));
  EXPECT_THROW(resize(im, 0, 3), ShapeError);
}

TEST(Imaging, ResizeConstantAndMonotoneRamp) {
  Image16 c(9, 4, 4242);
  for (auto [w, h] : {std::pair{1, 1}, {3, 17}, {20, 2}}) {
    const auto r = resize(c, static_cast<std::size_t>(w), static_cast<std::size_t>(h));
    for (auto p : r.pixels) EXPECT_EQ(p, 4242);
  }
  Image16 ramp(10, 1);
  for (std::size_t i = 0; i < 10; ++i) ramp.pixels[i] = static_cast<std::uint16_t>(i * i * 600);
  const auto up = resize(ramp, 37, 1);
  for (std::size_t i = 1; i < up.pixels.size(); ++i) EXPECT_LE(up.pixels[i - 1], up.pixels[i]);
}

TEST(Imaging, ProfileExactGridAndConstant) {
  Image16 r(3, 1, std::vector<std::uint16_t>{0, 100, 200});
  EXPECT_EQ(intensity_profile(r, {{0, 0}, {2, 0}, 3}), (std::vector<double>{0, 100, 200}));
  Image16 c(8, 8, 999);
  for (double v : intensity_profile(c, {{0.3, 7}, {6.9, 0.2}, 11})) EXPECT_DOUBLE_EQ(v, 999.0);
}

TEST(Imaging, DiagonalProfileMatchesOracle) {
  const auto im = random_image(20, 15, 77);
  const LineProbe p{{1.25, 0.5}, {18.5, 13.75}, 23};
  const auto got = intensity_profile(im, p);
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double t = static_cast<double>(i) / 22.0;
    EXPECT_NEAR(got[i], bilinear(im, 1.25 + t * 17.25, 0.5 + t * 13.25), 1e-9);
  }
}

TEST(Imaging, ProfileRejectsBadProbes) {
  Image16 im(4, 4, 1);
  EXPECT_THROW(intensity_profile(im, {{0, 0}, {4, 0}, 3}), DataError);
  EXPECT_THROW(intensity_profile(im, {{0, 0}, {1, 1}, 1}), DataError);
}
