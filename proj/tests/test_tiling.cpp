#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"
#include "tilessl/manifest.hpp"
#include "tilessl/tiling.hpp"

using namespace tilessl;
using testing_support::random_image;
using testing_support::temp_dir;

namespace {

PatchSpec spec96() {
  PatchSpec s;
  s.size = 96;
  s.overlap_fraction = 0.5;
  return s;
}

std::set<std::pair<std::size_t, std::size_t>> origins(const std::vector<Patch>& ps) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (const auto& p : ps) out.emplace(p.x, p.y);
  return out;
}

Manifest patients(std::size_t n, std::size_t positive, std::size_t views = 2) {
  Manifest m;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t v = 0; v < views; ++v)
      m.entries.push_back({"P" + std::to_string(p) + "_" + std::to_string(v) + ".png", "P" + std::to_string(p),
                           p < positive ? 1 : 0, v == 0 ? "CC" : "MLO"});
  return m;
}

std::set<std::string> ids(const Manifest& m) {
  std::set<std::string> out;
  for (const auto& e : m.entries) out.insert(e.patient_id);
  return out;
}

std::size_t positives(const Manifest& m) {
  std::set<std::string> out;
  for (const auto& e : m.entries)
    if (e.label == 1) out.insert(e.patient_id);
  return out.size();
}

}  // namespace

TEST(Tiling, SinglePatchWhenImageEqualsPatch) {
  const auto ps = tile_grid(random_image(96, 96, 1), spec96());
  ASSERT_EQ(ps.size(), 1u);
  EXPECT_EQ(ps[0].x, 0u);
  EXPECT_EQ(ps[0].y, 0u);
}

TEST(Tiling, NineStridePositions) {
  const auto ps = tile_grid(random_image(192, 192, 2), spec96());
  std::set<std::pair<std::size_t, std::size_t>> expect;
  for (std::size_t y : {0, 48, 96})
    for (std::size_t x : {0, 48, 96}) expect.emplace(x, y);
  EXPECT_EQ(ps.size(), 9u);
  EXPECT_EQ(origins(ps), expect);
}

TEST(Tiling, FlushOriginOnWideImage) {
  const auto ps = tile_grid(random_image(200, 96, 3), spec96());
  ASSERT_EQ(ps.size(), 4u);
  std::vector<std::size_t> xs;
  for (const auto& p : ps) xs.push_back(p.x);
  EXPECT_EQ(xs, (std::vector<std::size_t>{0, 48, 96, 104}));
}

TEST(Tiling, PatchesMatchSourcePixels) {
  const auto im = random_image(150, 131, 4);
  PatchSpec s;
  s.size = 40;
  s.overlap_fraction = 0.3;
  const auto ps = tile_grid(im, s);
  EXPECT_EQ(origins(ps).size(), ps.size());
  for (const auto& p : ps) {
    ASSERT_LE(p.x + s.size, im.width);
    ASSERT_LE(p.y + s.size, im.height);
    for (std::size_t y = 0; y < s.size; y += 7)
      for (std::size_t x = 0; x < s.size; x += 5) EXPECT_EQ(p.image.at(x, y), im.at(p.x + x, p.y + y));
  }
}

TEST(Tiling, CountFormulaForStrideMultiples) {
  PatchSpec s;
  s.size = 16;
  for (std::size_t w : {16, 24, 64, 136})
    for (std::size_t h : {16, 40, 80}) {
      const auto ps = tile_grid(Image16(w, h, 1), s);
      EXPECT_EQ(ps.size(), ((w - 16) / 8 + 1) * ((h - 16) / 8 + 1));
    }
}

TEST(Tiling, ErrorsOnSmallImageAndBadSpec) {
  EXPECT_THROW(tile_grid(Image16(95, 200, 1), spec96()), DataError);
  PatchSpec bad = spec96();
  bad.size = 4;
  EXPECT_THROW(tile_grid(Image16(20, 20, 1), bad), ConfigError);
  bad = spec96();
  bad.overlap_fraction = 1.0;
  EXPECT_THROW(tile_grid(Image16(200, 200, 1), bad), ConfigError);
}

TEST(Tiling, BackgroundFractionMatchesCount) {
  EXPECT_DOUBLE_EQ(background_fraction(Image16(8, 8, 0), 0), 1.0);
  Image16 half(4, 2, std::vector<std::uint16_t>{0, 0, 0, 0, 65535, 65535, 65535, 65535});
  EXPECT_DOUBLE_EQ(background_fraction(half, 0), 0.5);
  for (std::uint64_t seed : {5, 6, 7}) {
    const auto im = random_image(33, 17, seed, 0, 20);
    std::size_t n = 0;
    for (auto p : im.pixels) n += p <= 9;
    EXPECT_DOUBLE_EQ(background_fraction(im, 9), static_cast<double>(n) / (33.0 * 17.0));
  }
}

TEST(Tiling, FilterEdgeIsInclusive) {
  PatchSpec s;
  s.size = 10;
  auto with_zeros = [](std::size_t zeros) {
    Image16 im(10, 10, 1000);
    for (std::size_t i = 0; i < zeros; ++i) im.pixels[i] = 0;
    return Patch{im, 0, 0, 0, 0, "x"};
  };
  const auto kept = filter_patches({with_zeros(20), with_zeros(25), with_zeros(21), with_zeros(0)}, s);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_DOUBLE_EQ(background_fraction(kept[0].image, 0), 0.20);
  EXPECT_DOUBLE_EQ(background_fraction(kept[1].image, 0), 0.0);
}

TEST(Tiling, FilterIsIdempotentAndKeepsTissue) {
  PatchSpec s;
  s.size = 16;
  auto im = random_image(96, 96, 8);
  for (std::size_t y = 0; y < 96; ++y)
    for (std::size_t x = 0; x < 40; ++x) im.at(x, y) = 0;
  const auto once = filter_patches(tile_grid(im, s), s);
  const auto twice = filter_patches(once, s);
  EXPECT_EQ(origins(once), origins(twice));
  EXPECT_LT(once.size(), tile_grid(im, s).size());

  const auto tissue = random_image(96, 96, 9, 1, 65535);
  EXPECT_EQ(filter_patches(tile_grid(tissue, s), s).size(), tile_grid(tissue, s).size());
}

TEST(Tiling, AnnotatedRoiIsCentered) {
  PatchSpec s;
  s.size = 224;
  const auto im = random_image(800, 700, 10, 1, 65535);
  Rng rng(1);
  const auto pair = extract_annotated_pair(im, {400, 350, LesionClass::malignant_mass}, s, rng);
  EXPECT_EQ(pair.roi.x, 400u - 112u);
  EXPECT_EQ(pair.roi.y, 350u - 112u);
  EXPECT_EQ(pair.roi.image, crop(im, 288, 238, 224, 224));
}

TEST(Tiling, AnnotatedRoiClampsAtEdges) {
  PatchSpec s;
  s.size = 32;
  const auto im = random_image(100, 80, 11, 1, 65535);
  Rng rng(2);
  const auto pair = extract_annotated_pair(im, {3, 79, LesionClass::benign_mass}, s, rng);
  EXPECT_EQ(pair.roi.x, 0u);
  EXPECT_EQ(pair.roi.y, 48u);
}

TEST(Tiling, AnnotatedPairIsDeterministic) {
  PatchSpec s;
  s.size = 32;
  const auto im = random_image(128, 128, 12, 1, 65535);
  Rng a(42), b(42);
  const auto p = extract_annotated_pair(im, {64, 64, LesionClass::benign_calcification}, s, a);
  const auto q = extract_annotated_pair(im, {64, 64, LesionClass::benign_calcification}, s, b);
  EXPECT_EQ(p.random.x, q.random.x);
  EXPECT_EQ(p.random.y, q.random.y);
  EXPECT_EQ(p.random.image, q.random.image);
}

TEST(Tiling, RandomPatchNeverOverlapsRoiAndRespectsBackground) {
  PatchSpec s;
  s.size = 24;
  auto im = random_image(96, 72, 13, 1, 65535);
  for (std::size_t y = 0; y < 72; ++y)
    for (std::size_t x = 70; x < 96; ++x) im.at(x, y) = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const auto pair = extract_annotated_pair(im, {30, 30, LesionClass::malignant_calcification}, s, rng);
    const auto& r = pair.roi;
    const auto& q = pair.random;
    const bool overlap = q.x < r.x + 24 && r.x < q.x + 24 && q.y < r.y + 24 && r.y < q.y + 24;
    ASSERT_FALSE(overlap) << seed;
    ASSERT_LE(background_fraction(q.image, 0), 0.20) << seed;
  }
}

TEST(Tiling, AnnotatedPairFailsWithoutRoom) {
  PatchSpec s;
  s.size = 32;
  Rng rng(0);
  EXPECT_THROW(extract_annotated_pair(random_image(40, 40, 1, 1, 65535), {20, 20, LesionClass::benign_mass}, s, rng),
               DataError);
}

TEST(Manifest, RoundTripAndSchemes) {
  const auto dir = temp_dir("manifest");
  const auto m = patients(3, 1);
  write_manifest(m, (dir / "m.tsv").string());
  const auto back = read_manifest((dir / "m.tsv").string());
  EXPECT_EQ(back.scheme, LabelScheme::binary);
  EXPECT_EQ(back.entries, m.entries);

  Manifest five;
  five.scheme = LabelScheme::five_class;
  for (int k = 0; k < 5; ++k) five.entries.push_back({"p" + std::to_string(k) + ".png", "A", k, "CC"});
  write_manifest(five, (dir / "f.tsv").string());
  const auto fb = read_manifest((dir / "f.tsv").string());
  EXPECT_EQ(fb.scheme, LabelScheme::five_class);
  EXPECT_EQ(fb.entries, five.entries);
}

TEST(Manifest, RejectsMalformedFiles) {
  const auto dir = temp_dir("manifest_bad");
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream(dir / name) << body;
    return (dir / name).string();
  };
  EXPECT_THROW(read_manifest(write("h.tsv", "path\tpid\tlabel\n")), DataError);
  EXPECT_THROW(read_manifest(write("f.tsv", std::string(kManifestHeader) + "\na.png\tP1\tpositive\n")), DataError);
  EXPECT_THROW(read_manifest(write("e.tsv", std::string(kManifestHeader) + "\na.png\t\tpositive\tCC\n")), DataError);
  EXPECT_THROW(read_manifest(write("l.tsv", std::string(kManifestHeader) + "\na.png\tP1\tmaybe\tCC\n")), DataError);
  EXPECT_THROW(read_manifest((dir / "none.tsv").string()), DataError);
}

TEST(Split, TenPatientsFivePositive) {
  const auto m = patients(10, 5);
  for (std::uint64_t seed : {0, 1, 2, 3}) {
    const auto s = stratified_patient_split(m, {0.8, 0.1, 0.1}, seed);
    EXPECT_EQ(ids(s.train).size(), 8u);
    EXPECT_EQ(positives(s.train), 4u);
    EXPECT_EQ(ids(s.val).size(), 1u);
    EXPECT_EQ(ids(s.test).size(), 1u);
  }
}

TEST(Split, AllTrainAndDeterminism) {
  const auto m = patients(7, 3);
  const auto all = stratified_patient_split(m, {1.0, 0.0, 0.0}, 5);
  EXPECT_EQ(all.train.size(), m.size());
  EXPECT_TRUE(all.val.empty());
  EXPECT_TRUE(all.test.empty());
  const auto a = stratified_patient_split(patients(40, 13), {0.6, 0.2, 0.2}, 9);
  const auto b = stratified_patient_split(patients(40, 13), {0.6, 0.2, 0.2}, 9);
  EXPECT_EQ(a.train.entries, b.train.entries);
  EXPECT_EQ(a.val.entries, b.val.entries);
  EXPECT_EQ(a.test.entries, b.test.entries);
}

TEST(Split, PartitionProperties) {
  for (std::size_t n : {5, 23, 60}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      const std::size_t pos = n / 3;
      const auto m = patients(n, pos, 3);
      const auto s = stratified_patient_split(m, {0.6, 0.2, 0.2}, seed);
      const auto tr = ids(s.train), va = ids(s.val), te = ids(s.test);
      EXPECT_EQ(tr.size() + va.size() + te.size(), n);
      std::set<std::string> all(tr);
      all.insert(va.begin(), va.end());
      all.insert(te.begin(), te.end());
      EXPECT_EQ(all.size(), n);
      EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), m.size());
      const double global = static_cast<double>(pos) / static_cast<double>(n);
      for (const auto* part : {&s.train, &s.val, &s.test}) {
        const double k = static_cast<double>(ids(*part).size());
        EXPECT_LE(std::abs(static_cast<double>(positives(*part)) - global * k), 1.0 + 1e-9);
      }
    }
  }
}

TEST(Split, MajorityLabelTiesGoPositive) {
  Manifest m;
  m.entries = {{"a.png", "A", 0, "CC"}, {"b.png", "A", 1, "MLO"}, {"c.png", "B", 0, "CC"}, {"d.png", "B", 0, "MLO"}};
  const auto g = group_patients(m);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].stratum, 1);
  EXPECT_EQ(g[1].stratum, 0);
}

TEST(Split, Errors) {
  EXPECT_THROW(stratified_patient_split(patients(2, 1), {0.4, 0.3, 0.3}, 0), DataError);
  EXPECT_THROW(stratified_patient_split(patients(10, 1), {0.5, 0.3, 0.3}, 0), ConfigError);
}
