#include <gtest/gtest.h>

#include <set>

#include "tilessl/phantom.hpp"

using namespace tilessl;

TEST(Phantom, Deterministic) {
  PhantomConfig c;
  const auto a = make_phantom(c, 5, {LesionClass::malignant_mass});
  const auto b = make_phantom(c, 5, {LesionClass::malignant_mass});
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  EXPECT_NE(a.image.pixels, make_phantom(c, 6, {LesionClass::malignant_mass}).image.pixels);
}

TEST(Phantom, LesionsAreSmallAndInside) {
  PhantomConfig c;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = make_phantom(c, seed, {LesionClass::malignant_mass, LesionClass::benign_calcification});
    ASSERT_EQ(p.lesions.size(), 2u);
    double area = 0;
    for (const auto& l : p.lesions) {
      EXPECT_GE(l.cx, 0.0);
      EXPECT_LT(l.cx, static_cast<double>(c.width));
      EXPECT_GE(l.cy, 0.0);
      EXPECT_LT(l.cy, static_cast<double>(c.height));
      area += 3.14159265358979 * l.radius * l.radius;
    }
    EXPECT_LT(area / static_cast<double>(c.width * c.height), 0.05);
  }
}

TEST(Phantom, LesionRaisesLocalIntensity) {
  PhantomConfig c;
  c.gamma_lo = c.gamma_hi = 1.0;
  double diff = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto with = make_phantom(c, seed, {LesionClass::malignant_mass});
    const auto without = make_phantom(c, seed, {});
    const auto& l = with.lesions.front();
    diff += static_cast<double>(with.image.at(static_cast<std::size_t>(l.cx), static_cast<std::size_t>(l.cy))) -
            static_cast<double>(without.image.at(static_cast<std::size_t>(l.cx), static_cast<std::size_t>(l.cy)));
  }
  EXPECT_GT(diff / 10, 0.05 * 65535);
}

TEST(PhantomDataset, Structure) {
  PhantomDatasetConfig dc;
  dc.patients = 30;
  dc.image.width = dc.image.height = 64;
  const auto ds = make_whole_image_dataset(dc, 2);
  ASSERT_EQ(ds.images.size(), 60u);
  ASSERT_EQ(ds.manifest.entries.size(), 60u);
  std::set<std::string> patients;
  std::size_t positive = 0;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& e = ds.manifest.entries[i];
    patients.insert(e.patient_id);
    positive += static_cast<std::size_t>(e.label);
    EXPECT_EQ(ds.lesions[i].empty(), e.label == 0);
    EXPECT_EQ(ds.images[i].width, 64u);
  }
  EXPECT_EQ(patients.size(), 30u);
  EXPECT_EQ(positive, 30u);  // two views of 15 positive patients
  // views of one patient share the label
  for (std::size_t i = 0; i < 60; i += 2) EXPECT_EQ(ds.manifest.entries[i].label, ds.manifest.entries[i + 1].label);
}

TEST(AnnotatedDataset, RoiThenRandom) {
  AnnotatedPhantomConfig ac;
  ac.images = 25;
  const auto ds = make_annotated_dataset(ac, 4);
  ASSERT_EQ(ds.patches.size(), 50u);
  EXPECT_EQ(ds.manifest.scheme, LabelScheme::five_class);
  for (std::size_t i = 0; i < 50; i += 2) {
    EXPECT_GE(ds.manifest.entries[i].label, 1);
    EXPECT_LE(ds.manifest.entries[i].label, 4);
    EXPECT_EQ(ds.manifest.entries[i + 1].label, 0);
    EXPECT_EQ(ds.patches[i].width, 32u);
    EXPECT_EQ(ds.patches[i + 1].height, 32u);
  }
}
