#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tfm/augment.hpp"

using tfm::AugmentConfig;
using tfm::Image;

namespace {

Image square_image(std::size_t n, std::size_t r0, std::size_t side, float value) {
  Image img(n, n, 0.0f);
  for (std::size_t r = r0; r < r0 + side; ++r)
    for (std::size_t c = r0; c < r0 + side; ++c) img(r, c) = value;
  return img;
}

}  // namespace

TEST(Tukey, WindowProperties) {
  const Image rect = tfm::tukey_window2d(7, 9, 0.0);
  for (float v : rect.values()) EXPECT_EQ(v, 1.0f);
  const Image w = tfm::tukey_window2d(64, 48, 0.1);
  for (std::size_t c = 0; c < 48; ++c) {
    EXPECT_EQ(w(0, c), 0.0f);
    EXPECT_EQ(w(63, c), 0.0f);
  }
  for (std::size_t r = 0; r < 64; ++r) {
    EXPECT_EQ(w(r, 0), 0.0f);
    EXPECT_EQ(w(r, 47), 0.0f);
  }
  EXPECT_EQ(w(32, 24), 1.0f);
  for (float v : w.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(tfm::tukey_window(10, 1.5), tfm::Error);
  EXPECT_THROW(tfm::tukey_window(10, -0.1), tfm::Error);
}

TEST(Tukey, AlphaOneIsHann) {
  for (std::size_t n : {9u, 10u, 33u}) {
    const auto w = tfm::tukey_window(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
      EXPECT_NEAR(w[i], hann, 1e-12);
    }
    if (n % 2 == 1) EXPECT_NEAR(w[n / 2], 1.0, 1e-15);
  }
}

TEST(Tukey, MatchesReferenceValues) {
  // scipy.signal.windows.tukey(11, 0.4) and tukey(12, 0.3)
  const double ref11[] = {0.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.0};
  const auto w11 = tfm::tukey_window(11, 0.4);
  for (int i = 0; i < 11; ++i) EXPECT_NEAR(w11[i], ref11[i], 1e-12);
  const auto w12 = tfm::tukey_window(12, 0.3);
  for (int i : {0, 11}) EXPECT_EQ(w12[i], 0.0);
  for (int i : {1, 10}) EXPECT_NEAR(w12[i], 0.6635339816587109, 1e-12);
  for (int i = 2; i < 10; ++i) EXPECT_EQ(w12[i], 1.0);
}

TEST(MaskForces, BorderPlateauAndNonIdempotence) {
  tfm::FrameSet fs;
  fs.manifest.height = 40;
  fs.manifest.width = 40;
  fs.frames.push_back({Image(40, 40, 1.0f), Image(40, 40, 500.0f), std::nullopt});
  const auto once = tfm::mask_forces(fs);
  const auto twice = tfm::mask_forces(once);
  EXPECT_TRUE(once.forces_masked);
  const auto& f1 = once.frames[0].force;
  const auto& f2 = twice.frames[0].force;
  const Image w = tfm::tukey_window2d(40, 40, 0.1);
  EXPECT_EQ(f1(0, 17), 0.0f);
  EXPECT_EQ(f1(20, 20), 500.0f);
  EXPECT_EQ(f2(20, 20), 500.0f);
  bool taper_changed = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0f && w[i] < 1.0f) {
      EXPECT_NEAR(f2[i], 500.0f * w[i] * w[i], 1e-3);
      taper_changed = taper_changed || f2[i] != f1[i];
    }
  }
  EXPECT_TRUE(taper_changed);
}

TEST(CellBox, SolidSquare) {
  const Image img = square_image(64, 10, 20, 100.0f);
  const auto box = tfm::extract_cell_bbox(img);
  EXPECT_EQ(box, (tfm::BBox{10, 10, 29, 29}));
}

TEST(CellBox, IsolatedPixelRemovedByOpening) {
  Image img = square_image(64, 10, 20, 100.0f);
  img(50, 50) = 100.0f;
  EXPECT_EQ(tfm::extract_cell_bbox(img), (tfm::BBox{10, 10, 29, 29}));
  // A lone pixel far brighter than the cell takes the Otsu split for itself;
  // the opening then erases it and extraction falls back to the frame.
  img(50, 50) = 1000.0f;
  EXPECT_THROW(tfm::extract_cell_bbox(img), tfm::Error);
  EXPECT_EQ(tfm::extract_cell_bbox_or_frame(img), tfm::full_frame(64, 64));
}

TEST(CellBox, EmptyImage) {
  try {
    tfm::extract_cell_bbox(Image(32, 32, 0.0f));
    FAIL() << "expected NoCellFound";
  } catch (const tfm::Error& e) {
    EXPECT_EQ(e.code(), tfm::ErrorCode::no_cell_found);
  }
  EXPECT_EQ(tfm::extract_cell_bbox_or_frame(Image(32, 32, 0.0f)), tfm::full_frame(32, 32));
}

TEST(CellBox, LargestOfTwoBlobs) {
  Image img(64, 64, 0.0f);
  for (std::size_t r = 5; r < 15; ++r)
    for (std::size_t c = 5; c < 15; ++c) img(r, c) = 50.0f;
  for (std::size_t r = 30; r < 60; ++r)
    for (std::size_t c = 20; c < 40; ++c) img(r, c) = 50.0f;
  EXPECT_EQ(tfm::extract_cell_bbox(img), (tfm::BBox{30, 20, 59, 39}));
}

TEST(Geometry, IdentityTransform) {
  std::mt19937_64 gen(1);
  Image in(48, 48), force(48, 48);
  for (auto& v : in.values()) v = static_cast<float>(gen() % 1000);
  for (auto& v : force.values()) v = static_cast<float>(gen() % 1000);
  AugmentConfig cfg;
  cfg.crop = 48;
  cfg.flip_prob = 0.0;
  cfg.rotation_max_deg = 0.0;
  tfm::RandomStream rng(3);
  const auto out = tfm::augment_sample({in, force, std::nullopt}, cfg, rng);
  EXPECT_EQ(out.input, in);
  EXPECT_EQ(out.force, force);
}

TEST(Geometry, FlipsAreInvolutions) {
  std::mt19937_64 gen(2);
  Image in(6, 5);
  for (auto& v : in.values()) v = static_cast<float>(gen() % 100);
  EXPECT_EQ(tfm::flip_horizontal(tfm::flip_horizontal(in)), in);
  EXPECT_EQ(tfm::flip_vertical(tfm::flip_vertical(in)), in);
  EXPECT_EQ(tfm::flip_horizontal(in)(2, 0), in(2, 4));
  EXPECT_EQ(tfm::flip_vertical(in)(0, 3), in(5, 3));
}

TEST(Geometry, Rotation90MatchesPermutation) {
  const std::size_t n = 48;
  Image img(n, n, 0.0f);
  for (std::size_t r = 14; r < 34; ++r)
    for (std::size_t c = 10; c < 30; ++c) img(r, c) = 100.0f + static_cast<float>(r);
  const double centre = 0.5 * (n - 1);
  const Image rot = tfm::rotate_bicubic(img, 90.0, centre, centre);
  const Image ref = oracle::rotate90(img);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) EXPECT_NEAR(rot(r, c), ref(r, c), 1e-3) << r << "," << c;
}

TEST(Geometry, NonnegativeAfterRotation) {
  Image img = square_image(40, 12, 16, 1000.0f);
  const Image rot = tfm::rotate_bicubic(img, 33.0, 19.5, 19.5);
  float overshoot = 0.0f;
  for (float v : rot.values()) {
    EXPECT_GE(v, 0.0f);
    overshoot = std::max(overshoot, v);
  }
  EXPECT_GT(overshoot, 0.0f);
}

TEST(Geometry, SameTransformOnBothMaps) {
  Image in = square_image(64, 16, 30, 800.0f);
  Image force(64, 64, 0.0f);
  force(20, 40) = 1000.0f;
  in(20, 40) = 5000.0f;
  AugmentConfig cfg;
  cfg.crop = 64;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    tfm::RandomStream rng(seed);
    const auto t = tfm::draw_transform(in, cfg, rng);
    // no rotation interpolation: compare the marked pixel location exactly
    auto nt = t;
    nt.angle_deg = 0.0;
    const Image fi = nt.apply(in), ff = nt.apply(force);
    const auto pi = std::max_element(fi.values().begin(), fi.values().end()) - fi.values().begin();
    const auto pf = std::max_element(ff.values().begin(), ff.values().end()) - ff.values().begin();
    EXPECT_EQ(pi, pf);
    const Image ri = t.apply(in), rf = t.apply(force);
    const auto qi = std::max_element(ri.values().begin(), ri.values().end()) - ri.values().begin();
    const auto qf = std::max_element(rf.values().begin(), rf.values().end()) - rf.values().begin();
    EXPECT_LE(std::abs(qi / 64 - qf / 64), 1);
    EXPECT_LE(std::abs(qi % 64 - qf % 64), 1);
  }
}

TEST(Augment, DeterministicPerSeed) {
  Image in = square_image(64, 16, 30, 800.0f), force = square_image(64, 16, 30, 200.0f);
  AugmentConfig cfg;
  cfg.crop = 32;
  tfm::RandomStream a(17), b(17);
  const auto x = tfm::augment_sample({in, force, std::nullopt}, cfg, a);
  const auto y = tfm::augment_sample({in, force, std::nullopt}, cfg, b);
  EXPECT_EQ(x.input, y.input);
  EXPECT_EQ(x.force, y.force);
  EXPECT_EQ(x.input.height(), 32u);
}

TEST(Augment, CropLargerThanFrameZeroPads) {
  Image in = square_image(32, 8, 16, 800.0f);
  AugmentConfig cfg;
  cfg.crop = 64;
  cfg.rotation_max_deg = 0.0;
  cfg.flip_prob = 0.0;
  tfm::RandomStream rng(0);
  const auto out = tfm::augment_sample({in, in, std::nullopt}, cfg, rng);
  EXPECT_EQ(out.input.height(), 64u);
  EXPECT_EQ(out.input(0, 0), 0.0f);
  EXPECT_EQ(out.input(16 + 8, 16 + 8), 800.0f);
}

TEST(Salt, Contracts) {
  AugmentConfig cfg;
  Image img(1000, 1000, -1.0f);  // sentinel: salt values are >= 0
  cfg.salt_image_prob = 0.0;
  tfm::RandomStream off(1);
  EXPECT_EQ(tfm::salt_noise(img, cfg, off), img);
  cfg.salt_image_prob = 1.0;
  tfm::RandomStream on(2);
  const Image out = tfm::salt_noise(img, cfg, on);
  std::size_t changed = 0;
  for (float v : out.values()) {
    if (v == -1.0f) continue;
    ++changed;
    EXPECT_GE(v, 0.0f);
    EXPECT_LT(v, 2000.0f);
  }
  EXPECT_EQ(changed, 10000u);
  Image odd(33, 37, -1.0f);
  tfm::RandomStream on2(3);
  const Image o2 = tfm::salt_noise(odd, cfg, on2);
  EXPECT_EQ(static_cast<std::size_t>(std::count_if(o2.values().begin(), o2.values().end(), [](float v) { return v != -1.0f; })),
            static_cast<std::size_t>(std::llround(0.01 * 33 * 37)));
}

TEST(ClippedLog, FixedPoints) {
  Image img(1, 5);
  img[0] = 0.0f;
  img[1] = 1.0f;
  img[2] = static_cast<float>(std::numbers::e);
  img[3] = 2000.0f;
  img[4] = 0.5f;
  const Image out = tfm::clipped_log(img);
  EXPECT_EQ(out[0], 0.0f);
  EXPECT_EQ(out[1], 0.0f);
  EXPECT_NEAR(out[2], 1.0f, 1e-7);
  EXPECT_NEAR(out[3], 7.6009f, 1e-4);
  EXPECT_EQ(out[4], 0.0f);
}

TEST(Batch, LogDomainTargetsAndDeterminism) {
  tfm::FrameSet fs;
  fs.manifest.height = fs.manifest.width = 64;
  fs.frames.push_back({square_image(64, 16, 30, 800.0f), square_image(64, 16, 30, 300.0f), std::nullopt});
  fs.frames.push_back({square_image(64, 20, 20, 700.0f), square_image(64, 20, 20, 0.5f), std::nullopt});
  fs = tfm::mask_forces(fs);
  AugmentConfig cfg;
  cfg.crop = 32;
  const tfm::RandomStream rng(8);
  const auto a = tfm::make_batch(fs, cfg, 6, rng);
  const auto b = tfm::make_batch(fs, cfg, 6, rng);
  EXPECT_EQ(a.input, b.input);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.input.shape(), (tfm::Shape{6, 1, 32, 32}));
  for (float v : a.target.values()) {
    EXPECT_GE(v, 0.0f);
    // bicubic ringing: a 1-D step overshoots by at most 2/27, compounded at a corner
    EXPECT_LE(v, std::log(300.0f * (29.0f / 27.0f) * (29.0f / 27.0f)));
  }
  for (float v : a.input.values()) EXPECT_GE(v, 0.0f);
}

TEST(Config, Validation) {
  AugmentConfig cfg;
  cfg.crop = 16;
  EXPECT_THROW(cfg.validate(), tfm::Error);
  cfg = AugmentConfig{};
  cfg.flip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), tfm::Error);
}
