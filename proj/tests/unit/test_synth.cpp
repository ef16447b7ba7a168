#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tfm/augment.hpp"
#include "tfm/frameset.hpp"
#include "tfm/synth.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tfm_synth_" + name);
  fs::remove_all(dir);
  return dir;
}

std::size_t count(const tfm::Mask& m) { return static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), 1)); }

}  // namespace

TEST(Shape, DiscArea) {
  tfm::ShapeParams p;
  p.center_row = p.center_col = 50.0;
  for (double r0 : {10.0, 20.0, 33.0}) {
    p.base_radius = r0;
    const auto area = static_cast<double>(count(tfm::rasterize_shape(p, 101, 101)));
    EXPECT_NEAR(area / (std::numbers::pi * r0 * r0), 1.0, 0.02) << r0;
  }
}

TEST(Shape, SeededAndConnected) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    tfm::RandomStream a(seed), b(seed);
    const auto s1 = tfm::generate_shape(a, 64, 64);
    const auto s2 = tfm::generate_shape(b, 64, 64);
    EXPECT_EQ(s1.mask, s2.mask);
    EXPECT_GT(count(s1.mask), 0u);
    const auto cc = tfm::connected_components(s1.mask);
    EXPECT_EQ(cc.areas.size(), 1u) << "seed " << seed;
    for (double th = 0; th < 2 * std::numbers::pi; th += 0.01) EXPECT_GT(s1.params.radius(th), 0.0);
  }
}

TEST(Distance, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    tfm::RandomStream rng(seed);
    const auto shape = tfm::generate_shape(rng, 48, 40);
    const auto fast = tfm::distance_to_boundary(shape.mask);
    const auto slow = oracle::brute_force_distance(shape.mask);
    for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_EQ(fast[i], slow[i]) << i;
  }
  tfm::Mask full(6, 7, 1);
  const auto d = tfm::distance_to_boundary(full);
  const auto ref = oracle::brute_force_distance(full);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(d[i], ref[i]);
}

TEST(Force, EdgeAndInteriorValues) {
  tfm::Mask m(60, 60, 0);
  for (std::size_t r = 5; r < 55; ++r)
    for (std::size_t c = 5; c < 55; ++c) m(r, c) = 1;
  const double a = 1500.0, tau = 3.0;
  const auto f = tfm::geometry_force_field(m, a, tau);
  EXPECT_NEAR(f(5, 30), a * std::exp(-1.0 / tau), 1e-3);
  EXPECT_LT(f(30, 30), a * std::exp(-25.0 / tau) + 1e-6);
  EXPECT_EQ(f(2, 2), 0.0f);
  try {
    tfm::geometry_force_field(tfm::Mask(5, 5, 0), a, tau);
    FAIL() << "expected EmptyMask";
  } catch (const tfm::Error& e) {
    EXPECT_EQ(e.code(), tfm::ErrorCode::empty_mask);
  }
}

TEST(Fluorescence, ContrastAndSeeding) {
  tfm::RandomStream shape_rng(4);
  const auto shape = tfm::generate_shape(shape_rng, 64, 64);
  tfm::RandomStream a(5), b(5);
  const auto img = tfm::render_fluorescence(shape.mask, a);
  EXPECT_EQ(img, tfm::render_fluorescence(shape.mask, b));
  double in = 0, out = 0;
  std::size_t nin = 0, nout = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_GE(img[i], 0.0f);
    if (shape.mask[i]) {
      in += img[i];
      ++nin;
    } else {
      out += img[i];
      ++nout;
    }
  }
  EXPECT_GT(in / nin, 10.0 * out / nout);
}

TEST(Fluorescence, OtsuRecoversMask) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    tfm::SynthConfig cfg;
    cfg.seed = seed;
    const auto pair = tfm::generate_frame(cfg, 0);
    tfm::RandomStream rng(cfg.seed, {0});
    auto shape_rng = rng.split(0);
    const auto mask = tfm::generate_shape(shape_rng, 64, 64).mask;
    const auto fg = tfm::otsu_foreground(pair.input);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < fg.size(); ++i) agree += fg[i] == mask[i];
    EXPECT_GE(static_cast<double>(agree) / fg.size(), 0.95) << "seed " << seed;
  }
}

TEST(Frames, PureFunctionOfSeed) {
  tfm::SynthConfig cfg;
  cfg.frames = 4;
  cfg.seed = 11;
  const auto a = tfm::generate_frameset(cfg);
  const auto b = tfm::generate_frameset(cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.frames[i].input, b.frames[i].input);
    EXPECT_EQ(a.frames[i].force, b.frames[i].force);
  }
  EXPECT_NE(a.frames[0].force, a.frames[1].force);
  cfg.frames = 0;
  EXPECT_THROW(tfm::generate_frameset(cfg), tfm::Error);
}

TEST(Frames, HeteroscedasticVariant) {
  tfm::SynthConfig cfg;
  cfg.frames = 2;
  cfg.heteroscedastic = true;
  const auto set = tfm::generate_frameset(cfg);
  EXPECT_TRUE(set.manifest.has_sigma2);
  for (const auto& f : set.frames) {
    ASSERT_TRUE(f.sigma2.has_value());
    float max_s2 = 0.0f;
    for (std::size_t i = 0; i < f.force.size(); ++i) {
      EXPECT_GE(f.force[i], 0.0f);
      EXPECT_GE((*f.sigma2)[i], 0.0f);
      if (f.force[i] == 0.0f) EXPECT_EQ((*f.sigma2)[i], 0.0f);
      max_s2 = std::max(max_s2, (*f.sigma2)[i]);
    }
    EXPECT_GT(max_s2, 0.3f);
    EXPECT_LE(max_s2, 0.5f);
  }
}

TEST(FrameIo, RoundTripBitwise) {
  tfm::SynthConfig cfg;
  cfg.frames = 3;
  cfg.heteroscedastic = true;
  const auto set = tfm::generate_frameset(cfg);
  const auto dir = scratch("roundtrip");
  tfm::write_frameset(set, dir);
  EXPECT_TRUE(fs::exists(dir / "input_0000.raw"));
  EXPECT_TRUE(fs::exists(dir / "force_0002.raw"));
  EXPECT_EQ(fs::file_size(dir / "force_0002.raw"), 64u * 64u * 4u);
  const auto back = tfm::read_frameset(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.frames[i].input, set.frames[i].input);
    EXPECT_EQ(back.frames[i].force, set.frames[i].force);
    EXPECT_EQ(*back.frames[i].sigma2, *set.frames[i].sigma2);
  }
  fs::remove_all(dir);
}

TEST(FrameIo, LittleEndianEncoding) {
  const float v[] = {1.0f, -2.5f};
  const auto bytes = tfm::encode_f32le(v);
  const unsigned char expect[] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  ASSERT_EQ(bytes.size(), 8u);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(bytes[i], expect[i]);
}

TEST(FrameIo, Errors) {
  tfm::SynthConfig cfg;
  cfg.frames = 3;
  const auto dir = scratch("errors");
  tfm::write_frameset(tfm::generate_frameset(cfg), dir);

  fs::resize_file(dir / "force_0001.raw", 100);
  try {
    tfm::read_frameset(dir);
    FAIL() << "expected TruncatedFrame";
  } catch (const tfm::Error& e) {
    EXPECT_EQ(e.code(), tfm::ErrorCode::truncated_frame);
    EXPECT_NE(std::string(e.what()).find("frame 1"), std::string::npos) << e.what();
  }

  fs::resize_file(dir / "force_0001.raw", 64 * 64 * 4 + 64 * 4);
  try {
    tfm::read_frameset(dir);
    FAIL() << "expected DimensionMismatch";
  } catch (const tfm::Error& e) {
    EXPECT_EQ(e.code(), tfm::ErrorCode::dimension_mismatch);
  }

  fs::remove(dir / "manifest.json");
  try {
    tfm::read_frameset(dir);
    FAIL() << "expected ManifestMissing";
  } catch (const tfm::Error& e) {
    EXPECT_EQ(e.code(), tfm::ErrorCode::manifest_missing);
  }
  fs::remove_all(dir);
}
