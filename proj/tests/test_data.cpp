#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "iternet/data.hpp"
#include "iternet/synth.hpp"
#include "temp_dir.hpp"

using namespace iternet;
using iternet::testing::TempDir;

namespace {

Tensor random_plane(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed, bool binary = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor t(Shape{1, c, h, w});
  for (auto& v : t.values()) v = binary ? (u(rng) < 0.4f ? 1.0f : 0.0f) : u(rng);
  return t;
}

Sample random_sample(std::size_t h, std::size_t w, std::uint64_t seed) {
  return {random_plane(3, h, w, seed), random_plane(1, h, w, seed + 1, true), random_plane(1, h, w, seed + 2, true)};
}

double count(const Tensor& t) {
  double s = 0.0;
  for (float v : t.values()) s += v;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// FoV mask

TEST(FovMask, BlackImageGivesEmptyMask) {
  EXPECT_EQ(count(generate_fov_mask(Tensor(Shape{1, 3, 12, 10}))), 0.0);
}

TEST(FovMask, ZeroThresholdKeepsPositiveImage) {
  Tensor img = random_plane(3, 9, 13, 4);
  for (auto& v : img.values()) v = 0.01f + 0.99f * v;
  EXPECT_EQ(count(generate_fov_mask(img, 0.0f)), 9.0 * 13.0);
}

TEST(FovMask, BrightDiskIsRecoveredExactly) {
  const std::size_t h = 41, w = 47;
  const double cy = 20.0, cx = 23.0, r = 15.5;
  Tensor img(Shape{1, 3, h, w}), disk(Shape{1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool in = std::hypot(y - cy, x - cx) <= r;
      disk.at(0, 0, y, x) = in ? 1.0f : 0.0f;
      for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = in ? 0.3f + 0.2f * c : 0.02f;
    }
  EXPECT_EQ(generate_fov_mask(img, 0.1f), disk);
}

TEST(FovMask, ClosingFillsPinholes) {
  Tensor img(Shape{1, 1, 9, 9}, 0.5f);
  img.at(0, 0, 4, 4) = 0.0f;
  img.at(0, 0, 0, 0) = 0.0f;  // a corner notch is also closed
  EXPECT_EQ(count(generate_fov_mask(img)), 81.0);
}

// ---------------------------------------------------------------------------
// Augmentation

TEST(Augment, IdentityConfigIsBitwiseNoOp) {
  const Sample s = random_sample(13, 17, 1);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    const Sample a = augment(s, AugmentConfig::identity(), rng);
    EXPECT_EQ(a.image, s.image);
    EXPECT_EQ(a.gold, s.gold);
    EXPECT_EQ(a.fov, s.fov);
  }
}

TEST(Augment, HorizontalFlipIsAnInvolution) {
  const Sample s = random_sample(6, 9, 2);
  AugmentConfig c = AugmentConfig::identity();
  c.flip_horizontal = 1.0;
  std::mt19937_64 rng(0);
  const Sample once = augment(s, c, rng);
  EXPECT_NE(once.image, s.image);
  EXPECT_EQ(once.image.at(0, 1, 2, 0), s.image.at(0, 1, 2, 8));
  const Sample twice = augment(once, c, rng);
  EXPECT_EQ(twice.image, s.image);
  EXPECT_EQ(twice.gold, s.gold);
  EXPECT_EQ(twice.fov, s.fov);
}

TEST(Augment, QuarterTurnIsExactPermutation) {
  const std::size_t n = 5;
  const Sample s = random_sample(n, n, 3);
  AugmentConfig c = AugmentConfig::identity();
  c.rotation_deg = {90.0, 90.0};
  std::mt19937_64 rng(0);
  const Sample r = augment(s, c, rng);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      EXPECT_EQ(r.gold.at(0, 0, x, n - 1 - y), s.gold.at(0, 0, y, x));
      EXPECT_EQ(r.fov.at(0, 0, x, n - 1 - y), s.fov.at(0, 0, y, x));
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(r.image.at(0, k, x, n - 1 - y), s.image.at(0, k, y, x));
    }
  // four quarter turns return the original
  Sample full = s;
  for (int i = 0; i < 4; ++i) full = augment(full, c, rng);
  EXPECT_EQ(full.image, s.image);
  c.rotation_deg = {-270.0, -270.0};
  EXPECT_EQ(augment(s, c, rng).gold, r.gold);
}

TEST(Augment, GeometryIsSharedAcrossPlanes) {
  Sample s = random_sample(24, 24, 4);
  s.fov = s.gold;
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 0; x < 24; ++x) s.image.at(0, 0, y, x) = s.gold.at(0, 0, y, x);
  AugmentConfig c = AugmentConfig::identity();
  c.flip_horizontal = c.flip_vertical = 0.5;
  c.rotation_deg = {-20.0, 20.0};
  c.translate_frac = 0.1;
  c.affine = true;
  std::mt19937_64 rng(9);
  for (int i = 0; i < 10; ++i) {
    const Sample a = augment(s, c, rng);
    EXPECT_EQ(a.gold, a.fov);
    for (std::size_t y = 0; y < 24; ++y)
      for (std::size_t x = 0; x < 24; ++x)
        EXPECT_EQ(a.gold.at(0, 0, y, x), a.image.at(0, 0, y, x) >= 0.5f ? 1.0f : 0.0f);
  }
}

TEST(Augment, PhotometricTouchesImageOnly) {
  const Sample s = random_sample(10, 10, 5);
  AugmentConfig c = AugmentConfig::identity();
  c.brightness = {0.8, 1.2};
  c.gamma = {0.7, 1.4};
  c.channel_shift = 0.05;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    const Sample a = augment(s, c, rng);
    EXPECT_EQ(a.gold, s.gold);
    EXPECT_EQ(a.fov, s.fov);
    EXPECT_NE(a.image, s.image);
    for (float v : a.image.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, PhotometricMatchesClosedForm) {
  const Sample s = random_sample(4, 4, 6);
  AugmentDraw d;
  d.brightness = 1.1;
  d.gamma = 0.8;
  d.channel_shift = {0.05, -0.05, 0.0};
  const Sample a = apply_augment(s, d);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 16; ++i) {
      const double v = s.image[k * 16 + i];
      const double want = std::clamp(std::pow(std::min(1.0, v * 1.1), 0.8) + d.channel_shift[k], 0.0, 1.0);
      EXPECT_NEAR(a.image[k * 16 + i], want, 1e-6);
    }
}

TEST(Augment, SmallRotationsKeepForegroundArea) {
  Sample s{Tensor(Shape{1, 1, 64, 64}), Tensor(Shape{1, 1, 64, 64}), Tensor(Shape{1, 1, 64, 64})};
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      s.fov.at(0, 0, y, x) = std::hypot(y - 31.5, x - 31.5) <= 28 ? 1.0f : 0.0f;
      s.gold.at(0, 0, y, x) = (y >= 20 && y < 44 && x >= 14 && x < 50) ? 1.0f : 0.0f;
    }
  AugmentConfig c = AugmentConfig::identity();
  c.rotation_deg = {-20.0, 20.0};
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const Sample a = augment(s, c, rng);
    EXPECT_NEAR(count(a.gold), count(s.gold), 0.02 * count(s.gold));
    EXPECT_NEAR(count(a.fov), count(s.fov), 0.02 * count(s.fov));
  }
  c = AugmentConfig::identity();
  c.flip_horizontal = c.flip_vertical = 1.0;
  const Sample f = augment(s, c, rng);
  EXPECT_EQ(count(f.gold), count(s.gold));
}

TEST(Augment, ReproducibleForSeed) {
  const Sample s = random_sample(16, 16, 7);
  std::mt19937_64 a(11), b(11);
  const AugmentConfig c;
  const Sample x = augment(s, c, a), y = augment(s, c, b);
  EXPECT_EQ(x.image, y.image);
  EXPECT_EQ(x.gold, y.gold);
}

TEST(Augment, InvalidConfigRejected) {
  const Sample s = random_sample(8, 8, 8);
  std::mt19937_64 rng(0);
  AugmentConfig c;
  c.rotation_deg = {10.0, -10.0};
  EXPECT_THROW(augment(s, c, rng), std::invalid_argument);
  c = AugmentConfig{};
  c.flip_vertical = 1.5;
  EXPECT_THROW(augment(s, c, rng), std::invalid_argument);
  c = AugmentConfig{};
  c.gamma = {0.5, INFINITY};
  EXPECT_THROW(augment(s, c, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Training patches

TEST(TrainingPatch, FullSizePatchIsWholeSample) {
  const Sample s = random_sample(32, 32, 9);
  std::mt19937_64 rng(0);
  const Sample p = sample_training_patch(s, rng, 32);
  EXPECT_EQ(p.image, s.image);
  EXPECT_EQ(p.gold, s.gold);
}

TEST(TrainingPatch, PlanesShareTheAnchor) {
  const Sample s = random_sample(40, 50, 10);
  std::mt19937_64 a(3), b(3);
  for (int i = 0; i < 20; ++i) {
    const PatchAnchor at = draw_patch_anchor(40, 50, 16, b);
    const Sample p = sample_training_patch(s, a, 16);
    EXPECT_EQ(p.image, crop(s.image, at.row, at.col, 16, 16));
    EXPECT_EQ(p.gold, crop(s.gold, at.row, at.col, 16, 16));
    EXPECT_EQ(p.fov, crop(s.fov, at.row, at.col, 16, 16));
  }
}

TEST(TrainingPatch, AnchorsAreReproducibleAndUniform) {
  std::mt19937_64 a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(draw_patch_anchor(256, 256, 128, a), draw_patch_anchor(256, 256, 128, b));

  const int draws = 10000, bins = 129;
  std::vector<int> rows(bins, 0), cols(bins, 0);
  std::mt19937_64 rng(7);
  for (int i = 0; i < draws; ++i) {
    const auto at = draw_patch_anchor(256, 256, 128, rng);
    ASSERT_LT(at.row, 129u);
    ASSERT_LT(at.col, 129u);
    ++rows[at.row];
    ++cols[at.col];
  }
  const double p = 1.0 / bins, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  double chi_rows = 0.0;
  for (int k = 0; k < bins; ++k) {
    EXPECT_LT(std::abs(rows[k] - mean), 4 * sigma) << "row bin " << k;
    EXPECT_LT(std::abs(cols[k] - mean), 4 * sigma) << "col bin " << k;
    chi_rows += (rows[k] - mean) * (rows[k] - mean) / mean;
  }
  // chi-square with 128 dof: mean 128, sd 16
  EXPECT_LT(chi_rows, 128 + 4 * 16);
}

TEST(TrainingPatch, TooSmallImageRejected) {
  const Sample s = random_sample(20, 40, 11);
  std::mt19937_64 rng(0);
  EXPECT_THROW(sample_training_patch(s, rng, 32), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Patch grid

TEST(PatchGrid, ImageEqualToPatchHasOneAnchor) {
  const auto g = make_patch_grid(128, 128, 128, 3);
  ASSERT_EQ(g.coords.size(), 1u);
  EXPECT_EQ(g.coords[0], (PatchAnchor{0, 0}));
}

TEST(PatchGrid, ClosedFormMatchesEnumeration) {
  for (std::size_t len = 4; len <= 40; ++len)
    for (std::size_t size = 1; size <= len; size += 3)
      for (std::size_t stride = 1; stride <= std::min<std::size_t>(size, 9); ++stride) {
        const auto a = grid_axis_anchors(len, size, stride);
        ASSERT_EQ(a.size(), grid_axis_count(len, size, stride));
        EXPECT_EQ(a.front(), 0u);
        EXPECT_EQ(a.back(), len - size);
        for (std::size_t i = 1; i < a.size(); ++i) {
          EXPECT_GT(a[i], a[i - 1]);
          EXPECT_LE(a[i] - a[i - 1], stride);
        }
        std::vector<int> cover(len, 0);
        for (auto p : a)
          for (std::size_t k = 0; k < size; ++k) ++cover[p + k];
        for (int c : cover) EXPECT_GE(c, 1);
      }
}

TEST(PatchGrid, RetinaSizedCounts) {
  // 584 rows x 565 columns, 128-pixel patches
  EXPECT_EQ(grid_axis_count(584, 128, 3), 153u);
  EXPECT_EQ(grid_axis_count(565, 128, 3), 147u);
  EXPECT_EQ(make_patch_grid(584, 565, 128, 3).coords.size(), 22491u);
  EXPECT_EQ(make_patch_grid(584, 565, 128, 8).coords.size(), 58u * 56u);
}

TEST(PatchGrid, SquareFrameConventionGivesReferenceCounts) {
  // The reference counts 22801 = 151^2 and 3249 = 57^2 come out of the same
  // clamped-anchor rule applied to a 576 x 576 frame.
  EXPECT_EQ(make_patch_grid(576, 576, 128, 3).coords.size(), 22801u);
  EXPECT_EQ(make_patch_grid(576, 576, 128, 8).coords.size(), 3249u);
  // A floor rule without the clamped anchor needs a 578..580 frame instead.
  for (std::size_t side = 578; side <= 580; ++side) {
    EXPECT_EQ((side - 128) / 3 + 1, 151u);
    EXPECT_EQ((side - 128) / 8 + 1, 57u);
  }
  // 576 is the only frame reproducing both counts under the clamped rule.
  int frames = 0;
  for (std::size_t side = 128; side <= 700; ++side)
    frames += grid_axis_count(side, 128, 3) == 151 && grid_axis_count(side, 128, 8) == 57;
  EXPECT_EQ(frames, 1);
}

TEST(PatchGrid, InvalidArgumentsRejected) {
  EXPECT_THROW(make_patch_grid(64, 64, 32, 0), std::invalid_argument);
  EXPECT_THROW(make_patch_grid(20, 64, 32, 4), std::invalid_argument);
  EXPECT_THROW(make_patch_grid(64, 64, 8, 9), std::invalid_argument);
  EXPECT_THROW(extract_grid_patches(Tensor(Shape{1, 1, 8, 8}), 4, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Stitching

TEST(Stitch, ConstantPatchesGiveConstantMap) {
  const auto g = make_patch_grid(30, 41, 16, 5);
  std::vector<Tensor> outs(g.coords.size(), Tensor(Shape{1, 1, 16, 16}, 0.7f));
  const Tensor m = stitch_patches(g, outs, 30, 41);
  for (float v : m.values()) EXPECT_FLOAT_EQ(v, 0.7f);
}

TEST(Stitch, SinglePatchIsReturnedAsIs) {
  const Tensor p = random_plane(1, 12, 12, 12);
  const auto g = make_patch_grid(12, 12, 12, 4);
  EXPECT_EQ(stitch_patches(g, {p}, 12, 12), p);
}

TEST(Stitch, HalfOverlapAveragesToOneHalf) {
  PatchGrid g{4, 2, 4, 6, {{0, 0}, {0, 2}}};
  const Tensor m = stitch_patches(g, {Tensor(Shape{1, 1, 4, 4}, 0.0f), Tensor(Shape{1, 1, 4, 4}, 1.0f)}, 4, 6);
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_EQ(m.at(0, 0, y, 0), 0.0f);
    EXPECT_EQ(m.at(0, 0, y, 1), 0.0f);
    EXPECT_EQ(m.at(0, 0, y, 2), 0.5f);
    EXPECT_EQ(m.at(0, 0, y, 3), 0.5f);
    EXPECT_EQ(m.at(0, 0, y, 4), 1.0f);
    EXPECT_EQ(m.at(0, 0, y, 5), 1.0f);
  }
}

TEST(Stitch, MissingOutputsRejected) {
  const auto g = make_patch_grid(20, 20, 8, 4);
  std::vector<Tensor> outs(g.coords.size() - 1, Tensor(Shape{1, 1, 8, 8}));
  EXPECT_THROW(stitch_patches(g, outs, 20, 20), std::invalid_argument);
  PatchGrid sparse{8, 4, 20, 20, {{0, 0}}};
  EXPECT_THROW(stitch_patches(sparse, {Tensor(Shape{1, 1, 8, 8})}, 20, 20), std::logic_error);
}

TEST(Stitch, CutThenStitchReconstructsSource) {
  struct Case {
    std::size_t size, stride, h, w;
  };
  for (const Case c : {Case{128, 3, 150, 141}, Case{128, 8, 200, 171}, Case{32, 5, 77, 90}}) {
    const Tensor src = random_plane(2, c.h, c.w, c.size + c.stride);
    auto [grid, patches] = extract_grid_patches(src, c.size, c.stride);
    const Tensor back = stitch_patches(grid, patches, c.h, c.w);
    double worst = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) worst = std::max(worst, std::abs(double(back[i]) - src[i]));
    EXPECT_LT(worst, 1e-6) << c.size << "/" << c.stride;
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

TEST(Synth, BitIdenticalPerSeed) {
  const Sample a = synth_vessel_sample(17, 96, 80), b = synth_vessel_sample(17, 96, 80);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.gold, b.gold);
  EXPECT_EQ(a.fov, b.fov);
  EXPECT_NE(synth_vessel_sample(18, 96, 80).gold, a.gold);
}

TEST(Synth, WellFormedAndGoldInsideFov) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Sample s = synth_vessel_sample(seed, 64, 72);
    ASSERT_NO_THROW(s.validate());
    EXPECT_EQ(s.image.shape(), (Shape{1, 3, 64, 72}));
    for (std::size_t i = 0; i < s.gold.size(); ++i) EXPECT_LE(s.gold[i], s.fov[i]);
    for (float v : s.image.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Synth, VesselDensityInRange) {
  for (std::size_t side : {64u, 128u}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const Sample s = synth_vessel_sample(seed, side, side);
      const double density = count(s.gold) / count(s.fov);
      EXPECT_GE(density, 0.03) << side << " seed " << seed;
      EXPECT_LE(density, 0.20) << side << " seed " << seed;
    }
  }
}

TEST(Synth, VesselsAreDarkerThanBackground) {
  const Sample s = synth_vessel_sample(3, 128, 128);
  double in = 0, out = 0, n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < s.gold.size(); ++i) {
    if (!s.fov[i]) continue;
    const double g = s.image[128 * 128 + i];  // green channel
    if (s.gold[i]) {
      in += g;
      ++n_in;
    } else {
      out += g;
      ++n_out;
    }
  }
  EXPECT_LT(in / n_in, 0.9 * out / n_out);
}

TEST(Synth, FovMaskIsRecoverableByThresholding) {
  const Sample s = synth_vessel_sample(5, 128, 128);
  const Tensor m = generate_fov_mask(s.image);
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    inter += m[i] * s.fov[i];
    uni += std::max(m[i], s.fov[i]);
  }
  EXPECT_GT(inter / uni, 0.99);
}

TEST(Synth, RejectsTinyImagesAndBadConfig) {
  EXPECT_THROW(synth_vessel_sample(0, 63, 100), std::invalid_argument);
  SynthConfig c;
  c.max_curves = 2;
  EXPECT_THROW(synth_vessel_sample(0, 64, 64, c), std::invalid_argument);
}

TEST(Synth, CorpusWriterEmitsNamedFiles) {
  TempDir dir;
  write_synth_corpus(dir.path(), 3, 99, 64, 64);
  for (int i = 0; i < 3; ++i) {
    const std::string stem = corpus_stem(i);
    const Sample s = synth_vessel_sample(derive_seed(99, i), 64, 64);
    EXPECT_EQ(load_label(dir / ("gold_" + stem + ".png")), s.gold);
    EXPECT_EQ(load_label(dir / ("fov_" + stem + ".png")), s.fov);
    const Tensor img = load_image(dir / ("img_" + stem + ".png"));
    ASSERT_EQ(img.shape(), s.image.shape());
    for (std::size_t k = 0; k < img.size(); ++k) EXPECT_NEAR(img[k], s.image[k], 0.5 / 255 + 1e-6);
  }
  std::ifstream manifest(dir / "manifest.csv");
  std::string line;
  int lines = 0;
  while (std::getline(manifest, line)) ++lines;
  EXPECT_EQ(lines, 4);
  EXPECT_EQ(corpus_stem(0), "0000");
  EXPECT_EQ(corpus_stem(12), "0012");
}
