#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "blurlab/imaging.hpp"
#include "oracles.hpp"

using namespace blurlab;

namespace {

// Intensity-weighted standard deviation of the column coordinate.
double column_spread(const Image& img) {
  double total = 0, mean = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      total += img.at(y, x);
      mean += img.at(y, x) * x;
    }
  mean /= total;
  double var = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) var += img.at(y, x) * (x - mean) * (x - mean);
  return std::sqrt(var / total);
}

}  // namespace

TEST(Resize, MinSideHalvesBothExtents) {
  const Image img(100, 200, 1, 0.3);
  const Image out = resize(img, {ScaleMode::min_side, 50});
  EXPECT_EQ(out.height, 50);
  EXPECT_EQ(out.width, 100);
}

TEST(Resize, GeometricMeanPreservesAspect) {
  const auto e = scaled_extents(100, 400, {ScaleMode::geometric_mean, 100});
  EXPECT_EQ(e.height, 50);
  EXPECT_EQ(e.width, 200);
}

TEST(Resize, IdentityAndConstant) {
  Rng rng(1);
  const Image img = oracle::random_image(rng, 37, 23, 3);
  EXPECT_LE(oracle::max_abs_diff(resize_to(img, 37, 23), img), 1e-9);
  const Image flat(40, 60, 1, 0.625);
  for (auto [h, w] : {std::pair{20, 30}, {57, 91}, {9, 100}}) {
    const Image out = resize_to(flat, h, w);
    for (double v : out.values) EXPECT_NEAR(v, 0.625, 1e-12);
  }
}

TEST(Resize, RejectsEmptyTarget) { EXPECT_THROW(resize_to(Image(4, 4), 0, 3), InvalidParameter); }

TEST(Convolve, DeltaIsIdentity) {
  Rng rng(2);
  const Image img = oracle::random_image(rng, 19, 31);
  EXPECT_EQ(convolve(img, delta_kernel(), ConvMethod::direct), img);
  EXPECT_LE(oracle::max_abs_diff(convolve(img, delta_kernel(), ConvMethod::fft), img), 1e-9);
}

TEST(Convolve, ConstantImageStaysConstant) {
  const Image flat(24, 24, 1, 0.4);
  for (const Kernel& k : {disk_kernel(3), box_kernel(6, Orientation::vertical), camera_shake_kernel(11)})
    for (auto m : {ConvMethod::direct, ConvMethod::fft})
      for (double v : convolve(flat, k, m).values) EXPECT_NEAR(v, 0.4, 1e-12);
}

TEST(Convolve, FftMatchesDirectOnDiskRadiusTwo) {
  Rng rng(3);
  const Image img = oracle::random_image(rng, 16, 16);
  const Kernel k = disk_kernel(2);
  EXPECT_LT(oracle::max_abs_diff(convolve(img, k, ConvMethod::fft), convolve(img, k, ConvMethod::direct)), 1e-6);
}

TEST(Convolve, DirectMatchesReferenceIncludingBorders) {
  Rng rng(4);
  for (int family = 0; family < oracle::kFamilies; ++family) {
    const Kernel k = oracle::random_kernel(rng, family);
    const Image img = oracle::random_image(rng, 9 + static_cast<int>(rng.below(20)), 9 + static_cast<int>(rng.below(20)), 1);
    if (k.height > 2 * img.height || k.width > 2 * img.width) continue;
    const Image ref = oracle::convolve(img, k);
    EXPECT_LT(oracle::max_abs_diff(convolve(img, k, ConvMethod::direct), ref), 1e-12) << oracle::family_name(family);
    EXPECT_LT(oracle::max_abs_diff(convolve(img, k, ConvMethod::fft), ref), 1e-9) << oracle::family_name(family);
  }
}

TEST(Convolve, AsymmetricKernelOrientation) {
  // A one-sided kernel shifts content: out(y, x) = img(y, x - 1).
  Kernel k;
  k.height = 1;
  k.width = 3;
  k.weights = {0.0, 0.0, 1.0};
  k.kind = KernelKind::box_h;
  Image img(1, 5);
  img.values = {0.1, 0.2, 0.3, 0.4, 0.5};
  const Image out = convolve(img, k, ConvMethod::direct);
  EXPECT_DOUBLE_EQ(out.at(0, 2), 0.2);
  EXPECT_DOUBLE_EQ(out.at(0, 0), 0.1);  // reflected
  EXPECT_LE(oracle::max_abs_diff(convolve(img, k, ConvMethod::fft), out), 1e-12);
}

TEST(Convolve, RejectsOversizedKernel) { EXPECT_THROW(convolve(Image(3, 3), disk_kernel(4)), InvalidParameter); }

TEST(Quantize, Examples) {
  Image img(1, 5);
  img.values = {1.0, 0.5, 0.0, -0.2, 1.7};
  const Image q = quantize8(img);
  EXPECT_EQ(q.values[0], 1.0);
  EXPECT_EQ(q.values[1], 128.0 / 255.0);
  EXPECT_EQ(q.values[2], 0.0);
  EXPECT_EQ(q.values[3], 0.0);
  EXPECT_EQ(q.values[4], 1.0);
}

TEST(Quantize, Idempotent) {
  Rng rng(5);
  const Image q = quantize8(oracle::random_image(rng, 20, 20));
  EXPECT_EQ(quantize8(q), q);
}

TEST(DegradeEval, DeltaCollapsesToResizeAndQuantize) {
  Rng rng(6);
  const Image img = oracle::random_image(rng, 80, 120);
  EXPECT_EQ(degrade_eval(img, delta_kernel(), 64, 64), quantize8(resize(img, {ScaleMode::min_side, 64})));
}

TEST(DegradeEval, PreservesLocalMean) {
  // A gentle ramp is reproduced by any unit-sum kernel up to the centroid
  // offset times the slope, plus quantization.
  Image ramp(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) ramp.at(y, x) = 0.25 + 0.5 * (x + y) / 128.0;
  Rng rng(7);
  for (int family = 0; family < oracle::kFamilies; ++family)
    for (int rep = 0; rep < 5; ++rep) {
      const Kernel k = oracle::random_kernel(rng, family);
      const int margin = std::max(k.height, k.width) / 2 + 1;
      const Image out = degrade_eval(ramp, k, 64, 64);
      const Image a = crop(out, margin, margin, 64 - 2 * margin, 64 - 2 * margin);
      const Image b = crop(ramp, margin, margin, 64 - 2 * margin, 64 - 2 * margin);
      EXPECT_LE(std::abs(a.mean() - b.mean()), 2.0 / 255.0) << oracle::family_name(family);
    }
}

TEST(DegradeEval, HeavyDefocusRemovesHighFrequencies) {
  Rng rng(8);
  const Image img = oracle::random_image(rng, 96, 96);
  const double sharp = laplacian_energy(degrade_eval(img, delta_kernel(), 96, 64));
  const double blurred = laplacian_energy(degrade_eval(img, disk_kernel(8), 96, 64));
  EXPECT_LT(blurred, sharp);
}

TEST(DegradeTrain, CollapsesToRandomCrop) {
  Rng src(9);
  const Image img = oracle::random_image(src, 96, 96);
  const Image base = quantize8(resize(img, {ScaleMode::min_side, 96}));
  TrainDegradeParams p{{96}, 96, 96, 56};
  Rng rng(10);
  const Image out = degrade_train(img, delta_kernel(), p, rng);
  bool found = false;
  for (int top = 0; top + 56 <= 96 && !found; ++top)
    for (int left = 0; left + 56 <= 96 && !found; ++left) found = crop(base, top, left, 56, 56) == out;
  EXPECT_TRUE(found);
}

TEST(DegradeTrain, DeterministicForFixedSeed) {
  Rng src(11);
  const Image img = oracle::random_image(src, 96, 96);
  TrainDegradeParams p;
  Rng a(12), b(12);
  EXPECT_EQ(degrade_train(img, disk_kernel(2), p, a), degrade_train(img, disk_kernel(2), p, b));
}

TEST(DegradeTrain, ImpulseFootprintScalesWithNetOverCanonical) {
  Image impulse(96, 96, 1, 0.0);
  impulse.at(48, 48) = 1.0;
  const Kernel k = disk_kernel(4);
  // Column spread of the disk itself: sum(dx^2) / 49 over its taps.
  double var = 0;
  for (int r = 0; r < k.height; ++r)
    for (int c = 0; c < k.width; ++c) var += k.at(r, c) * (c - 4) * (c - 4);
  const double kernel_sd = std::sqrt(var);
  for (int net : {96, 48}) {
    TrainDegradeParams p{{96}, 96, net, net};
    Rng rng(13);
    const Image out = degrade_train(impulse, k, p, rng);
    const double expected = kernel_sd * net / 96.0;
    EXPECT_NEAR(column_spread(out) / expected, 1.0, 0.1) << "net scale " << net;
  }
}

TEST(AssignKernel, Examples) {
  for (std::uint64_t id = 0; id < 50; ++id) EXPECT_EQ(assign_kernel(id, 1), 0u);
  EXPECT_EQ(assign_kernel(12345, 100), assign_kernel(12345, 100));
  std::vector<int> hits(100, 0);
  for (std::uint64_t id = 0; id < 10000; ++id) ++hits[assign_kernel(id, 100)];
  for (int h : hits) EXPECT_GE(h, 1);
  EXPECT_THROW(assign_kernel(1, 0), InvalidParameter);
}

TEST(Pnm, RoundTripAndErrors) {
  Rng rng(14);
  const Image img = quantize8(oracle::random_image(rng, 7, 9, 3));
  std::stringstream ss;
  write_pnm(img, ss);
  EXPECT_EQ(read_pnm(ss), img);
  std::istringstream truncated("P5\n4 4\n255\nabc");
  EXPECT_THROW(read_pnm(truncated), ParseError);
  std::istringstream wrong("P2\n1 1\n255\n0\n");
  EXPECT_THROW(read_pnm(wrong), ParseError);
}

TEST(LabelGrid, NearestResizeKeepsLabels) {
  LabelGrid g(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) g.at(y, x) = x < 2 ? 1 : 3;
  const LabelGrid up = resize_nearest(g, 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) EXPECT_EQ(up.at(y, x), x < 4 ? 1 : 3);
  EXPECT_EQ(image_to_labels(labels_to_image(g)), g);
}
