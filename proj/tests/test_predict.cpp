#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "blurlab/predict.hpp"
#include "oracles.hpp"

using namespace blurlab;

namespace {

Network<float> random_net(std::uint64_t seed) {
  auto net = Network<float>::initialized(blurnet_s(), seed);
  Rng rng(seed + 1);
  for (const auto& b : net.blocks())
    for (std::size_t i = 0; i < b.bias_count; ++i) net.params()[b.bias_offset + i] = static_cast<float>(rng.uniform(0.0, 0.2));
  return net;
}

void expect_same(const ClassDistribution& a, const ClassDistribution& b, double tol) {
  ASSERT_EQ(a.probs.size(), b.probs.size());
  for (std::size_t k = 0; k < a.probs.size(); ++k) EXPECT_NEAR(a.probs[k], b.probs[k], tol);
}

}  // namespace

TEST(CropOffsets, CenterAndDense) {
  EXPECT_EQ(crop_offsets(64, 56, {}), std::vector<int>{4});
  EXPECT_EQ(crop_offsets(100, 56, {true, 16}), (std::vector<int>{0, 16, 32, 44}));
  EXPECT_EQ(crop_offsets(56, 56, {true, 16}), std::vector<int>{0});
  EXPECT_THROW(crop_offsets(40, 56, {}), InvalidParameter);
}

TEST(Multiscale, SingleScaleCenterCropIsPlainForward) {
  const auto net = random_net(1);
  Rng rng(2);
  const Image img = oracle::random_image(rng, 96, 96);
  const auto d = multiscale_predict(net, img, {64});
  const Image x = center_crop(resize(img, {ScaleMode::min_side, 64}), 56);
  const auto plain = softmax_logprobs(forward_images(net, std::span<const Image>(&x, 1)).logits[0]).dist;
  expect_same(d, plain, 1e-12);
}

TEST(Multiscale, DuplicatedAndPermutedScales) {
  const auto net = random_net(3);
  Rng rng(4);
  const Image img = oracle::random_image(rng, 96, 120);
  expect_same(multiscale_predict(net, img, {64, 64}), multiscale_predict(net, img, {64}), 1e-12);
  expect_same(multiscale_predict(net, img, {64, 80, 96}), multiscale_predict(net, img, {96, 64, 80}), 1e-12);
  const CropPolicy dense{true, 8};
  expect_same(multiscale_predict(net, img, {80, 64}, dense), multiscale_predict(net, img, {64, 80}, dense), 1e-12);
}

TEST(Multiscale, AveragesLogProbabilities) {
  const std::vector<std::vector<double>> lps{{std::log(0.5), std::log(0.5)}, {std::log(0.9), std::log(0.1)}};
  const auto r = average_logprobs(lps).dist;
  // Geometric mean renormalized: sqrt(.45) : sqrt(.05) = 3 : 1.
  EXPECT_NEAR(r.probs[0], 0.75, 1e-12);
  EXPECT_NEAR(r.probs[1], 0.25, 1e-12);
  EXPECT_THROW(average_logprobs({}), InvalidParameter);
}

TEST(Hypercolumn, ChannelCountIsSumOfTaps) {
  const auto net = random_net(5);
  const auto f = hypercolumn_features(net, Image(40, 48, 1, 0.3));
  EXPECT_EQ(f.dims, 16 + 32 + 64);
  EXPECT_EQ(f.height, 40);
  EXPECT_EQ(f.width, 48);
}

TEST(Hypercolumn, ConstantInputGivesConstantInterior) {
  const auto net = random_net(6);
  const auto f = hypercolumn_features(net, Image(64, 64, 1, 0.7));
  // Zero padding at each conv disturbs a border that grows with depth; the
  // deepest tap sees 3 pixels of its own grid, i.e. 24 input pixels.
  const int margin = 24;
  const float* ref = f.at(32, 32);
  for (int y = margin; y < 64 - margin; ++y)
    for (int x = margin; x < 64 - margin; ++x)
      for (int d = 0; d < f.dims; ++d) ASSERT_NEAR(f.at(y, x)[d], ref[d], 1e-5) << y << "," << x << " dim " << d;
}

TEST(Hypercolumn, ShiftByDeepestStrideShiftsFeatures) {
  const auto net = random_net(7);
  Rng rng(8);
  const Image big = oracle::random_image(rng, 96, 96);
  const int s = 8;  // stride of the deepest tap
  const Image a = crop(big, 0, 0, 80, 80);
  const Image b = crop(big, 0, s, 80, 80);  // b(y, x) = a(y, x + s)
  const auto fa = hypercolumn_features(net, a);
  const auto fb = hypercolumn_features(net, b);
  const int deep = 16 + 32;  // first channel of the deepest tap
  double worst = 0.0;
  for (int y = 28; y < 52; ++y)
    for (int x = 28; x < 52 - s; ++x)
      for (int d = deep; d < fa.dims; ++d) worst = std::max(worst, static_cast<double>(std::abs(fb.at(y, x)[d] - fa.at(y, x + s)[d])));
  EXPECT_LT(worst, 1e-3);
}

TEST(SegHead, SeparableToyData) {
  PixelSet px;
  px.dims = 3;
  Rng rng(9);
  for (int i = 0; i < 2000; ++i) {
    const int label = static_cast<int>(rng.below(2));
    const float f[3] = {static_cast<float>((label ? 1.0 : -1.0) * rng.uniform(0.2, 2.0)),
                        static_cast<float>(rng.uniform(-5, 5)), static_cast<float>(rng.uniform(0, 10))};
    px.append(f, label);
  }
  TrainSchedule s;
  s.stages = {{5, 0.1}};
  s.seed = 10;
  const SegHead head = segmentation_head_train(px, 2, s);
  int correct = 0;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const auto p = head.predict(px.features.data() + i * 3).probs;
    correct += (p[1] > p[0]) == (px.labels[i] == 1);
  }
  EXPECT_GT(correct / static_cast<double>(px.size()), 0.99);
  const SegHead again = segmentation_head_train(px, 2, s);
  EXPECT_EQ(again.params, head.params);
}

TEST(SegHead, NoTrainingPredictsUniform) {
  PixelSet px;
  px.dims = 2;
  const float f[2] = {1.0f, -3.0f};
  px.append(f, 1);
  px.append(f, 0);
  const SegHead head = segmentation_head_train(px, 4, TrainSchedule{});
  for (double p : head.predict(f).probs) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(SegHead, RejectsBadLabels) {
  PixelSet px;
  px.dims = 1;
  const float f = 0.0f;
  px.append(&f, 5);
  EXPECT_THROW(segmentation_head_train(px, 3, TrainSchedule{}), InvalidParameter);
}

TEST(SamplePixels, DrawsFromMask) {
  FeatureMap f;
  f.height = 4;
  f.width = 5;
  f.dims = 1;
  LabelGrid mask(4, 5);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      f.values.push_back(static_cast<float>(y * 5 + x));
      mask.at(y, x) = (y * 5 + x) % 3;
    }
  PixelSet px;
  Rng rng(11);
  sample_pixels(f, mask, 50, rng, px);
  ASSERT_EQ(px.size(), 50u);
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_EQ(px.labels[i], static_cast<int>(px.features[i]) % 3);
  EXPECT_THROW(sample_pixels(f, LabelGrid(3, 5), 1, rng, px), ShapeError);
}
