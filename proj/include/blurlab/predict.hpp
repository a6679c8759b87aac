#pragma once

// Inference-side utilities: multiscale prediction (log-probabilities
// averaged over crops and scales), hypercolumn features, and the per-pixel
// softmax-regression head used for segmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "blurlab/distribution.hpp"
#include "blurlab/error.hpp"
#include "blurlab/image.hpp"
#include "blurlab/imaging.hpp"
#include "blurlab/net.hpp"
#include "blurlab/rng.hpp"
#include "blurlab/train.hpp"

namespace blurlab {

struct CropPolicy {
  bool dense = false;  // false: one center crop per scale
  int stride = 16;     // dense crop stride in pixels
};

/// Top-left offsets of the crops of side `size` along an axis of length `n`.
inline std::vector<int> crop_offsets(int n, int size, const CropPolicy& policy) {
  if (size > n) throw InvalidParameter("crop larger than scaled image");
  if (!policy.dense) return {(n - size) / 2};
  if (policy.stride < 1) throw InvalidParameter("crop stride must be >= 1");
  std::vector<int> offs;
  for (int o = 0; o + size <= n; o += policy.stride) offs.push_back(o);
  if (offs.back() != n - size) offs.push_back(n - size);
  return offs;
}

/// Averages log-probability vectors and renormalizes with a softmax.
inline SoftmaxResult average_logprobs(std::span<const std::vector<double>> logprobs) {
  if (logprobs.empty()) throw InvalidParameter("nothing to average");
  std::vector<double> mean(logprobs[0].size(), 0.0);
  for (const auto& lp : logprobs) {
    if (lp.size() != mean.size()) throw ShapeError("log-probability vectors differ in length");
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += lp[k];
  }
  for (double& m : mean) m /= static_cast<double>(logprobs.size());
  return softmax_logprobs(mean);
}

/// Resizes `image` to each scale (min side), runs every crop per the policy
/// and averages the log-probabilities over all crops and scales.
template <typename T>
ClassDistribution multiscale_predict(const Network<T>& net, const Image& image, const std::vector<int>& scales,
                                     const CropPolicy& policy = {}) {
  if (scales.empty()) throw InvalidParameter("scale list is empty");
  const int ch = net.architecture().input.height;
  const int cw = net.architecture().input.width;
  std::vector<std::vector<double>> all;
  for (int s : scales) {
    const Image x = resize(image, {ScaleMode::min_side, s});
    std::vector<Image> crops;
    for (int top : crop_offsets(x.height, ch, policy))
      for (int left : crop_offsets(x.width, cw, policy)) crops.push_back(crop(x, top, left, ch, cw));
    for (auto& lp : predict_logprobs(net, crops)) all.push_back(std::move(lp));
  }
  return average_logprobs(all).dist;
}

/// Per-pixel features, row-major [y][x][d].
struct FeatureMap {
  int height = 0;
  int width = 0;
  int dims = 0;
  std::vector<float> values;

  const float* at(int y, int x) const { return values.data() + (static_cast<std::size_t>(y) * width + x) * dims; }
};

/// Bilinearly upsamples every pooling tap to the input resolution and
/// concatenates them along channels. Tap t (stride s = 2^(t+1)) is sampled at
/// (p + 0.5) / s - 0.5, so shifting the input by s shifts the tap's
/// contribution by exactly s pixels away from the borders.
template <typename T>
FeatureMap hypercolumn_features(const Network<T>& net, const Image& image) {
  const auto fo = forward_taps(net, image);
  if (fo.taps.size() < 2) throw ShapeError("hypercolumn needs at least two pooling taps");
  FeatureMap f;
  f.height = image.height;
  f.width = image.width;
  for (const auto& s : fo.tap_shapes) f.dims += s.channels;
  f.values.assign(static_cast<std::size_t>(f.height) * f.width * f.dims, 0.0f);
  int base = 0;
  for (std::size_t t = 0; t < fo.taps.size(); ++t) {
    const TensorShape ts = fo.tap_shapes[t];
    const auto& act = fo.taps[t][0];
    const double stride = std::pow(2.0, static_cast<double>(t + 1));
    std::vector<int> x0(f.width), x1(f.width);
    std::vector<double> fx(f.width);
    for (int x = 0; x < f.width; ++x) {
      const double src = std::clamp((x + 0.5) / stride - 0.5, 0.0, ts.width - 1.0);
      x0[x] = static_cast<int>(std::floor(src));
      x1[x] = std::min(x0[x] + 1, ts.width - 1);
      fx[x] = src - x0[x];
    }
    const std::size_t plane = static_cast<std::size_t>(ts.height) * ts.width;
    for (int y = 0; y < f.height; ++y) {
      const double srcy = std::clamp((y + 0.5) / stride - 0.5, 0.0, ts.height - 1.0);
      const int y0 = static_cast<int>(std::floor(srcy));
      const int y1 = std::min(y0 + 1, ts.height - 1);
      const double fy = srcy - y0;
      for (int x = 0; x < f.width; ++x) {
        float* out = f.values.data() + (static_cast<std::size_t>(y) * f.width + x) * f.dims + base;
        for (int c = 0; c < ts.channels; ++c) {
          const float* p = act.data() + plane * c;
          const double top = p[static_cast<std::size_t>(y0) * ts.width + x0[x]] * (1.0 - fx[x]) +
                             p[static_cast<std::size_t>(y0) * ts.width + x1[x]] * fx[x];
          const double bot = p[static_cast<std::size_t>(y1) * ts.width + x0[x]] * (1.0 - fx[x]) +
                             p[static_cast<std::size_t>(y1) * ts.width + x1[x]] * fx[x];
          out[c] = static_cast<float>(top * (1.0 - fy) + bot * fy);
        }
      }
    }
    base += ts.channels;
  }
  return f;
}

/// Labelled per-pixel feature vectors.
struct PixelSet {
  int dims = 0;
  std::vector<float> features;  // [n][dims]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  void append(const float* f, int label) {
    features.insert(features.end(), f, f + dims);
    labels.push_back(label);
  }
};

/// Draws up to `count` pixels uniformly at random from one feature map.
inline void sample_pixels(const FeatureMap& f, const LabelGrid& mask, int count, Rng& rng, PixelSet& out) {
  if (mask.height != f.height || mask.width != f.width) throw ShapeError("mask and feature extents differ");
  if (out.dims == 0) out.dims = f.dims;
  if (out.dims != f.dims) throw ShapeError("feature dimension changed between examples");
  const std::uint64_t n = static_cast<std::uint64_t>(f.height) * f.width;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t p = rng.below(n);
    const int y = static_cast<int>(p / f.width);
    const int x = static_cast<int>(p % f.width);
    out.append(f.at(y, x), mask.at(y, x));
  }
}

/// Multinomial logistic regression on standardized features.
struct SegHead {
  int dims = 0;
  int classes = 0;
  std::vector<double> mean;
  std::vector<double> inv_std;
  std::vector<double> params;  // [classes][dims] weights, then [classes] biases

  std::vector<double> logits(const float* feature) const {
    std::vector<double> z(classes, 0.0);
    for (int k = 0; k < classes; ++k) {
      const double* w = params.data() + static_cast<std::size_t>(k) * dims;
      double acc = params[static_cast<std::size_t>(classes) * dims + k];
      for (int d = 0; d < dims; ++d) acc += w[d] * (feature[d] - mean[d]) * inv_std[d];
      z[k] = acc;
    }
    return z;
  }

  ClassDistribution predict(const float* feature) const { return softmax_logprobs(logits(feature)).dist; }

  LabelGrid predict_mask(const FeatureMap& f) const {
    if (f.dims != dims) throw ShapeError("feature dimension does not match the head");
    LabelGrid g(f.height, f.width);
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x) {
        const auto z = logits(f.at(y, x));
        g.at(y, x) = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
      }
    return g;
  }
};

/// Trains the head with the same momentum SGD as the network. Weights start
/// at zero, so an empty schedule predicts the uniform distribution.
inline SegHead segmentation_head_train(const PixelSet& pixels, int classes, const TrainSchedule& schedule) {
  schedule.validate();
  if (classes < 2) throw InvalidParameter("segmentation head needs at least 2 classes");
  if (pixels.dims < 1 || pixels.features.size() != pixels.size() * pixels.dims)
    throw ShapeError("pixel set is inconsistent");
  for (int l : pixels.labels)
    if (l < 0 || l >= classes) throw InvalidParameter("pixel label out of range");
  SegHead head;
  head.dims = pixels.dims;
  head.classes = classes;
  head.mean.assign(head.dims, 0.0);
  head.inv_std.assign(head.dims, 1.0);
  head.params.assign(static_cast<std::size_t>(classes) * (head.dims + 1), 0.0);
  const std::size_t n = pixels.size();
  if (n > 0) {
    std::vector<double> sq(head.dims, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (int d = 0; d < head.dims; ++d) {
        const double v = pixels.features[i * head.dims + d];
        head.mean[d] += v;
        sq[d] += v * v;
      }
    for (int d = 0; d < head.dims; ++d) {
      head.mean[d] /= static_cast<double>(n);
      const double var = sq[d] / static_cast<double>(n) - head.mean[d] * head.mean[d];
      head.inv_std[d] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
  }

  std::vector<double> velocity(head.params.size(), 0.0);
  std::vector<double> grad(head.params.size());
  std::vector<double> xhat(head.dims);
  int epoch = 0;
  for (const auto& stage : schedule.stages) {
    for (int e = 0; e < stage.epochs; ++e, ++epoch) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(schedule.seed, {hash_label("seg-shuffle"), static_cast<std::uint64_t>(epoch)}));
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      for (std::size_t start = 0; start < n; start += schedule.batch_size) {
        const std::size_t count = std::min<std::size_t>(schedule.batch_size, n - start);
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t j = 0; j < count; ++j) {
          const std::size_t i = order[start + j];
          const float* f = pixels.features.data() + i * head.dims;
          for (int d = 0; d < head.dims; ++d) xhat[d] = (f[d] - head.mean[d]) * head.inv_std[d];
          const auto p = head.predict(f).probs;
          for (int k = 0; k < classes; ++k) {
            const double g = (p[k] - (k == pixels.labels[i] ? 1.0 : 0.0)) / static_cast<double>(count);
            double* gw = grad.data() + static_cast<std::size_t>(k) * head.dims;
            for (int d = 0; d < head.dims; ++d) gw[d] += g * xhat[d];
            grad[static_cast<std::size_t>(classes) * head.dims + k] += g;
          }
        }
        sgd_step<double>(head.params, velocity, grad, stage.lr, schedule.momentum);
      }
    }
  }
  return head;
}

}  // namespace blurlab
