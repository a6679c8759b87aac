#pragma once

// Training and fine-tuning loop.
//
// Each epoch shuffles the training set from (seed, epoch); every example in
// a batch draws its own kernel from the blur distribution and is degraded
// through the training pipeline with randomness derived from
// (seed, epoch, position). Gradients are computed over fixed shards of up
// to kShardSize examples and summed in shard order, so results do not
// depend on how many threads run the shards.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "blurlab/dataset.hpp"
#include "blurlab/error.hpp"
#include "blurlab/imaging.hpp"
#include "blurlab/net.hpp"
#include "blurlab/parallel.hpp"
#include "blurlab/psf.hpp"
#include "blurlab/rng.hpp"

namespace blurlab {

/// A bank of camera-shake kernels identified by a base seed; kernel i is
/// camera_shake_kernel(derive_seed(seed, {i})).
struct ShakeBank {
  std::uint64_t seed = 0;
  std::size_t size = 1;

  std::uint64_t kernel_seed(std::size_t i) const { return derive_seed(seed, {static_cast<std::uint64_t>(i)}); }
  Kernel kernel(std::size_t i) const { return camera_shake_kernel(kernel_seed(i)); }
};

struct KernelSource {
  enum class Kind { sharp, fixed, bank };
  Kind kind = Kind::sharp;
  Kernel kernel;    // for fixed
  ShakeBank bank;   // for bank

  static KernelSource sharp() { return {}; }
  static KernelSource fixed(Kernel k) { return {Kind::fixed, std::move(k), {}}; }
  static KernelSource from_bank(ShakeBank b) { return {Kind::bank, {}, b}; }

  /// Kernel for a random draw (training).
  Kernel draw(Rng& rng) const {
    switch (kind) {
      case Kind::sharp: return delta_kernel();
      case Kind::fixed: return kernel;
      case Kind::bank: return bank.kernel(rng.below(bank.size));
    }
    return delta_kernel();
  }

  /// Kernel for validation item `item` (deterministic across settings).
  Kernel for_item(std::uint64_t item) const {
    switch (kind) {
      case Kind::sharp: return delta_kernel();
      case Kind::fixed: return kernel;
      case Kind::bank: return bank.kernel(assign_kernel(item, bank.size));
    }
    return delta_kernel();
  }
};

struct BlurDistribution {
  std::vector<std::pair<KernelSource, double>> entries;

  static BlurDistribution sharp_only() { return {{{KernelSource::sharp(), 1.0}}}; }

  void validate() const {
    if (entries.empty()) throw InvalidParameter("blur distribution is empty");
    double total = 0.0;
    for (const auto& [src, w] : entries) {
      if (!(w >= 0.0)) throw InvalidParameter("blur distribution weights must be >= 0");
      if (src.kind == KernelSource::Kind::bank && src.bank.size == 0) throw InvalidParameter("empty kernel bank");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidParameter("blur distribution weights must sum to 1");
  }

  /// Normalizes arbitrary non-negative weights to sum to one.
  static BlurDistribution weighted(std::vector<std::pair<KernelSource, double>> entries) {
    double total = 0.0;
    for (const auto& e : entries) total += e.second;
    if (!(total > 0.0)) throw InvalidParameter("blur distribution weights must have a positive sum");
    for (auto& e : entries) e.second /= total;
    BlurDistribution d{std::move(entries)};
    d.validate();
    return d;
  }

  Kernel sample(Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (const auto& [src, w] : entries) {
      acc += w;
      if (u < acc) return src.draw(rng);
    }
    return entries.back().first.draw(rng);
  }
};

struct TrainStage {
  int epochs = 1;
  double lr = 1e-3;
};

struct TrainSchedule {
  std::vector<TrainStage> stages;
  int batch_size = 32;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size < 1) throw InvalidParameter("batch size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidParameter("momentum must lie in [0,1)");
    for (const auto& s : stages) {
      if (s.epochs < 0) throw InvalidParameter("stage epochs must be >= 0");
      if (!(s.lr >= 0.0)) throw InvalidParameter("stage learning rate must be >= 0");
    }
  }

  int total_epochs() const {
    int n = 0;
    for (const auto& s : stages) n += s.epochs;
    return n;
  }
};

/// Training-time degradation. A net scale is drawn per example from
/// `net_scales` (scale jittering); a single entry fixes the scale.
struct TrainPipeline {
  std::vector<int> pre_scales{89, 96, 102};
  int canonical = 96;
  std::vector<int> net_scales{64};
  int crop = 56;
};

struct TrainResult {
  Network<float> model;
  std::vector<double> epoch_loss;  // mean training loss per epoch
};

using ProgressFn = std::function<void(int epoch, double loss)>;

inline constexpr int kShardSize = 8;

namespace detail {

/// Gradient of the mean loss over a batch held in `inputs` ([N][C][H][W]).
template <typename T>
double batch_gradient(const Network<T>& net, const std::vector<T>& inputs, TensorShape shape,
                      const std::vector<int>& labels, std::vector<T>& grad) {
  const int batch = static_cast<int>(labels.size());
  const int shards = (batch + kShardSize - 1) / kShardSize;
  std::vector<std::vector<T>> shard_grad(shards);
  std::vector<double> shard_loss(shards, 0.0);
  const double scale = 1.0 / batch;
  parallel_for(static_cast<std::size_t>(shards), [&](std::size_t s) {
    const int begin = static_cast<int>(s) * kShardSize;
    const int count = std::min(kShardSize, batch - begin);
    shard_grad[s].assign(net.param_count(), T(0));
    thread_local ForwardState<T> st;  // reused to keep large buffers allocated
    forward(net, std::span<const T>(inputs.data() + shape.size() * begin, shape.size() * count), count, shape, st);
    shard_loss[s] = backward(net, st, std::span<const int>(labels.data() + begin, count), scale,
                             std::span<T>(shard_grad[s]));
  });
  grad.assign(net.param_count(), T(0));
  double loss = 0.0;
  for (int s = 0; s < shards; ++s) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += shard_grad[s][i];
    loss += shard_loss[s];
  }
  return loss;
}

}  // namespace detail

/// The shared loop behind train() and finetune(): runs every stage of the
/// schedule starting from `net` as given (parameters and velocity).
inline TrainResult run_schedule(Network<float> net, const std::vector<LabeledImage>& data,
                                const BlurDistribution& dist, const TrainSchedule& schedule,
                                const TrainPipeline& pipeline, const ProgressFn& progress = {}) {
  schedule.validate();
  dist.validate();
  if (pipeline.net_scales.empty()) throw InvalidParameter("net_scales must be non-empty");
  const auto& arch = net.architecture();
  if (pipeline.crop != arch.input.height || pipeline.crop != arch.input.width)
    throw InvalidParameter("training crop must match the network input extents");
  for (const auto& ex : data)
    if (ex.label < 0 || ex.label >= net.num_classes()) throw InvalidParameter("label outside the model's classes");

  TrainResult result;
  const std::size_t n = data.size();
  int epoch = 0;
  for (const auto& stage : schedule.stages) {
    for (int e = 0; e < stage.epochs; ++e, ++epoch) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng(derive_seed(schedule.seed, {hash_label("shuffle"), static_cast<std::uint64_t>(epoch)}));
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < n; start += schedule.batch_size) {
        const std::size_t count = std::min<std::size_t>(schedule.batch_size, n - start);
        const TensorShape shape = arch.input;
        std::vector<float> inputs(shape.size() * count);
        std::vector<int> labels(count);
        parallel_for(count, [&](std::size_t j) {
          const std::size_t pos = start + j;
          Rng rng(derive_seed(schedule.seed, {hash_label("example"), static_cast<std::uint64_t>(epoch), pos}));
          const Kernel k = dist.sample(rng);
          TrainDegradeParams p{pipeline.pre_scales, pipeline.canonical,
                               pipeline.net_scales[rng.below(pipeline.net_scales.size())], pipeline.crop};
          const Image x = degrade_train(data[order[pos]].image, k, p, rng);
          if (x.channels != shape.channels) throw ShapeError("training image channels differ from the network input");
          image_to_tensor(x, inputs.data() + shape.size() * j);
          labels[j] = data[order[pos]].label;
        });
        std::vector<float> grad;
        const double loss = detail::batch_gradient(net, inputs, shape, labels, grad);
        if (!std::isfinite(loss)) throw TrainingDivergence("training loss became non-finite in epoch " + std::to_string(epoch));
        sgd_step(net, std::span<const float>(grad), stage.lr, schedule.momentum);
        epoch_loss += loss;
      }
      const double mean_loss = n ? epoch_loss / static_cast<double>(n) : 0.0;
      result.epoch_loss.push_back(mean_loss);
      if (progress) progress(epoch, mean_loss);
    }
  }
  result.model = std::move(net);
  return result;
}

/// Trains a freshly initialized model (weights seeded from schedule.seed).
inline TrainResult train(const Architecture& arch, const std::vector<LabeledImage>& data,
                         const BlurDistribution& dist, const TrainSchedule& schedule, const TrainPipeline& pipeline,
                         const ProgressFn& progress = {}) {
  return run_schedule(Network<float>::initialized(arch, schedule.seed), data, dist, schedule, pipeline, progress);
}

/// Continues from `model`'s weights with fresh momentum buffers.
inline TrainResult finetune(Network<float> model, const std::vector<LabeledImage>& data,
                            const BlurDistribution& dist, const TrainSchedule& schedule,
                            const TrainPipeline& pipeline, const ProgressFn& progress = {}) {
  model.reset_velocity();
  return run_schedule(std::move(model), data, dist, schedule, pipeline, progress);
}

/// Log-probabilities for a list of same-extent images, evaluated in shards.
template <typename T>
std::vector<std::vector<double>> predict_logprobs(const Network<T>& net, const std::vector<Image>& images) {
  std::vector<std::vector<double>> out(images.size());
  const std::size_t shards = (images.size() + kShardSize - 1) / kShardSize;
  parallel_for(shards, [&](std::size_t s) {
    const std::size_t begin = s * kShardSize;
    const std::size_t count = std::min<std::size_t>(kShardSize, images.size() - begin);
    const auto fo = forward_images(net, std::span<const Image>(images.data() + begin, count));
    for (std::size_t j = 0; j < count; ++j) out[begin + j] = softmax_logprobs(fo.logits[j]).logprobs;
  });
  return out;
}

}  // namespace blurlab
