#pragma once

// Classification and segmentation metrics, binarized-activation invariance
// maps, and CSV output helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "blurlab/distribution.hpp"
#include "blurlab/error.hpp"
#include "blurlab/image.hpp"
#include "blurlab/imaging.hpp"
#include "blurlab/net.hpp"

namespace blurlab {

/// Fraction of examples whose label is among the k most probable classes.
/// Ties rank the lower class index first.
inline double topk_accuracy(std::span<const ClassDistribution> preds, std::span<const int> labels, int k) {
  if (preds.size() != labels.size()) throw InvalidParameter("predictions and labels differ in length");
  if (preds.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i].probs;
    if (k < 1 || static_cast<std::size_t>(k) > p.size()) throw InvalidParameter("k must lie in [1, K]");
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= p.size()) throw InvalidParameter("label out of range");
    // Rank of y = number of classes that sort strictly before it.
    int rank = 0;
    for (int c = 0; c < static_cast<int>(p.size()); ++c)
      if (p[c] > p[y] || (p[c] == p[y] && c < y)) ++rank;
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

inline double entropy(const ClassDistribution& d) {
  double h = 0.0;
  for (double p : d.probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

/// Mean entropy in nats.
inline double mean_entropy(std::span<const ClassDistribution> preds) {
  if (preds.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : preds) s += entropy(d);
  return s / static_cast<double>(preds.size());
}

/// Mean of -ln p(true label), with p floored at 1e-12.
inline double mean_true_cross_entropy(std::span<const ClassDistribution> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw InvalidParameter("predictions and labels differ in length");
  if (preds.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= preds[i].size())
      throw InvalidParameter("label out of range");
    s -= std::log(std::max(preds[i][labels[i]], 1e-12));
  }
  return s / static_cast<double>(preds.size());
}

/// Bits of a CHW activation: 1 iff the value is positive.
inline std::vector<std::uint8_t> binarize_activations(std::span<const float> activation) {
  std::vector<std::uint8_t> bits(activation.size());
  for (std::size_t i = 0; i < activation.size(); ++i) bits[i] = activation[i] > 0.0f ? 1 : 0;
  return bits;
}

struct InvarianceMap {
  std::vector<std::string> tap_names;
  std::vector<Image> raw;      // per tap, at the tap's own resolution
  std::vector<Image> resized;  // per tap, at the largest tap's resolution
  std::vector<double> tap_means;
};

/// Per-location normalized Hamming distance between the binarized taps of
/// a sharp and a blurred image.
template <typename T>
InvarianceMap hamming_invariance_map(const Network<T>& net, const Image& sharp, const Image& blurred) {
  if (sharp.height != blurred.height || sharp.width != blurred.width || sharp.channels != blurred.channels)
    throw ShapeError("sharp and blurred images differ in extents");
  const auto a = forward_taps(net, sharp);
  const auto b = forward_taps(net, blurred);
  InvarianceMap m;
  int big_h = 0, big_w = 0;
  for (std::size_t t = 0; t < a.taps.size(); ++t) {
    const TensorShape ts = a.tap_shapes[t];
    const auto ba = binarize_activations(a.taps[t][0]);
    const auto bb = binarize_activations(b.taps[t][0]);
    const std::size_t plane = static_cast<std::size_t>(ts.height) * ts.width;
    Image map(ts.height, ts.width, 1);
    double sum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      int diff = 0;
      for (int c = 0; c < ts.channels; ++c) diff += ba[plane * c + p] != bb[plane * c + p];
      map.values[p] = static_cast<double>(diff) / ts.channels;
      sum += map.values[p];
    }
    m.tap_names.push_back("P" + std::to_string(t + 1));
    m.tap_means.push_back(sum / static_cast<double>(plane));
    m.raw.push_back(std::move(map));
    if (static_cast<long>(ts.height) * ts.width > static_cast<long>(big_h) * big_w) {
      big_h = ts.height;
      big_w = ts.width;
    }
  }
  for (const auto& r : m.raw) m.resized.push_back(clamp01(resize_to(r, big_h, big_w)));
  return m;
}

/// Pixel confusion counts accumulated over a whole dataset.
class SegConfusion {
 public:
  explicit SegConfusion(int classes) : k_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
    if (classes < 1) throw InvalidParameter("need at least one class");
  }

  /// Adds every pixel, or only pixels where `band` is non-zero.
  void add(const LabelGrid& pred, const LabelGrid& gt, const std::vector<std::uint8_t>* band = nullptr) {
    if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("prediction and ground truth differ in extents");
    if (band && band->size() != gt.labels.size()) throw ShapeError("band mask differs in extents");
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      if (band && !(*band)[i]) continue;
      const int p = pred.labels[i], g = gt.labels[i];
      if (p < 0 || p >= k_ || g < 0 || g >= k_) throw InvalidParameter("mask label out of range");
      ++counts_[static_cast<std::size_t>(g) * k_ + p];
      ++total_;
    }
  }

  std::uint64_t pixels() const { return total_; }

  /// Mean IoU over classes with a non-empty union; nullopt when no pixel was added.
  std::optional<double> miou() const {
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < k_; ++c) {
      std::uint64_t row = 0, col = 0;
      for (int j = 0; j < k_; ++j) {
        row += counts_[static_cast<std::size_t>(c) * k_ + j];
        col += counts_[static_cast<std::size_t>(j) * k_ + c];
      }
      const std::uint64_t inter = counts_[static_cast<std::size_t>(c) * k_ + c];
      const std::uint64_t uni = row + col - inter;
      if (uni == 0) continue;
      sum += static_cast<double>(inter) / static_cast<double>(uni);
      ++present;
    }
    if (present == 0) return std::nullopt;
    return sum / present;
  }

 private:
  int k_;
  std::vector<std::uint64_t> counts_;  // [gt][pred]
  std::uint64_t total_ = 0;
};

inline double miou(std::span<const LabelGrid> preds, std::span<const LabelGrid> gts, int classes) {
  if (preds.size() != gts.size()) throw InvalidParameter("mask lists differ in length");
  SegConfusion conf(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) conf.add(preds[i], gts[i]);
  return conf.miou().value_or(0.0);
}

namespace detail {

/// 1-D squared distance transform (lower envelope of parabolas).
/// Missing sites carry a large finite value rather than infinity.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  d.resize(n);
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = double(q - v[k]) * (q - v[k]) + f[v[k]];
  }
}

inline constexpr double kNoSite = 1e20;

}  // namespace detail

/// Exact squared Euclidean distance to the nearest non-zero site (two
/// separable passes). Pixels with no site anywhere get +inf.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, int height, int width) {
  const double inf = std::numeric_limits<double>::infinity();
  const double none = detail::kNoSite;
  std::vector<double> g(sites.size());
  std::vector<double> f, d;
  for (int x = 0; x < width; ++x) {
    f.assign(height, none);
    for (int y = 0; y < height; ++y)
      if (sites[static_cast<std::size_t>(y) * width + x]) f[y] = 0.0;
    detail::edt_1d(f, d);
    for (int y = 0; y < height; ++y) g[static_cast<std::size_t>(y) * width + x] = d[y];
  }
  std::vector<double> out(sites.size());
  for (int y = 0; y < height; ++y) {
    f.assign(g.begin() + static_cast<std::ptrdiff_t>(y) * width, g.begin() + static_cast<std::ptrdiff_t>(y + 1) * width);
    detail::edt_1d(f, d);
    for (int x = 0; x < width; ++x) out[static_cast<std::size_t>(y) * width + x] = d[x] >= none / 2 ? inf : d[x];
  }
  return out;
}

/// Pixels having a 4-neighbour of a different class.
inline std::vector<std::uint8_t> boundary_pixels(const LabelGrid& gt) {
  std::vector<std::uint8_t> b(gt.labels.size(), 0);
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const int c = gt.at(y, x);
      if ((y > 0 && gt.at(y - 1, x) != c) || (y + 1 < gt.height && gt.at(y + 1, x) != c) ||
          (x > 0 && gt.at(y, x - 1) != c) || (x + 1 < gt.width && gt.at(y, x + 1) != c))
        b[static_cast<std::size_t>(y) * gt.width + x] = 1;
    }
  return b;
}

/// Pixels within Euclidean distance `distance` of a boundary pixel.
inline std::vector<std::uint8_t> boundary_band(const LabelGrid& gt, double distance) {
  if (!(distance >= 0.0)) throw InvalidParameter("band distance must be >= 0");
  const auto b = boundary_pixels(gt);
  const auto d2 = squared_distance_transform(b, gt.height, gt.width);
  std::vector<std::uint8_t> band(b.size(), 0);
  const double lim = distance * distance;
  for (std::size_t i = 0; i < b.size(); ++i) band[i] = d2[i] <= lim ? 1 : 0;
  return band;
}

/// mIoU restricted to the boundary band of each ground-truth mask;
/// nullopt when no mask has a boundary.
inline std::optional<double> boundary_miou(std::span<const LabelGrid> preds, std::span<const LabelGrid> gts, int classes,
                                           double distance = 4.0) {
  if (preds.size() != gts.size()) throw InvalidParameter("mask lists differ in length");
  SegConfusion conf(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto band = boundary_band(gts[i], distance);
    conf.add(preds[i], gts[i], &band);
  }
  if (conf.pixels() == 0) return std::nullopt;
  return conf.miou();
}

/// RFC 4180 field quoting.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline void write_csv_row(std::ostream& os, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) os << ',';
    os << csv_field(fields[i]);
  }
  os << '\n';
}

/// Fixed-precision number formatting for report cells.
inline std::string format_value(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace blurlab
