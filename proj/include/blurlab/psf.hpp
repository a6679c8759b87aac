#pragma once

// Blur kernels (point-spread functions): disk (defocus), single-pixel-wide
// box (uniform linear motion), Gaussian, and camera-shake trajectories.
// Every constructor returns a non-negative, unit-sum kernel with odd extents
// so the center tap is well defined.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "blurlab/error.hpp"
#include "blurlab/rng.hpp"

namespace blurlab {

enum class KernelKind { disk, box_h, box_v, gaussian, camera_shake, delta };

inline const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::disk: return "disk";
    case KernelKind::box_h: return "box_h";
    case KernelKind::box_v: return "box_v";
    case KernelKind::gaussian: return "gaussian";
    case KernelKind::camera_shake: return "camera_shake";
    case KernelKind::delta: return "delta";
  }
  return "?";
}

inline KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "disk") return KernelKind::disk;
  if (s == "box_h") return KernelKind::box_h;
  if (s == "box_v") return KernelKind::box_v;
  if (s == "gaussian") return KernelKind::gaussian;
  if (s == "camera_shake") return KernelKind::camera_shake;
  if (s == "delta") return KernelKind::delta;
  throw ParseError("unknown kernel kind '" + s + "'");
}

struct Kernel {
  int height = 1;
  int width = 1;
  std::vector<double> weights{1.0};  // row-major
  KernelKind kind = KernelKind::delta;
  std::map<std::string, double> params;

  double at(int row, int col) const { return weights[static_cast<std::size_t>(row) * width + col]; }
  double& at(int row, int col) { return weights[static_cast<std::size_t>(row) * width + col]; }
  int center_row() const { return height / 2; }
  int center_col() const { return width / 2; }
  std::size_t area() const { return static_cast<std::size_t>(height) * width; }

  double sum() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }

  Kernel transposed() const {
    Kernel t = *this;
    t.height = width;
    t.width = height;
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) t.at(c, r) = at(r, c);
    return t;
  }

  Kernel rotated180() const {
    Kernel t = *this;
    std::reverse(t.weights.begin(), t.weights.end());
    return t;
  }

  int nonzero_count() const {
    int n = 0;
    for (double w : weights) n += w != 0.0;
    return n;
  }
};

/// Throws DegenerateKernel if the kernel breaks any structural invariant:
/// odd extents, matching weight count, finite non-negative weights, unit sum.
inline void check_kernel(const Kernel& k, double sum_tolerance = 1e-9) {
  if (k.height < 1 || k.width < 1 || k.height % 2 == 0 || k.width % 2 == 0)
    throw DegenerateKernel("kernel extents must be odd and positive, got " + std::to_string(k.height) +
                           "x" + std::to_string(k.width));
  if (k.weights.size() != static_cast<std::size_t>(k.height) * k.width)
    throw DegenerateKernel("kernel weight count does not match extents");
  for (double w : k.weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw DegenerateKernel("kernel weights must be finite and >= 0");
  if (std::abs(k.sum() - 1.0) > sum_tolerance) throw DegenerateKernel("kernel is not unit sum");
}

inline Kernel normalize(Kernel k) {
  const double total = k.sum();
  if (!(total > 0.0) || !std::isfinite(total)) throw DegenerateKernel("cannot normalize a kernel with non-positive sum");
  for (double& w : k.weights) w /= total;
  return k;
}

inline Kernel delta_kernel() {
  Kernel k;
  k.kind = KernelKind::delta;
  return k;
}

/// Defocus: constant inside the radius (pixel-center membership), zero
/// outside. The grid is the tight support, side 2*floor(radius)+1.
inline Kernel disk_kernel(double radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) throw InvalidParameter("disk radius must be positive");
  const int half = static_cast<int>(std::floor(radius));
  Kernel k;
  k.kind = KernelKind::disk;
  k.params["radius"] = radius;
  k.height = k.width = 2 * half + 1;
  k.weights.assign(k.area(), 0.0);
  const double r2 = radius * radius;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx)
      if (static_cast<double>(dy * dy + dx * dx) <= r2) k.at(dy + half, dx + half) = 1.0;
  return normalize(std::move(k));
}

enum class Orientation { horizontal, vertical };

/// Uniform linear motion of `length` pixels. Even lengths get one trailing
/// zero so the extent stays odd.
inline Kernel box_kernel(int length, Orientation orientation) {
  if (length < 1) throw InvalidParameter("box length must be >= 1");
  const int extent = length % 2 == 1 ? length : length + 1;
  Kernel k;
  k.kind = orientation == Orientation::horizontal ? KernelKind::box_h : KernelKind::box_v;
  k.params["length"] = length;
  k.height = 1;
  k.width = extent;
  k.weights.assign(extent, 0.0);
  for (int i = 0; i < length; ++i) k.weights[i] = 1.0 / length;
  if (orientation == Orientation::vertical) {
    Kernel t = k.transposed();
    t.kind = KernelKind::box_v;
    return t;
  }
  return k;
}

/// Gaussian truncated at 3 sigma, side 2*ceil(3 sigma)+1.
inline Kernel gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidParameter("gaussian sigma must be positive");
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  Kernel k;
  k.kind = KernelKind::gaussian;
  k.params["sigma"] = sigma;
  k.height = k.width = 2 * half + 1;
  k.weights.assign(k.area(), 0.0);
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx)
      k.at(dy + half, dx + half) = std::exp(-static_cast<double>(dy * dy + dx * dx) / (2.0 * sigma * sigma));
  return normalize(std::move(k));
}

namespace detail {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 catmull_rom(const Point2& p0, const Point2& p1, const Point2& p2, const Point2& p3, double t) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  auto blend = [&](double a, double b, double c, double d) {
    return 0.5 * ((2.0 * b) + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3);
  };
  return {blend(p0.x, p1.x, p2.x, p3.x), blend(p0.y, p1.y, p2.y, p3.y)};
}

struct WeightedSample {
  Point2 p;
  double w = 0.0;
};

inline void splat_bilinear(std::vector<double>& grid, int side, double x, double y, double w) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const int xs[2] = {x0, x0 + 1};
  const int ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      if (ys[a] < 0 || ys[a] >= side || xs[b] < 0 || xs[b] >= side) continue;
      grid[static_cast<std::size_t>(ys[a]) * side + xs[b]] += w * wy[a] * wx[b];
    }
}

}  // namespace detail

inline constexpr int kShakeGrid = 15;
inline constexpr int kShakeKernel = 17;
inline constexpr int kShakeControlPoints = 6;

/// Camera-shake kernel: a Catmull-Rom trajectory through six random control
/// points on a 15x15 square, with intensity varying linearly between the
/// control-point intensities, rasterized into 15x15 and re-rasterized into a
/// 17x17 grid with its center of mass on the center pixel.
inline Kernel camera_shake_kernel(std::uint64_t seed) {
  using detail::Point2;
  Rng rng(derive_seed(seed, {hash_label("camera-shake")}));
  std::array<Point2, kShakeControlPoints> ctrl{};
  std::array<double, kShakeControlPoints> intensity{};
  for (auto& p : ctrl) {
    p.x = rng.uniform(0.0, kShakeGrid);
    p.y = rng.uniform(0.0, kShakeGrid);
  }
  for (auto& v : intensity) v = rng.uniform(0.25, 1.0);

  // Endpoints are duplicated so the curve interpolates all control points.
  constexpr int segments = kShakeControlPoints - 1;
  auto point_at = [&](double u) {
    int s = std::min(static_cast<int>(std::floor(u)), segments - 1);
    const double t = u - s;
    const Point2& p0 = ctrl[std::max(s - 1, 0)];
    const Point2& p3 = ctrl[std::min(s + 2, kShakeControlPoints - 1)];
    return detail::catmull_rom(p0, ctrl[s], ctrl[s + 1], p3, t);
  };
  auto intensity_at = [&](double u) {
    int s = std::min(static_cast<int>(std::floor(u)), segments - 1);
    const double t = u - s;
    return intensity[s] * (1.0 - t) + intensity[s + 1] * t;
  };

  double arc_length = 0.0;
  {
    constexpr int dense = 256 * segments;
    Point2 prev = point_at(0.0);
    for (int i = 1; i <= dense; ++i) {
      const Point2 cur = point_at(static_cast<double>(segments) * i / dense);
      arc_length += std::hypot(cur.x - prev.x, cur.y - prev.y);
      prev = cur;
    }
  }
  const int count = std::max(64, static_cast<int>(std::ceil(20.0 * arc_length)));

  // Positions are in continuous [0,15) coordinates; pixel i covers [i, i+1),
  // so the splat position in index space is p - 0.5, clamped onto the grid.
  std::vector<detail::WeightedSample> samples(count);
  for (int i = 0; i < count; ++i) {
    const double u = count == 1 ? 0.0 : static_cast<double>(segments) * i / (count - 1);
    Point2 p = point_at(u);
    p.x = std::clamp(p.x - 0.5, 0.0, kShakeGrid - 1.0);
    p.y = std::clamp(p.y - 0.5, 0.0, kShakeGrid - 1.0);
    samples[i] = {p, intensity_at(u)};
  }

  std::vector<double> acc(kShakeGrid * kShakeGrid, 0.0);
  for (const auto& s : samples) detail::splat_bilinear(acc, kShakeGrid, s.p.x, s.p.y, s.w);

  // Translate the 15x15 raster into 17x17 so that its center of mass lands on
  // the center pixel. Resampling is done by bilinear splatting of each source
  // pixel; mass clipped at the border moves the centroid, so the residual
  // offset is re-applied a few times.
  const double center = kShakeKernel / 2;
  auto render = [&](double ox, double oy) {
    std::vector<double> out(kShakeKernel * kShakeKernel, 0.0);
    for (int r = 0; r < kShakeGrid; ++r)
      for (int c = 0; c < kShakeGrid; ++c) {
        const double w = acc[static_cast<std::size_t>(r) * kShakeGrid + c];
        if (w != 0.0) detail::splat_bilinear(out, kShakeKernel, c + ox, r + oy, w);
      }
    return out;
  };
  auto centroid = [&](const std::vector<double>& g) {
    double m = 0.0, cx = 0.0, cy = 0.0;
    for (int r = 0; r < kShakeKernel; ++r)
      for (int c = 0; c < kShakeKernel; ++c) {
        const double w = g[static_cast<std::size_t>(r) * kShakeKernel + c];
        m += w;
        cx += w * c;
        cy += w * r;
      }
    return detail::Point2{cx / m, cy / m};
  };

  double ox = 1.0, oy = 1.0;
  {
    double m = 0.0, cx = 0.0, cy = 0.0;
    for (int r = 0; r < kShakeGrid; ++r)
      for (int c = 0; c < kShakeGrid; ++c) {
        const double w = acc[static_cast<std::size_t>(r) * kShakeGrid + c];
        m += w;
        cx += w * c;
        cy += w * r;
      }
    ox = center - cx / m;
    oy = center - cy / m;
  }
  std::vector<double> grid = render(ox, oy);
  for (int iter = 0; iter < 8; ++iter) {
    const auto com = centroid(grid);
    const double ex = center - com.x;
    const double ey = center - com.y;
    if (std::abs(ex) < 1e-3 && std::abs(ey) < 1e-3) break;
    ox += ex;
    oy += ey;
    grid = render(ox, oy);
  }

  Kernel k;
  k.kind = KernelKind::camera_shake;
  k.params["seed"] = static_cast<double>(seed);
  k.height = k.width = kShakeKernel;
  k.weights = std::move(grid);
  for (double& w : k.weights) w = std::max(w, 0.0);
  return normalize(std::move(k));
}

/// Writes the PSF1 text format:
///   PSF1 <height> <width> <kind>
///   params k=v k=v ...
///   <height rows of width floats>
inline void save_kernel(const Kernel& k, std::ostream& os) {
  os << "PSF1 " << k.height << ' ' << k.width << ' ' << to_string(k.kind) << '\n';
  os << "params";
  os << std::setprecision(17);
  for (const auto& [key, value] : k.params) os << ' ' << key << '=' << value;
  os << '\n';
  for (int r = 0; r < k.height; ++r) {
    for (int c = 0; c < k.width; ++c) os << (c ? " " : "") << k.at(r, c);
    os << '\n';
  }
}

inline void save_kernel(const Kernel& k, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_kernel(k, os);
  if (!os) throw Error("failed writing '" + path + "'");
}

inline Kernel load_kernel(std::istream& is, const std::string& name = "<stream>") {
  auto fail = [&](int line, const std::string& what) -> ParseError {
    return ParseError(name + ":" + std::to_string(line) + ": " + what);
  };
  std::string line;
  if (!std::getline(is, line)) throw fail(1, "missing PSF1 header");
  std::istringstream header(line);
  std::string magic, kind;
  Kernel k;
  if (!(header >> magic >> k.height >> k.width >> kind) || magic != "PSF1")
    throw fail(1, "expected 'PSF1 <height> <width> <kind>'");
  if (k.height < 1 || k.width < 1 || k.height > 4096 || k.width > 4096) throw fail(1, "bad kernel extents");
  try {
    k.kind = kernel_kind_from_string(kind);
  } catch (const ParseError& e) {
    throw fail(1, e.what());
  }
  if (!std::getline(is, line)) throw fail(2, "missing params line");
  std::istringstream params(line);
  std::string tok;
  if (!(params >> tok) || tok != "params") throw fail(2, "expected 'params'");
  while (params >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw fail(2, "bad param '" + tok + "'");
    try {
      k.params[tok.substr(0, eq)] = std::stod(tok.substr(eq + 1));
    } catch (const std::exception&) {
      throw fail(2, "bad param value '" + tok + "'");
    }
  }
  k.weights.assign(static_cast<std::size_t>(k.height) * k.width, 0.0);
  for (int r = 0; r < k.height; ++r) {
    if (!std::getline(is, line)) throw fail(3 + r, "truncated kernel, expected " + std::to_string(k.height) + " rows");
    std::istringstream row(line);
    for (int c = 0; c < k.width; ++c)
      if (!(row >> k.at(r, c))) throw fail(3 + r, "expected " + std::to_string(k.width) + " values");
  }
  try {
    check_kernel(k, 1e-6);
  } catch (const DegenerateKernel& e) {
    throw ParseError(name + ": " + e.what());
  }
  return k;
}

inline Kernel load_kernel(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path + "'");
  return load_kernel(is, path);
}

}  // namespace blurlab
