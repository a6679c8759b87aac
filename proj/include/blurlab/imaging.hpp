#pragma once

// Resampling, convolution, 8-bit quantization and the two blur pipelines:
// the evaluation path (resize to a canonical frame, blur, quantize, resize
// to the network scale) and the training path (random pre-blur scale around
// the canonical frame, blur, quantize, rescale by net/canonical, random crop).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "blurlab/error.hpp"
#include "blurlab/image.hpp"
#include "blurlab/psf.hpp"
#include "blurlab/rng.hpp"

namespace blurlab {

enum class ScaleMode { min_side, geometric_mean };

struct ScalePolicy {
  ScaleMode mode = ScaleMode::min_side;
  int target = 64;
};

/// Bilinear resize to explicit extents. Pixel centers are aligned
/// (src = (dst + 0.5) * in/out - 0.5) and edges are clamped.
inline Image resize_to(const Image& img, int height, int width) {
  if (height < 1 || width < 1) throw InvalidParameter("resize target must be >= 1");
  if (height == img.height && width == img.width) return img;
  Image out(height, width, img.channels);
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  std::vector<int> x0(width), x1(width);
  std::vector<double> fx(width);
  for (int x = 0; x < width; ++x) {
    const double src = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
    x0[x] = static_cast<int>(std::floor(src));
    x1[x] = std::min(x0[x] + 1, img.width - 1);
    fx[x] = src - x0[x];
  }
  for (int y = 0; y < height; ++y) {
    const double src = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(std::floor(src));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fy = src - y0;
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(y0, x0[x], c) * (1.0 - fx[x]) + img.at(y0, x1[x], c) * fx[x];
        const double bot = img.at(y1, x0[x], c) * (1.0 - fx[x]) + img.at(y1, x1[x], c) * fx[x];
        out.at(y, x, c) = std::clamp(top * (1.0 - fy) + bot * fy, 0.0, 1.0);
      }
  }
  return out;
}

struct Extents {
  int height = 0;
  int width = 0;
};

inline Extents scaled_extents(int height, int width, ScalePolicy policy) {
  if (policy.target < 1) throw InvalidParameter("scale target must be >= 1");
  if (policy.mode == ScaleMode::min_side) {
    const double s = static_cast<double>(policy.target) / std::min(height, width);
    if (height <= width) return {policy.target, std::max(1, static_cast<int>(std::lround(width * s)))};
    return {std::max(1, static_cast<int>(std::lround(height * s))), policy.target};
  }
  const double s = policy.target / std::sqrt(static_cast<double>(height) * width);
  return {std::max(1, static_cast<int>(std::lround(height * s))), std::max(1, static_cast<int>(std::lround(width * s)))};
}

inline Image resize(const Image& img, ScalePolicy policy) {
  const auto e = scaled_extents(img.height, img.width, policy);
  return resize_to(img, e.height, e.width);
}

/// Resize by a multiplicative factor, rounding each extent.
inline Image rescale(const Image& img, double factor) {
  if (!(factor > 0.0)) throw InvalidParameter("rescale factor must be positive");
  return resize_to(img, std::max(1, static_cast<int>(std::lround(img.height * factor))),
                   std::max(1, static_cast<int>(std::lround(img.width * factor))));
}

enum class ConvMethod { direct, fft, automatic };

namespace detail {

// Half-sample symmetric extension: ... b a | a b c ... c | c b ...
inline int mirror(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline bool smooth235(int n) {
  for (int p : {2, 3, 5})
    while (n % p == 0) n /= p;
  return n == 1;
}

inline int fft_length(int n) {
  while (!smooth235(n)) ++n;
  return n;
}

using Cplx = std::complex<double>;

// In-place 2-D transform of a row-major rows x cols buffer. Length-1 passes
// are the identity and are skipped (kissfft cannot plan them).
inline void fft2(Eigen::FFT<double>& fft, std::vector<Cplx>& buf, int rows, int cols, bool inverse) {
  std::vector<Cplx> in(std::max(rows, cols)), out;
  in.resize(cols);
  for (int r = 0; r < rows && cols > 1; ++r) {
    std::copy_n(buf.begin() + static_cast<std::ptrdiff_t>(r) * cols, cols, in.begin());
    if (inverse) fft.inv(out, in); else fft.fwd(out, in);
    std::copy_n(out.begin(), cols, buf.begin() + static_cast<std::ptrdiff_t>(r) * cols);
  }
  in.resize(rows);
  for (int c = 0; c < cols && rows > 1; ++c) {
    for (int r = 0; r < rows; ++r) in[r] = buf[static_cast<std::size_t>(r) * cols + c];
    if (inverse) fft.inv(out, in); else fft.fwd(out, in);
    for (int r = 0; r < rows; ++r) buf[static_cast<std::size_t>(r) * cols + c] = out[r];
  }
}

inline Image convolve_direct(const Image& img, const Kernel& k) {
  Image out(img.height, img.width, img.channels);
  const int cy = k.center_row();
  const int cx = k.center_col();
  std::vector<int> xs(static_cast<std::size_t>(img.width) * k.width);
  for (int x = 0; x < img.width; ++x)
    for (int j = 0; j < k.width; ++j) xs[static_cast<std::size_t>(x) * k.width + j] = mirror(x - (j - cx), img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int i = 0; i < k.height; ++i) {
          const int sy = mirror(y - (i - cy), img.height);
          for (int j = 0; j < k.width; ++j) {
            const double w = k.at(i, j);
            if (w != 0.0) acc += w * img.at(sy, xs[static_cast<std::size_t>(x) * k.width + j], c);
          }
        }
        out.at(y, x, c) = acc;
      }
  return out;
}

inline Image convolve_fft(const Image& img, const Kernel& k) {
  const int cy = k.center_row();
  const int cx = k.center_col();
  const int ph = img.height + k.height - 1;
  const int pw = img.width + k.width - 1;
  const int fh = fft_length(ph + k.height - 1);
  const int fw = fft_length(pw + k.width - 1);
  Eigen::FFT<double> fft;

  std::vector<Cplx> kf(static_cast<std::size_t>(fh) * fw, Cplx{});
  for (int i = 0; i < k.height; ++i)
    for (int j = 0; j < k.width; ++j) kf[static_cast<std::size_t>(i) * fw + j] = k.at(i, j);
  fft2(fft, kf, fh, fw, false);

  Image out(img.height, img.width, img.channels);
  std::vector<Cplx> buf(kf.size());
  for (int c = 0; c < img.channels; ++c) {
    std::fill(buf.begin(), buf.end(), Cplx{});
    for (int a = 0; a < ph; ++a) {
      const int sy = mirror(a - cy, img.height);
      for (int b = 0; b < pw; ++b) buf[static_cast<std::size_t>(a) * fw + b] = img.at(sy, mirror(b - cx, img.width), c);
    }
    fft2(fft, buf, fh, fw, false);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] *= kf[i];
    fft2(fft, buf, fh, fw, true);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        out.at(y, x, c) = buf[static_cast<std::size_t>(y + 2 * cy) * fw + (x + 2 * cx)].real();
  }
  return out;
}

}  // namespace detail

inline constexpr std::size_t kFftAreaThreshold = 49;

/// Per-channel 2-D convolution with symmetric boundary extension; output has
/// the input's extents. Values are not clamped.
inline Image convolve(const Image& img, const Kernel& k, ConvMethod method = ConvMethod::automatic) {
  check_kernel(k, 1e-6);
  if (k.height > 2 * img.height || k.width > 2 * img.width)
    throw InvalidParameter("kernel larger than twice the image extent");
  if (method == ConvMethod::automatic) method = k.area() > kFftAreaThreshold ? ConvMethod::fft : ConvMethod::direct;
  return method == ConvMethod::fft ? detail::convolve_fft(img, k) : detail::convolve_direct(img, k);
}

/// round(v * 255) / 255 with round-half-up, clamped to [0,1].
inline Image quantize8(Image img) {
  for (double& v : img.values) v = to_code(v) / 255.0;
  return img;
}

/// Evaluation pipeline: resize to the canonical blur frame, convolve,
/// quantize to 8 bits, resize to the network scale.
inline Image degrade_eval(const Image& img, const Kernel& k, int canonical, int net_scale,
                          ScaleMode mode = ScaleMode::min_side) {
  if (canonical < 1 || net_scale < 1) throw InvalidParameter("canonical and net scale must be >= 1");
  Image x = resize(img, {mode, canonical});
  x = quantize8(convolve(x, k));
  return resize(x, {mode, net_scale});
}

struct TrainDegradeParams {
  std::vector<int> pre_scales{96};
  int canonical = 96;
  int net_scale = 64;
  int crop = 56;
};

/// Training pipeline. Object scale varies through the pre-blur resize while
/// the effective kernel size at the network input stays kernel * net/canonical.
inline Image degrade_train(const Image& img, const Kernel& k, const TrainDegradeParams& p, Rng& rng) {
  if (p.pre_scales.empty()) throw InvalidParameter("pre_scales must be non-empty");
  if (p.canonical < 1 || p.net_scale < 1 || p.crop < 1) throw InvalidParameter("scales and crop must be >= 1");
  const int s = p.pre_scales[rng.below(p.pre_scales.size())];
  Image x = resize(img, {ScaleMode::min_side, s});
  x = quantize8(convolve(x, k));
  x = rescale(x, static_cast<double>(p.net_scale) / p.canonical);
  if (p.crop > x.height || p.crop > x.width) throw InvalidParameter("crop larger than the rescaled image");
  const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.height - p.crop + 1)));
  const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.width - p.crop + 1)));
  return crop(x, top, left, p.crop, p.crop);
}

/// Knuth multiplicative hash into a kernel bank; stable across platforms.
inline std::size_t assign_kernel(std::uint64_t item_id, std::size_t bank_size) {
  if (bank_size == 0) throw InvalidParameter("bank size must be >= 1");
  const std::uint32_t h = static_cast<std::uint32_t>(item_id * 2654435761ULL);
  return static_cast<std::size_t>(h % bank_size);
}

/// Sum of |discrete 4-neighbour Laplacian| over interior pixels.
inline double laplacian_energy(const Image& img) {
  double e = 0.0;
  for (int y = 1; y + 1 < img.height; ++y)
    for (int x = 1; x + 1 < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        e += std::abs(4.0 * img.at(y, x, c) - img.at(y - 1, x, c) - img.at(y + 1, x, c) - img.at(y, x - 1, c) -
                      img.at(y, x + 1, c));
  return e;
}

}  // namespace blurlab
