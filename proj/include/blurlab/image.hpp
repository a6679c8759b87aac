#pragma once

// Floating-point raster in [0,1] plus binary PGM (P5) / PPM (P6) I/O.
// 8-bit code c maps to c/255 in both directions.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "blurlab/error.hpp"

namespace blurlab {

struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> values;  // row-major, channel-interleaved

  Image() = default;
  Image(int h, int w, int c = 1, double fill = 0.0)
      : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 1 || w < 1 || (c != 1 && c != 3)) throw InvalidParameter("image extents must be positive, channels 1 or 3");
  }

  double at(int y, int x, int ch = 0) const { return values[(static_cast<std::size_t>(y) * width + x) * channels + ch]; }
  double& at(int y, int x, int ch = 0) { return values[(static_cast<std::size_t>(y) * width + x) * channels + ch]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void check_image(const Image& img) {
  if (img.height < 1 || img.width < 1 || (img.channels != 1 && img.channels != 3))
    throw InvalidParameter("invalid image extents");
  if (img.values.size() != img.pixel_count() * img.channels) throw InvalidParameter("image value count mismatch");
  for (double v : img.values)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidParameter("image values must lie in [0,1]");
}

inline Image clamp01(Image img) {
  for (double& v : img.values) v = std::clamp(v, 0.0, 1.0);
  return img;
}

inline std::uint8_t to_code(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

/// Crops a `size`x`size` window with top-left corner (top, left).
inline Image crop(const Image& img, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > img.height || left + width > img.width)
    throw InvalidParameter("crop window outside image");
  Image out(height, width, img.channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

inline Image center_crop(const Image& img, int size) {
  if (size > img.height || size > img.width) throw InvalidParameter("crop larger than image");
  return crop(img, (img.height - size) / 2, (img.width - size) / 2, size, size);
}

namespace detail {

// Reads the next header token of a PNM file, skipping '#' comments.
inline bool pnm_token(std::istream& is, std::string& tok) {
  tok.clear();
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return true;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return !tok.empty();
}

}  // namespace detail

/// Reads P5 or P6 with maxval 255. 8-bit only.
inline Image read_pnm(std::istream& is, const std::string& name = "<stream>") {
  std::string magic, w, h, maxval;
  if (!detail::pnm_token(is, magic) || (magic != "P5" && magic != "P6"))
    throw ParseError(name + ": not a binary PGM/PPM file");
  if (!detail::pnm_token(is, w) || !detail::pnm_token(is, h) || !detail::pnm_token(is, maxval))
    throw ParseError(name + ": truncated PNM header");
  int width = 0, height = 0, mv = 0;
  try {
    width = std::stoi(w);
    height = std::stoi(h);
    mv = std::stoi(maxval);
  } catch (const std::exception&) {
    throw ParseError(name + ": malformed PNM header");
  }
  if (width < 1 || height < 1 || width > 1 << 15 || height > 1 << 15) throw ParseError(name + ": bad PNM extents");
  if (mv != 255) throw ParseError(name + ": only maxval 255 is supported");
  const int channels = magic == "P6" ? 3 : 1;
  Image img(height, width, channels);
  std::vector<unsigned char> buf(img.values.size());
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw ParseError(name + ": truncated PNM pixel data");
  for (std::size_t i = 0; i < buf.size(); ++i) img.values[i] = buf[i] / 255.0;
  return img;
}

inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  return read_pnm(is, path);
}

inline void write_pnm(const Image& img, std::ostream& os) {
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.values.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_code(img.values[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void write_pnm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_pnm(img, os);
  if (!os) throw Error("failed writing '" + path + "'");
}

/// Integer label grid (segmentation masks), row-major.
struct LabelGrid {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelGrid() = default;
  LabelGrid(int h, int w, int fill = 0) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

/// Nearest-neighbour resampling with the same pixel-center convention as
/// the bilinear image resize.
inline LabelGrid resize_nearest(const LabelGrid& g, int height, int width) {
  if (height < 1 || width < 1) throw InvalidParameter("resize target must be >= 1");
  LabelGrid out(height, width);
  const double sy = static_cast<double>(g.height) / height;
  const double sx = static_cast<double>(g.width) / width;
  for (int y = 0; y < height; ++y) {
    const int iy = std::clamp(static_cast<int>(std::floor((y + 0.5) * sy)), 0, g.height - 1);
    for (int x = 0; x < width; ++x) {
      const int ix = std::clamp(static_cast<int>(std::floor((x + 0.5) * sx)), 0, g.width - 1);
      out.at(y, x) = g.at(iy, ix);
    }
  }
  return out;
}

inline Image labels_to_image(const LabelGrid& g) {
  Image img(g.height, g.width, 1);
  for (std::size_t i = 0; i < g.labels.size(); ++i) img.values[i] = std::clamp(g.labels[i], 0, 255) / 255.0;
  return img;
}

inline LabelGrid image_to_labels(const Image& img) {
  if (img.channels != 1) throw ParseError("mask image must be single-channel");
  LabelGrid g(img.height, img.width);
  for (std::size_t i = 0; i < g.labels.size(); ++i) g.labels[i] = to_code(img.values[i]);
  return g;
}

}  // namespace blurlab
