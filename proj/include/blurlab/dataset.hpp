#pragma once

// Procedural datasets.
//
// ShapesTex: 10 classes = {circle, triangle, square, star, annulus} x
// {smooth fill, stripes}. The two textures of a shape share geometry and
// mean intensity, so the pair can only be told apart by high-frequency
// detail -- exactly what blur removes.
//
// ShapeSeg: 1-3 non-overlapping objects from 5 foreground classes (one per
// shape) on a background of class 0; the mask is the same pixel-center
// membership test used to render the image.
//
// Every example is a pure function of (seed, split, index). Images are
// emitted 8-bit quantized so the PGM container round-trips them exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "blurlab/error.hpp"
#include "blurlab/image.hpp"
#include "blurlab/imaging.hpp"
#include "blurlab/parallel.hpp"
#include "blurlab/rng.hpp"

namespace blurlab {

struct LabeledImage {
  Image image;
  int label = 0;

  friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

struct SegExample {
  Image image;
  LabelGrid mask;

  friend bool operator==(const SegExample&, const SegExample&) = default;
};

struct DatasetSpec {
  int num_classes = 10;
  int train_count = 1000;
  int val_count = 200;
  int render_size = 96;
  std::uint64_t seed = 1;
};

enum class Split : std::uint64_t { train = 1, val = 2 };

enum class Shape { circle = 0, triangle, square, star, annulus };
inline constexpr int kShapeCount = 5;
inline constexpr int kShapesTexClasses = 10;
inline constexpr int kShapeSegClasses = 6;  // background + one per shape

inline const char* shape_name(Shape s) {
  static constexpr const char* names[] = {"circle", "triangle", "square", "star", "annulus"};
  return names[static_cast<int>(s)];
}

/// Rendering constants, in pixels of the canonical render frame unless noted.
struct RenderStyle {
  double object_radius = 0.22;     // fraction of the frame, ShapesTex
  double seg_object_radius = 0.28;  // fraction of the short side, ShapeSeg
  double scale_jitter = 0.20;
  double position_jitter = 0.15;  // fraction of the frame
  double min_separation = 0.2;    // foreground vs background gray
  double stripe_period_min = 5.0;
  double stripe_period_max = 10.0;
  double stripe_contrast_min = 0.25;
  double stripe_contrast_max = 0.5;
  double noise_amplitude = 0.05;
};

namespace detail {

struct Placement {
  double cx = 0.0, cy = 0.0, radius = 1.0, angle = 0.0;
};

struct Texture {
  bool striped = false;
  double fg = 0.5;
  double contrast = 0.0;
  double period = 6.0;
  double stripe_angle = 0.0;
  double phase = 0.0;
};

inline bool inside_polygon(double u, double v, const double* xs, const double* ys, int n) {
  bool in = false;
  for (int i = 0, j = n - 1; i < n; j = i++) {
    if ((ys[i] > v) != (ys[j] > v) && u < (xs[j] - xs[i]) * (v - ys[i]) / (ys[j] - ys[i]) + xs[i]) in = !in;
  }
  return in;
}

/// Membership in the unit-radius shape, in object-local coordinates.
inline bool inside_shape(Shape shape, double u, double v) {
  constexpr double pi = std::numbers::pi;
  const double r2 = u * u + v * v;
  switch (shape) {
    case Shape::circle:
      return r2 <= 1.0;
    case Shape::annulus:
      return r2 <= 1.0 && r2 >= 0.5 * 0.5;
    case Shape::triangle:
    case Shape::square: {
      const int n = shape == Shape::triangle ? 3 : 4;
      double xs[4], ys[4];
      for (int i = 0; i < n; ++i) {
        const double a = 2.0 * pi * i / n + pi / 2.0;
        xs[i] = std::cos(a);
        ys[i] = std::sin(a);
      }
      return inside_polygon(u, v, xs, ys, n);
    }
    case Shape::star: {
      double xs[10], ys[10];
      for (int i = 0; i < 10; ++i) {
        const double a = pi * i / 5.0 + pi / 2.0;
        const double r = i % 2 == 0 ? 1.0 : 0.45;
        xs[i] = r * std::cos(a);
        ys[i] = r * std::sin(a);
      }
      return inside_polygon(u, v, xs, ys, 10);
    }
  }
  return false;
}

inline bool covers(Shape shape, const Placement& p, double px, double py) {
  const double dx = px - p.cx;
  const double dy = py - p.cy;
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  const double u = (c * dx + s * dy) / p.radius;
  const double v = (-s * dx + c * dy) / p.radius;
  return inside_shape(shape, u, v);
}

inline double texture_value(const Texture& t, double px, double py) {
  if (!t.striped) return t.fg;
  const double along = px * std::cos(t.stripe_angle) + py * std::sin(t.stripe_angle) + t.phase;
  const double frac = along / t.period - std::floor(along / t.period);
  return t.fg + (frac < 0.5 ? 0.5 : -0.5) * t.contrast;
}

inline std::pair<double, double> gray_pair(Rng& rng, double separation) {
  const double bg = rng.uniform(0.1, 0.9);
  double fg;
  do {
    fg = rng.uniform(0.1, 0.9);
  } while (std::abs(fg - bg) < separation);
  return {bg, fg};
}

inline Texture draw_texture(Rng& rng, bool striped, double fg, const RenderStyle& style) {
  Texture t;
  t.striped = striped;
  t.fg = fg;
  t.period = rng.uniform(style.stripe_period_min, style.stripe_period_max);
  t.contrast = rng.uniform(style.stripe_contrast_min, style.stripe_contrast_max);
  t.stripe_angle = rng.uniform(0.0, std::numbers::pi);
  t.phase = rng.uniform(0.0, t.period);
  // Keep both stripe levels inside [0,1] so the object mean stays fg.
  const double room = 2.0 * std::min(fg, 1.0 - fg);
  t.contrast = std::min(t.contrast, room);
  return t;
}

inline void add_noise_and_quantize(Image& img, Rng& rng, double amplitude) {
  for (double& v : img.values) v = std::clamp(v + rng.uniform(-amplitude, amplitude), 0.0, 1.0);
  img = quantize8(std::move(img));
}

inline void check_spec(const DatasetSpec& spec, int classes) {
  if (spec.num_classes != classes)
    throw InvalidParameter("this generator defines exactly " + std::to_string(classes) + " classes");
  if (spec.train_count < spec.num_classes || spec.val_count < spec.num_classes)
    throw InvalidParameter("train and val counts must be >= number of classes");
  if (spec.render_size < 32) throw InvalidParameter("render_size must be >= 32");
}

}  // namespace detail

/// Renders ShapesTex example `index` of `split`. label = index mod 10;
/// shape = label / 2, striped = label odd.
inline LabeledImage render_shapestex(const DatasetSpec& spec, Split split, int index,
                                     const RenderStyle& style = {}) {
  Rng rng(derive_seed(spec.seed, {hash_label("shapestex"), static_cast<std::uint64_t>(split),
                                  static_cast<std::uint64_t>(index)}));
  const int label = index % kShapesTexClasses;
  const Shape shape = static_cast<Shape>(label / 2);
  const bool striped = label % 2 == 1;
  const int n = spec.render_size;
  const auto [bg, fg] = detail::gray_pair(rng, style.min_separation);
  detail::Placement p;
  p.cx = n / 2.0 + rng.uniform(-style.position_jitter, style.position_jitter) * n;
  p.cy = n / 2.0 + rng.uniform(-style.position_jitter, style.position_jitter) * n;
  p.radius = style.object_radius * n * rng.uniform(1.0 - style.scale_jitter, 1.0 + style.scale_jitter);
  p.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const detail::Texture tex = detail::draw_texture(rng, striped, fg, style);

  Image img(n, n, 1, bg);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      if (detail::covers(shape, p, x + 0.5, y + 0.5)) img.at(y, x) = detail::texture_value(tex, x + 0.5, y + 0.5);
  detail::add_noise_and_quantize(img, rng, style.noise_amplitude);
  return {std::move(img), label};
}

struct ClassificationData {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
};

inline ClassificationData generate_shapestex(const DatasetSpec& spec, const RenderStyle& style = {}) {
  detail::check_spec(spec, kShapesTexClasses);
  ClassificationData data;
  data.train.resize(spec.train_count);
  data.val.resize(spec.val_count);
  parallel_for(data.train.size(), [&](std::size_t i) {
    data.train[i] = render_shapestex(spec, Split::train, static_cast<int>(i), style);
  });
  parallel_for(data.val.size(), [&](std::size_t i) {
    data.val[i] = render_shapestex(spec, Split::val, static_cast<int>(i), style);
  });
  return data;
}

/// Segmentation frames are non-square (5:7) so the geometric-mean scale
/// policy differs from the min-side one.
inline Extents shapeseg_extents(int render_size) {
  return {static_cast<int>(std::lround(render_size * 5.0 / 6.0)), static_cast<int>(std::lround(render_size * 7.0 / 6.0))};
}

inline SegExample render_shapeseg(const DatasetSpec& spec, Split split, int index, const RenderStyle& style = {}) {
  Rng rng(derive_seed(spec.seed, {hash_label("shapeseg"), static_cast<std::uint64_t>(split),
                                  static_cast<std::uint64_t>(index)}));
  const auto [h, w] = shapeseg_extents(spec.render_size);
  const double base_radius = style.seg_object_radius * std::min(h, w);

  struct Object {
    int cls;
    detail::Placement place;
    detail::Texture tex;
  };

  for (;;) {
    const auto [bg, fg0] = detail::gray_pair(rng, style.min_separation);
    (void)fg0;
    const int wanted = 1 + static_cast<int>(rng.below(3));
    std::vector<Object> objects;
    for (int o = 0; o < wanted; ++o) {
      Object obj;
      obj.cls = 1 + static_cast<int>(rng.below(kShapeCount));
      obj.place.radius = base_radius * rng.uniform(1.0 - style.scale_jitter, 1.0 + style.scale_jitter);
      obj.place.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      bool placed = false;
      for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
        const double r = obj.place.radius;
        if (2.0 * r >= std::min(h, w)) break;
        obj.place.cx = rng.uniform(r, w - r);
        obj.place.cy = rng.uniform(r, h - r);
        placed = true;
        for (const auto& other : objects)
          if (std::hypot(other.place.cx - obj.place.cx, other.place.cy - obj.place.cy) < r + other.place.radius + 1.0)
            placed = false;
      }
      if (!placed) continue;
      double fg;
      do {
        fg = rng.uniform(0.1, 0.9);
      } while (std::abs(fg - bg) < style.min_separation);
      obj.tex = detail::draw_texture(rng, rng.below(2) == 1, fg, style);
      objects.push_back(obj);
    }
    if (objects.empty()) continue;

    SegExample ex{Image(h, w, 1, bg), LabelGrid(h, w, 0)};
    std::size_t background = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool hit = false;
        for (const auto& obj : objects)
          if (detail::covers(static_cast<Shape>(obj.cls - 1), obj.place, x + 0.5, y + 0.5)) {
            ex.image.at(y, x) = detail::texture_value(obj.tex, x + 0.5, y + 0.5);
            ex.mask.at(y, x) = obj.cls;
            hit = true;
            break;
          }
        background += !hit;
      }
    const double bg_fraction = static_cast<double>(background) / (static_cast<double>(h) * w);
    if (bg_fraction < 0.4 || bg_fraction > 0.95) continue;
    detail::add_noise_and_quantize(ex.image, rng, style.noise_amplitude);
    return ex;
  }
}

struct SegmentationData {
  std::vector<SegExample> train;
  std::vector<SegExample> val;
};

inline SegmentationData generate_shapeseg(const DatasetSpec& spec, const RenderStyle& style = {}) {
  detail::check_spec(spec, kShapeSegClasses);
  SegmentationData data;
  data.train.resize(spec.train_count);
  data.val.resize(spec.val_count);
  parallel_for(data.train.size(), [&](std::size_t i) {
    data.train[i] = render_shapeseg(spec, Split::train, static_cast<int>(i), style);
  });
  parallel_for(data.val.size(), [&](std::size_t i) {
    data.val[i] = render_shapeseg(spec, Split::val, static_cast<int>(i), style);
  });
  return data;
}

// ---------------------------------------------------------------------------
// Persistence. A split is a directory holding index.txt plus one PGM/PPM per
// example. Classification lines are "<id> <label> <relative-path>";
// segmentation lines are "<id> <image-path> <mask-path>", with masks stored
// as PGM whose gray code is the class index.

namespace detail {

inline std::string example_name(std::size_t id, int channels) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << id << (channels == 3 ? ".ppm" : ".pgm");
  return os.str();
}

inline std::vector<std::vector<std::string>> read_index(const std::filesystem::path& dir) {
  const auto path = dir / "index.txt";
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open index '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f) fields.push_back(f);
    if (fields.size() != 3)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields, got " +
                       std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline Image load_record_image(const std::filesystem::path& dir, const std::string& rel, const std::string& where) {
  try {
    return read_pnm((dir / rel).string());
  } catch (const Error& e) {
    throw ParseError(where + ": " + e.what());
  }
}

}  // namespace detail

inline void save_dataset(const std::vector<LabeledImage>& items, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.txt");
  if (!index) throw Error("cannot write index in '" + dir.string() + "'");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string rel = detail::example_name(i, items[i].image.channels);
    write_pnm(items[i].image, (dir / rel).string());
    index << i << ' ' << items[i].label << ' ' << rel << '\n';
  }
}

inline std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir) {
  std::vector<LabeledImage> items;
  const auto rows = detail::read_index(dir);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::string where = (dir / "index.txt").string() + ": record " + rows[r][0];
    LabeledImage item;
    try {
      item.label = std::stoi(rows[r][1]);
    } catch (const std::exception&) {
      throw ParseError(where + ": bad label '" + rows[r][1] + "'");
    }
    if (item.label < 0) throw ParseError(where + ": negative label");
    item.image = detail::load_record_image(dir, rows[r][2], where);
    items.push_back(std::move(item));
  }
  return items;
}

inline void save_seg_dataset(const std::vector<SegExample>& items, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.txt");
  if (!index) throw Error("cannot write index in '" + dir.string() + "'");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string rel = detail::example_name(i, items[i].image.channels);
    const std::string mask_rel = "mask_" + detail::example_name(i, 1);
    write_pnm(items[i].image, (dir / rel).string());
    write_pnm(labels_to_image(items[i].mask), (dir / mask_rel).string());
    index << i << ' ' << rel << ' ' << mask_rel << '\n';
  }
}

inline std::vector<SegExample> load_seg_dataset(const std::filesystem::path& dir) {
  std::vector<SegExample> items;
  for (const auto& row : detail::read_index(dir)) {
    const std::string where = (dir / "index.txt").string() + ": record " + row[0];
    SegExample ex;
    ex.image = detail::load_record_image(dir, row[1], where);
    ex.mask = image_to_labels(detail::load_record_image(dir, row[2], where));
    if (ex.mask.height != ex.image.height || ex.mask.width != ex.image.width)
      throw ParseError(where + ": mask extents differ from image");
    items.push_back(std::move(ex));
  }
  return items;
}

}  // namespace blurlab
