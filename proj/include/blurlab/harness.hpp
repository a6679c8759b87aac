#pragma once

// Config-driven experiment runner: dataset generation, baseline training,
// fine-tuning settings, the evaluation grid, invariance probes, the
// segmentation heads, and report output.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "blurlab/config.hpp"
#include "blurlab/dataset.hpp"
#include "blurlab/error.hpp"
#include "blurlab/image.hpp"
#include "blurlab/imaging.hpp"
#include "blurlab/metrics.hpp"
#include "blurlab/net.hpp"
#include "blurlab/parallel.hpp"
#include "blurlab/predict.hpp"
#include "blurlab/psf.hpp"
#include "blurlab/rng.hpp"
#include "blurlab/train.hpp"

namespace blurlab {

inline constexpr const char* kVersion = "0.1.0";

using LogFn = std::function<void(const std::string&)>;

/// Parses "delta", "disk <r>", "box_h <n>", "box_v <n>", "gaussian <sigma>",
/// "shake <seed>" or "shake_bank <size> <label>". Bank seeds derive from the
/// master seed and the label, so banks with different labels are disjoint.
inline KernelSource parse_kernel_source(const std::string& spec, std::uint64_t master_seed) {
  std::istringstream is(spec);
  std::string kind;
  is >> kind;
  const auto bad = [&](const std::string& why) { return ConfigError("kernel '" + spec + "': " + why); };
  const auto number = [&]() {
    std::string tok;
    if (!(is >> tok)) throw bad("missing parameter");
    const auto v = parse_number<double>(tok);
    if (!v) throw bad("'" + tok + "' is not a number");
    return *v;
  };
  const auto finish = [&](KernelSource s) {
    std::string extra;
    if (is >> extra) throw bad("unexpected '" + extra + "'");
    return s;
  };
  try {
    if (kind == "delta" || kind == "sharp") return finish(KernelSource::sharp());
    if (kind == "disk") return finish(KernelSource::fixed(disk_kernel(number())));
    if (kind == "box_h" || kind == "box_v") {
      const double n = number();
      if (n != std::floor(n)) throw bad("box length must be an integer");
      return finish(KernelSource::fixed(
          box_kernel(static_cast<int>(n), kind == "box_h" ? Orientation::horizontal : Orientation::vertical)));
    }
    if (kind == "gaussian") return finish(KernelSource::fixed(gaussian_kernel(number())));
    if (kind == "shake") {
      std::string tok;
      if (!(is >> tok)) throw bad("missing seed");
      const auto seed = parse_number<std::uint64_t>(tok);
      if (!seed) throw bad("'" + tok + "' is not a seed");
      return finish(KernelSource::fixed(camera_shake_kernel(*seed)));
    }
    if (kind == "shake_bank") {
      const double n = number();
      std::string label;
      if (!(is >> label)) throw bad("missing bank label");
      if (n < 1 || n != std::floor(n)) throw bad("bank size must be a positive integer");
      return finish(KernelSource::from_bank(
          ShakeBank{derive_seed(master_seed, {hash_label("shake-bank"), hash_label(label)}), static_cast<std::size_t>(n)}));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw bad(e.what());
  }
  throw bad("unknown kernel kind '" + kind + "'");
}

using Mix = std::vector<std::pair<std::string, double>>;

/// Parses "sharp:1, D1:1, D2:2" (weights are normalized later).
inline Mix parse_mix(const std::string& text) {
  Mix mix;
  for (const auto& item : split_list(text)) {
    const auto colon = item.find(':');
    const std::string name = trim(item.substr(0, colon));
    double w = 1.0;
    if (colon != std::string::npos) {
      const auto v = parse_number<double>(trim(item.substr(colon + 1)));
      if (!v || !(*v >= 0.0)) throw ConfigError("blur mix '" + text + "': bad weight in '" + item + "'");
      w = *v;
    }
    if (name.empty()) throw ConfigError("blur mix '" + text + "': empty kernel name");
    mix.emplace_back(name, w);
  }
  if (mix.empty()) throw ConfigError("blur mix is empty");
  return mix;
}

/// Parses "18@0.02, 6@0.002" into training stages.
inline std::vector<TrainStage> parse_stages(const std::string& text) {
  std::vector<TrainStage> stages;
  for (const auto& item : split_list(text)) {
    const auto at = item.find('@');
    if (at == std::string::npos) throw ConfigError("stage '" + item + "' must look like <epochs>@<lr>");
    const auto e = parse_number<int>(trim(item.substr(0, at)));
    const auto lr = parse_number<double>(trim(item.substr(at + 1)));
    if (!e || !lr || *e < 0 || !(*lr >= 0.0)) throw ConfigError("stage '" + item + "' must look like <epochs>@<lr>");
    stages.push_back({*e, *lr});
  }
  return stages;
}

/// An evaluation scale: one or more net scales whose predictions are pooled.
struct EvalScale {
  std::string label;  // "64", "64+128"
  std::vector<int> scales;
};

inline EvalScale parse_eval_scale(const std::string& text) {
  EvalScale s{text, {}};
  for (const auto& part : split_list(text, '+')) {
    const auto v = parse_number<int>(part);
    if (!v || *v < 1) throw ConfigError("evaluation scale '" + text + "' is not a list of positive integers");
    s.scales.push_back(*v);
  }
  if (s.scales.empty()) throw ConfigError("empty evaluation scale");
  return s;
}

struct FinetuneSetting {
  std::string name;
  Mix mix;
};

struct SegHeadSetting {
  std::string name;
  std::string model;  // "baseline" or a fine-tune setting name
  Mix mix;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "report";
  std::vector<std::string> metrics{"top1", "top5", "entropy", "cross_entropy", "invariance", "segmentation"};

  DatasetSpec dataset;
  RenderStyle style;
  int seg_train_count = 200;
  int seg_val_count = 100;

  std::string architecture = "blurnet-s";
  int input_size = 56;

  TrainSchedule pretrain;
  TrainPipeline pretrain_pipeline;
  TrainSchedule finetune;
  TrainPipeline finetune_pipeline;
  std::vector<FinetuneSetting> settings;

  std::vector<std::pair<std::string, KernelSource>> kernels;

  int canonical = 96;
  std::vector<std::string> conditions;
  std::vector<EvalScale> scales;
  CropPolicy crop;

  std::string invariance_condition = "D4";
  int invariance_scale = 64;
  int invariance_pairs = 100;
  int heatmap_count = 2;

  int seg_scale = 64;
  int seg_pixels_per_image = 300;
  TrainSchedule seg_schedule;
  double seg_band = 4.0;
  std::vector<std::string> seg_conditions;
  std::vector<SegHeadSetting> seg_heads;

  std::string source_text;  // canonical config text, hashed into the manifest

  bool wants(const std::string& metric) const {
    for (const auto& m : metrics)
      if (m == metric) return true;
    return false;
  }

  const KernelSource& kernel(const std::string& name) const {
    for (const auto& [n, k] : kernels)
      if (n == name) return k;
    throw ConfigError("unknown kernel '" + name + "'");
  }

  BlurDistribution distribution(const Mix& mix) const {
    std::vector<std::pair<KernelSource, double>> entries;
    for (const auto& [name, w] : mix) entries.emplace_back(kernel(name), w);
    return BlurDistribution::weighted(std::move(entries));
  }

  Architecture make_architecture() const {
    if (architecture == "blurnet-s") return blurnet_s(dataset.num_classes, input_size, 1);
    throw ConfigError("unknown architecture '" + architecture + "'");
  }

  bool has_model(const std::string& name) const {
    if (name == "baseline") return true;
    for (const auto& s : settings)
      if (s.name == name) return true;
    return false;
  }

  std::vector<std::string> model_names() const {
    std::vector<std::string> names{"baseline"};
    for (const auto& s : settings) names.push_back(s.name);
    return names;
  }

  /// Checks cross references (kernel names, model names, metric names).
  void validate() const {
    pretrain.validate();
    finetune.validate();
    seg_schedule.validate();
    static const std::vector<std::string> known_metrics{"top1",       "top5",        "entropy", "cross_entropy",
                                                        "invariance", "segmentation"};
    for (const auto& m : metrics)
      if (std::find(known_metrics.begin(), known_metrics.end(), m) == known_metrics.end())
        throw ConfigError("unknown metric '" + m + "'");
    for (const auto& c : conditions) kernel(c);
    for (const auto& c : seg_conditions) kernel(c);
    for (const auto& s : settings) distribution(s.mix);
    for (std::size_t i = 0; i < settings.size(); ++i) {
      if (settings[i].name == "baseline") throw ConfigError("'baseline' is reserved for the pretrained model");
      for (std::size_t j = 0; j < i; ++j)
        if (settings[i].name == settings[j].name) throw ConfigError("duplicate fine-tune setting '" + settings[i].name + "'");
    }
    for (const auto& h : seg_heads) {
      if (!has_model(h.model)) throw ConfigError("segmentation head '" + h.name + "' uses unknown model '" + h.model + "'");
      distribution(h.mix);
    }
    if (conditions.empty()) throw ConfigError("no evaluation conditions");
    if (scales.empty()) throw ConfigError("no evaluation scales");
    if (wants("invariance")) kernel(invariance_condition);
    make_architecture().validate();
    if (pretrain_pipeline.crop != input_size || finetune_pipeline.crop != input_size)
      throw ConfigError("training crop must equal the model input size");
    for (const auto& s : scales)
      for (int v : s.scales)
        if (v < input_size) throw ConfigError("evaluation scale " + std::to_string(v) + " is smaller than the model input");
  }

  static ExperimentConfig from(const Config& c) {
    ExperimentConfig x;
    c.check_keys("", {});
    c.check_keys("experiment", {"seed", "out", "metrics"});
    c.check_keys("dataset", {"train_count", "val_count", "render_size", "seg_train_count", "seg_val_count",
                             "object_radius", "seg_object_radius", "scale_jitter", "position_jitter",
                             "min_separation", "stripe_period_min", "stripe_period_max", "stripe_contrast_min",
                             "stripe_contrast_max", "noise_amplitude"});
    c.check_keys("model", {"architecture", "input"});
    c.check_keys("pretrain", {"stages", "batch_size", "momentum", "net_scales", "pre_scales"});
    c.check_keys("finetune", {"stages", "batch_size", "momentum", "net_scales", "pre_scales"}, "setting.");
    c.check_keys("eval", {"canonical", "conditions", "scales", "crop"});
    c.check_keys("invariance", {"condition", "scale", "pairs", "heatmaps"});
    c.check_keys("segmentation", {"scale", "pixels_per_image", "stages", "batch_size", "momentum", "band",
                                  "conditions"},
                 "head.");
    for (const auto& s : c.sections()) {
      static const std::vector<std::string> known{"",         "experiment", "dataset",   "model",        "pretrain",
                                                  "finetune", "kernels",    "eval",      "invariance",   "segmentation"};
      if (std::find(known.begin(), known.end(), s.name) == known.end())
        throw ConfigError(c.where(s.line) + ": unknown section [" + s.name + "]");
    }

    x.seed = c.get<std::uint64_t>("experiment", "seed");
    x.out = c.get_string("experiment", "out", x.out);
    x.metrics = c.get_list<std::string>("experiment", "metrics", x.metrics);

    x.dataset.train_count = c.get<int>("dataset", "train_count", x.dataset.train_count);
    x.dataset.val_count = c.get<int>("dataset", "val_count", x.dataset.val_count);
    x.dataset.render_size = c.get<int>("dataset", "render_size", x.dataset.render_size);
    x.seg_train_count = c.get<int>("dataset", "seg_train_count", x.seg_train_count);
    x.seg_val_count = c.get<int>("dataset", "seg_val_count", x.seg_val_count);
    auto& st = x.style;
    st.object_radius = c.get<double>("dataset", "object_radius", st.object_radius);
    st.seg_object_radius = c.get<double>("dataset", "seg_object_radius", st.seg_object_radius);
    st.scale_jitter = c.get<double>("dataset", "scale_jitter", st.scale_jitter);
    st.position_jitter = c.get<double>("dataset", "position_jitter", st.position_jitter);
    st.min_separation = c.get<double>("dataset", "min_separation", st.min_separation);
    st.stripe_period_min = c.get<double>("dataset", "stripe_period_min", st.stripe_period_min);
    st.stripe_period_max = c.get<double>("dataset", "stripe_period_max", st.stripe_period_max);
    st.stripe_contrast_min = c.get<double>("dataset", "stripe_contrast_min", st.stripe_contrast_min);
    st.stripe_contrast_max = c.get<double>("dataset", "stripe_contrast_max", st.stripe_contrast_max);
    st.noise_amplitude = c.get<double>("dataset", "noise_amplitude", st.noise_amplitude);

    x.architecture = c.get_string("model", "architecture", x.architecture);
    x.input_size = c.get<int>("model", "input", x.input_size);

    const auto schedule = [&](const char* sec, TrainSchedule& s, TrainPipeline* p) {
      s.stages = parse_stages(c.get_string(sec, "stages"));
      s.batch_size = c.get<int>(sec, "batch_size", s.batch_size);
      s.momentum = c.get<double>(sec, "momentum", s.momentum);
      if (p) {
        p->net_scales = c.get_list<int>(sec, "net_scales", p->net_scales);
        p->pre_scales = c.get_list<int>(sec, "pre_scales", p->pre_scales);
        p->crop = x.input_size;
      }
    };
    schedule("pretrain", x.pretrain, &x.pretrain_pipeline);
    if (c.find_section("finetune")) {
      schedule("finetune", x.finetune, &x.finetune_pipeline);
      for (const auto& e : c.find_section("finetune")->entries)
        if (e.key.starts_with("setting.")) x.settings.push_back({e.key.substr(8), parse_mix(e.value)});
    }

    x.kernels.emplace_back("sharp", KernelSource::sharp());
    if (const auto* sec = c.find_section("kernels"))
      for (const auto& e : sec->entries) {
        if (e.key == "sharp") throw ConfigError(c.where(e.line) + ": 'sharp' is predefined");
        for (const auto& [n, k] : x.kernels)
          if (n == e.key) throw ConfigError(c.where(e.line) + ": duplicate kernel '" + e.key + "'");
        try {
          x.kernels.emplace_back(e.key, parse_kernel_source(e.value, x.seed));
        } catch (const ConfigError& err) {
          throw ConfigError(c.where(e.line) + ": " + err.what());
        }
      }

    x.canonical = c.get<int>("eval", "canonical", x.canonical);
    x.conditions = c.get_list<std::string>("eval", "conditions");
    for (const auto& s : c.get_list<std::string>("eval", "scales")) x.scales.push_back(parse_eval_scale(s));
    const auto crop = split_list(c.get_string("eval", "crop", "center"), ' ');
    if (crop.size() == 1 && crop[0] == "center") {
      x.crop = {false, 0};
    } else if (crop.size() == 2 && crop[0] == "dense" && parse_number<int>(crop[1])) {
      x.crop = {true, *parse_number<int>(crop[1])};
    } else {
      throw ConfigError(c.where(c.require("eval", "crop").line) + ": crop must be 'center' or 'dense <stride>'");
    }

    x.invariance_condition = c.get_string("invariance", "condition", x.invariance_condition);
    x.invariance_scale = c.get<int>("invariance", "scale", x.invariance_scale);
    x.invariance_pairs = c.get<int>("invariance", "pairs", x.invariance_pairs);
    x.heatmap_count = c.get<int>("invariance", "heatmaps", x.heatmap_count);

    x.seg_scale = c.get<int>("segmentation", "scale", x.seg_scale);
    x.seg_pixels_per_image = c.get<int>("segmentation", "pixels_per_image", x.seg_pixels_per_image);
    x.seg_schedule.stages = parse_stages(c.get_string("segmentation", "stages", "10@0.01"));
    x.seg_schedule.batch_size = c.get<int>("segmentation", "batch_size", 64);
    x.seg_schedule.momentum = c.get<double>("segmentation", "momentum", 0.9);
    x.seg_band = c.get<double>("segmentation", "band", x.seg_band);
    x.seg_conditions = c.get_list<std::string>("segmentation", "conditions", {});
    if (const auto* sec = c.find_section("segmentation"))
      for (const auto& e : sec->entries)
        if (e.key.starts_with("head.")) {
          const auto bar = e.value.find('|');
          if (bar == std::string::npos) throw ConfigError(c.where(e.line) + ": head must be '<model> | <blur mix>'");
          x.seg_heads.push_back({e.key.substr(5), trim(e.value.substr(0, bar)), parse_mix(e.value.substr(bar + 1))});
        }

    x.source_text = c.canonical();
    x.reseed();
    x.validate();
    return x;
  }

  /// Derives every stream seed from the master seed.
  void reseed() {
    dataset.seed = derive_seed(seed, {hash_label("dataset")});
    pretrain.seed = derive_seed(seed, {hash_label("pretrain")});
    finetune.seed = derive_seed(seed, {hash_label("finetune")});
    seg_schedule.seed = derive_seed(seed, {hash_label("segmentation")});
  }
};

inline ExperimentConfig load_experiment(const std::string& path, std::optional<std::uint64_t> seed = std::nullopt) {
  Config c = Config::load(path);
  if (seed) c.set("experiment", "seed", std::to_string(*seed));
  return ExperimentConfig::from(c);
}

// ---------------------------------------------------------------------------
// Report

struct GridCell {
  std::string model;
  std::string condition;
  std::string scale;
  double top1 = 0.0;
  double top5 = 0.0;
  double entropy = 0.0;
  double cross_entropy = 0.0;
  bool ok = false;
};

struct InvarianceRow {
  std::string model;
  std::string tap;
  double mean_hamming = 0.0;
  bool ok = false;
};

struct SegRow {
  std::string head;
  std::string condition;
  double miou = 0.0;
  std::optional<double> boundary_miou;
  bool ok = false;
};

struct Heatmap {
  std::string name;
  Image image;
};

struct StageRecord {
  std::string name;
  double seconds = 0.0;
  std::string error;  // empty on success
};

struct Report {
  std::vector<std::string> models;
  std::vector<std::string> conditions;
  std::vector<std::string> scales;
  std::vector<GridCell> grid;
  std::vector<InvarianceRow> invariance;
  std::vector<SegRow> segmentation;
  std::vector<Heatmap> heatmaps;
  std::vector<StageRecord> stages;
  std::string config_hash;
  std::uint64_t seed = 0;
  double total_seconds = 0.0;

  bool empty() const { return grid.empty() && invariance.empty() && segmentation.empty() && heatmaps.empty(); }

  bool failed() const {
    for (const auto& s : stages)
      if (!s.error.empty()) return true;
    return false;
  }

  const GridCell* cell(const std::string& model, const std::string& condition, const std::string& scale) const {
    for (const auto& c : grid)
      if (c.model == model && c.condition == condition && c.scale == scale) return &c;
    return nullptr;
  }
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Model names become file names; anything outside [A-Za-z0-9+._-] maps to '_'.
inline std::string file_stem(const std::string& name) {
  std::string out = name;
  for (char& ch : out)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '+' || ch == '.' || ch == '_' || ch == '-')) ch = '_';
  return out;
}

inline void write_report_tables(const Report& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto status = [](bool ok) { return std::string(ok ? "ok" : "failed"); };
  const auto val = [](bool ok, double v) { return ok ? format_value(v) : std::string("failed"); };
  {
    std::ofstream os(dir / "accuracy_grid.csv", std::ios::binary);
    write_csv_row(os, {"model", "condition", "scale", "top1", "top5", "status"});
    for (const auto& c : r.grid)
      write_csv_row(os, {c.model, c.condition, c.scale, val(c.ok, c.top1), val(c.ok, c.top5), status(c.ok)});
  }
  {
    std::ofstream os(dir / "entropy.csv", std::ios::binary);
    write_csv_row(os, {"model", "condition", "scale", "entropy", "cross_entropy", "status"});
    for (const auto& c : r.grid)
      write_csv_row(os, {c.model, c.condition, c.scale, val(c.ok, c.entropy), val(c.ok, c.cross_entropy), status(c.ok)});
  }
  {
    // Accuracy drop relative to the same model and scale on sharp images.
    std::ofstream os(dir / "scale.csv", std::ios::binary);
    write_csv_row(os, {"model", "condition", "scale", "top1", "drop_from_sharp", "status"});
    for (const auto& c : r.grid) {
      const GridCell* s = r.cell(c.model, "sharp", c.scale);
      const bool ok = c.ok && s && s->ok;
      write_csv_row(os, {c.model, c.condition, c.scale, val(c.ok, c.top1), val(ok, ok ? s->top1 - c.top1 : 0.0),
                         status(ok)});
    }
  }
  {
    std::ofstream os(dir / "invariance.csv", std::ios::binary);
    write_csv_row(os, {"model", "tap", "mean_hamming", "status"});
    for (const auto& v : r.invariance) write_csv_row(os, {v.model, v.tap, val(v.ok, v.mean_hamming), status(v.ok)});
  }
  {
    std::ofstream os(dir / "miou.csv", std::ios::binary);
    write_csv_row(os, {"head", "condition", "miou", "boundary_miou", "status"});
    for (const auto& s : r.segmentation)
      write_csv_row(os, {s.head, s.condition, val(s.ok, s.miou),
                         s.ok ? (s.boundary_miou ? format_value(*s.boundary_miou) : std::string("none")) : "failed",
                         status(s.ok)});
  }
  {
    std::ofstream os(dir / "metrics.csv", std::ios::binary);
    write_csv_row(os, {"metric", "condition", "value"});
    for (const auto& c : r.grid) {
      const std::string cond = c.model + "/" + c.condition + "@" + c.scale;
      write_csv_row(os, {"top1", cond, val(c.ok, c.top1)});
      write_csv_row(os, {"top5", cond, val(c.ok, c.top5)});
      write_csv_row(os, {"entropy", cond, val(c.ok, c.entropy)});
      write_csv_row(os, {"cross_entropy", cond, val(c.ok, c.cross_entropy)});
    }
    for (const auto& v : r.invariance) write_csv_row(os, {"hamming_" + v.tap, v.model, val(v.ok, v.mean_hamming)});
    for (const auto& s : r.segmentation) {
      const std::string cond = s.head + "/" + s.condition;
      write_csv_row(os, {"miou", cond, val(s.ok, s.miou)});
      write_csv_row(os, {"boundary_miou", cond,
                         s.ok ? (s.boundary_miou ? format_value(*s.boundary_miou) : std::string("none")) : "failed"});
    }
  }
}

inline void write_manifest(const Report& r, const std::filesystem::path& dir) {
  std::ofstream os(dir / "manifest.txt", std::ios::binary);
  os << "blurlab " << kVersion << "\n";
  os << "config_hash " << r.config_hash << "\n";
  os << "seed " << r.seed << "\n";
  os << "threads " << worker_count() << "\n";
#if defined(__VERSION__)
  os << "compiler " << __VERSION__ << "\n";
#endif
  for (const auto& s : r.stages) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", s.seconds);
    os << "stage " << s.name << " " << buf << "s " << (s.error.empty() ? "ok" : "failed: " + s.error) << "\n";
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", r.total_seconds);
  os << "total " << buf << "s\n";
}

// ---------------------------------------------------------------------------
// Plots

namespace detail {

struct Canvas {
  Image img;

  Canvas(int h, int w) : img(h, w, 3, 1.0) {}

  void put(int x, int y, const double* rgb) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
  }

  void line(double x0, double y0, double x1, double y1, const double* rgb, int thick = 1) {
    const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
      const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
      for (int dy = -(thick / 2); dy <= thick / 2; ++dy)
        for (int dx = -(thick / 2); dx <= thick / 2; ++dx) put(x + dx, y + dy, rgb);
    }
  }
};

inline const double* palette(std::size_t i) {
  static const double colors[][3] = {{0.12, 0.47, 0.71}, {1.00, 0.50, 0.05}, {0.17, 0.63, 0.17}, {0.84, 0.15, 0.16},
                                     {0.58, 0.40, 0.74}, {0.55, 0.34, 0.29}, {0.89, 0.47, 0.76}, {0.50, 0.50, 0.50}};
  return colors[i % 8];
}

}  // namespace detail

/// Writes one accuracy-vs-condition chart per evaluation scale (PPM, with a
/// text legend alongside) and the invariance heatmaps (PGM). Returns the
/// paths written; an empty report writes nothing.
inline std::vector<std::filesystem::path> emit_plots(const Report& r, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  if (r.empty()) return written;
  if (!r.grid.empty()) std::filesystem::create_directories(dir / "plots");
  for (const auto& scale : r.scales) {
    const int w = 640, h = 400, left = 40, right = 20, top = 20, bottom = 40;
    detail::Canvas cv(h, w);
    const double grid_rgb[3] = {0.85, 0.85, 0.85};
    const double axis_rgb[3] = {0.0, 0.0, 0.0};
    const auto ypix = [&](double v) { return top + (1.0 - v) * (h - top - bottom); };
    const std::size_t nc = r.conditions.size();
    const auto xpix = [&](std::size_t i) {
      return nc <= 1 ? left + (w - left - right) / 2.0 : left + static_cast<double>(i) * (w - left - right) / (nc - 1);
    };
    for (int g = 0; g <= 10; ++g) cv.line(left, ypix(g / 10.0), w - right, ypix(g / 10.0), grid_rgb);
    cv.line(left, top, left, h - bottom, axis_rgb);
    cv.line(left, h - bottom, w - right, h - bottom, axis_rgb);
    for (std::size_t i = 0; i < nc; ++i) cv.line(xpix(i), h - bottom, xpix(i), h - bottom + 5, axis_rgb);
    std::ostringstream legend;
    legend << "accuracy (top-1, y in [0,1]) vs condition at scale " << scale << "\n";
    legend << "x axis:";
    for (const auto& c : r.conditions) legend << " " << c;
    legend << "\n";
    for (std::size_t m = 0; m < r.models.size(); ++m) {
      const double* rgb = detail::palette(m);
      char hexc[8];
      std::snprintf(hexc, sizeof hexc, "#%02x%02x%02x", to_code(rgb[0]), to_code(rgb[1]), to_code(rgb[2]));
      legend << hexc << " " << r.models[m] << "\n";
      std::optional<std::pair<double, double>> prev;
      for (std::size_t i = 0; i < nc; ++i) {
        const GridCell* c = r.cell(r.models[m], r.conditions[i], scale);
        if (!c || !c->ok) {
          prev.reset();
          continue;
        }
        const std::pair<double, double> p{xpix(i), ypix(c->top1)};
        if (prev) cv.line(prev->first, prev->second, p.first, p.second, rgb, 3);
        for (int d = -3; d <= 3; ++d) cv.line(p.first - 3, p.second + d, p.first + 3, p.second + d, rgb);
        prev = p;
      }
    }
    const auto base = dir / "plots" / ("accuracy_" + file_stem(scale));
    write_pnm(cv.img, base.string() + ".ppm");
    std::ofstream(base.string() + ".txt", std::ios::binary) << legend.str();
    written.push_back(base.string() + ".ppm");
  }
  if (!r.heatmaps.empty()) std::filesystem::create_directories(dir / "heatmaps");
  for (const auto& hm : r.heatmaps) {
    const auto path = dir / "heatmaps" / (file_stem(hm.name) + ".pgm");
    write_pnm(hm.image, path.string());
    written.push_back(path);
  }
  return written;
}

/// Reads accuracy_grid.csv back into a report (enough to redraw charts).
inline Report load_report_grid(const std::filesystem::path& dir) {
  const auto path = dir / "accuracy_grid.csv";
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError(path.string() + ": cannot open");
  Report r;
  std::string line;
  int lineno = 0;
  const auto add_unique = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 || line.empty()) continue;
    // Names written by this library never contain quotes or commas.
    const auto f = split_list(line);
    if (f.size() != 6) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    GridCell c{f[0], f[1], f[2]};
    c.ok = f[5] == "ok";
    if (c.ok) {
      const auto t1 = parse_number<double>(f[3]);
      const auto t5 = parse_number<double>(f[4]);
      if (!t1 || !t5) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad accuracy value");
      c.top1 = *t1;
      c.top5 = *t5;
    }
    add_unique(r.models, c.model);
    add_unique(r.conditions, c.condition);
    add_unique(r.scales, c.scale);
    r.grid.push_back(std::move(c));
  }
  return r;
}

/// Writes the report into `out` atomically: everything goes to a sibling
/// temporary directory first, which then replaces `out` by rename. `extra`
/// may add files (checkpoints) to the temporary directory before the swap.
inline void write_report_atomically(const Report& r, const std::filesystem::path& out,
                                    const std::function<void(const std::filesystem::path&)>& extra = {}) {
  namespace fs = std::filesystem;
  fs::path target = fs::absolute(out).lexically_normal();
  if (target.filename().empty()) target = target.parent_path();  // "dir/" form
  const fs::path parent = target.parent_path();
  fs::create_directories(parent);
  const std::string stem = target.filename().string();
  const fs::path tmp = parent / ("." + stem + ".tmp-" + hex64(derive_seed(r.seed, {hash_label(r.config_hash)})));
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  write_report_tables(r, tmp);
  emit_plots(r, tmp);
  if (extra) extra(tmp);
  write_manifest(r, tmp);
  const fs::path old = parent / ("." + stem + ".old");
  fs::remove_all(old);
  if (fs::exists(target)) fs::rename(target, old);
  fs::rename(tmp, target);
  fs::remove_all(old);
}

// ---------------------------------------------------------------------------
// Experiment stages

namespace detail {

/// Per-example log-probabilities summed over crops, with crop counts, so
/// several scales can be pooled afterwards.
struct PooledLogprobs {
  std::vector<std::vector<double>> sum;
  std::vector<int> count;
};

template <typename T>
PooledLogprobs crop_logprobs(const Network<T>& net, const std::vector<Image>& canonical_images, int scale,
                             const CropPolicy& policy) {
  const int ch = net.architecture().input.height;
  const int cw = net.architecture().input.width;
  std::vector<std::vector<Image>> crops(canonical_images.size());
  parallel_for(canonical_images.size(), [&](std::size_t i) {
    const Image x = resize(canonical_images[i], {ScaleMode::min_side, scale});
    for (int top : crop_offsets(x.height, ch, policy))
      for (int left : crop_offsets(x.width, cw, policy)) crops[i].push_back(crop(x, top, left, ch, cw));
  });
  std::vector<Image> flat;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < crops.size(); ++i)
    for (auto& c : crops[i]) {
      flat.push_back(std::move(c));
      owner.push_back(i);
    }
  const auto lp = predict_logprobs(net, flat);
  PooledLogprobs out;
  out.sum.resize(canonical_images.size());
  out.count.assign(canonical_images.size(), 0);
  for (std::size_t j = 0; j < lp.size(); ++j) {
    auto& s = out.sum[owner[j]];
    if (s.empty()) s.assign(lp[j].size(), 0.0);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += lp[j][k];
    ++out.count[owner[j]];
  }
  return out;
}

/// Blurs at the canonical scale; per-item kernels come from assign_kernel.
inline std::vector<Image> blur_canonical(const std::vector<Image>& images, const KernelSource& source, int canonical) {
  std::vector<Image> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const Image x = resize(images[i], {ScaleMode::min_side, canonical});
    out[i] = quantize8(convolve(x, source.for_item(i)));
  });
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Runs every stage of the experiment and writes the report to `out`
/// atomically. Stage failures are recorded in the manifest; cells depending
/// on a failed stage are marked failed.
inline Report run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out, const LogFn& log = {}) {
  const auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const auto t_start = std::chrono::steady_clock::now();
  Report report;
  report.seed = cfg.seed;
  report.config_hash = hex64(hash_label(cfg.source_text));
  report.models = cfg.model_names();
  report.conditions = cfg.conditions;
  for (const auto& s : cfg.scales) report.scales.push_back(s.label);

  const auto stage = [&](const std::string& name, const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    StageRecord rec{name, 0.0, {}};
    say("stage " + name);
    try {
      fn();
    } catch (const std::exception& e) {
      rec.error = e.what();
      say("stage " + name + " failed: " + rec.error);
    }
    rec.seconds = detail::seconds_since(t0);
    report.stages.push_back(rec);
    return rec.error.empty();
  };

  ClassificationData data;
  SegmentationData seg;
  std::map<std::string, Network<float>> nets;
  const Architecture arch = cfg.make_architecture();

  const bool have_data = stage("dataset", [&] {
    data = generate_shapestex(cfg.dataset, cfg.style);
    if (cfg.wants("segmentation") && !cfg.seg_heads.empty()) {
      DatasetSpec s = cfg.dataset;
      s.num_classes = kShapeSegClasses;
      s.train_count = cfg.seg_train_count;
      s.val_count = cfg.seg_val_count;
      seg = generate_shapeseg(s, cfg.style);
    }
  });

  if (have_data) {
    stage("pretrain", [&] {
      auto r = train(arch, data.train, BlurDistribution::sharp_only(), cfg.pretrain, cfg.pretrain_pipeline,
                     [&](int e, double loss) { say("  pretrain epoch " + std::to_string(e) + " loss " + format_value(loss, 4)); });
      nets.emplace("baseline", std::move(r.model));
    });
  }
  if (nets.count("baseline")) {
    for (const auto& s : cfg.settings) {
      stage("finetune:" + s.name, [&] {
        TrainSchedule sched = cfg.finetune;
        sched.seed = derive_seed(cfg.finetune.seed, {hash_label(s.name)});
        auto r = finetune(nets.at("baseline"), data.train, cfg.distribution(s.mix), sched, cfg.finetune_pipeline,
                          [&](int e, double loss) {
                            say("  " + s.name + " epoch " + std::to_string(e) + " loss " + format_value(loss, 4));
                          });
        nets.emplace(s.name, std::move(r.model));
      });
    }
  }

  // Evaluation grid: every model x condition x scale cell exists.
  for (const auto& m : report.models)
    for (const auto& c : cfg.conditions)
      for (const auto& s : cfg.scales) report.grid.push_back(GridCell{m, c, s.label});
  const auto cell_index = [&](std::size_t mi, std::size_t ci, std::size_t si) {
    return (mi * cfg.conditions.size() + ci) * cfg.scales.size() + si;
  };
  std::vector<int> labels;
  for (const auto& v : data.val) labels.push_back(v.label);
  std::vector<Image> val_images;
  for (const auto& v : data.val) val_images.push_back(v.image);

  if (have_data) {
    for (std::size_t ci = 0; ci < cfg.conditions.size(); ++ci) {
      const std::string& cond = cfg.conditions[ci];
      stage("eval:" + cond, [&] {
        const auto blurred = detail::blur_canonical(val_images, cfg.kernel(cond), cfg.canonical);
        for (std::size_t mi = 0; mi < report.models.size(); ++mi) {
          const auto it = nets.find(report.models[mi]);
          if (it == nets.end()) continue;
          std::map<int, detail::PooledLogprobs> per_scale;
          for (const auto& s : cfg.scales)
            for (int v : s.scales)
              if (!per_scale.count(v)) per_scale.emplace(v, detail::crop_logprobs(it->second, blurred, v, cfg.crop));
          for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
            std::vector<ClassDistribution> preds(blurred.size());
            for (std::size_t i = 0; i < blurred.size(); ++i) {
              std::vector<double> total;
              int count = 0;
              for (int v : cfg.scales[si].scales) {
                const auto& p = per_scale.at(v);
                if (total.empty()) total.assign(p.sum[i].size(), 0.0);
                for (std::size_t k = 0; k < total.size(); ++k) total[k] += p.sum[i][k];
                count += p.count[i];
              }
              for (double& t : total) t /= count;
              preds[i] = softmax_logprobs(total).dist;
            }
            GridCell& cell = report.grid[cell_index(mi, ci, si)];
            cell.top1 = topk_accuracy(preds, labels, 1);
            cell.top5 = topk_accuracy(preds, labels, std::min(5, arch.num_classes()));
            cell.entropy = mean_entropy(preds);
            cell.cross_entropy = mean_true_cross_entropy(preds, labels);
            cell.ok = true;
          }
        }
      });
    }
  }

  if (cfg.wants("invariance")) {
    const std::size_t taps = arch.tap_layers().size();
    for (const auto& m : report.models)
      for (std::size_t t = 0; t < taps; ++t) report.invariance.push_back({m, "P" + std::to_string(t + 1)});
  }
  if (have_data && cfg.wants("invariance")) {
    for (const auto& m : report.models) {
      const auto it = nets.find(m);
      if (it == nets.end()) continue;
      stage("invariance:" + m, [&] {
        const KernelSource& src = cfg.kernel(cfg.invariance_condition);
        const std::size_t pairs = std::min<std::size_t>(cfg.invariance_pairs, data.val.size());
        std::vector<InvarianceMap> maps(pairs);
        parallel_for(pairs, [&](std::size_t i) {
          const Image sharp = degrade_eval(data.val[i].image, delta_kernel(), cfg.canonical, cfg.invariance_scale);
          const Image blurred = degrade_eval(data.val[i].image, src.for_item(i), cfg.canonical, cfg.invariance_scale);
          maps[i] = hamming_invariance_map(it->second, sharp, blurred);
        });
        if (maps.empty()) return;
        for (auto& row : report.invariance) {
          if (row.model != m) continue;
          for (std::size_t t = 0; t < maps[0].tap_names.size(); ++t)
            if (maps[0].tap_names[t] == row.tap) {
              double sum = 0.0;
              for (const auto& mp : maps) sum += mp.tap_means[t];
              row.mean_hamming = sum / static_cast<double>(maps.size());
              row.ok = true;
            }
        }
        for (std::size_t i = 0; i < std::min<std::size_t>(cfg.heatmap_count, maps.size()); ++i)
          for (std::size_t t = 0; t < maps[i].tap_names.size(); ++t) {
            char idx[16];
            std::snprintf(idx, sizeof idx, "%04zu", i);
            report.heatmaps.push_back({m + "_" + idx + "_" + maps[i].tap_names[t], quantize8(maps[i].resized[t])});
          }
      });
    }
  }

  if (cfg.wants("segmentation"))
    for (const auto& head_cfg : cfg.seg_heads)
      for (const auto& c : cfg.seg_conditions) report.segmentation.push_back({head_cfg.name, c});
  if (have_data && cfg.wants("segmentation")) {
    for (const auto& head_cfg : cfg.seg_heads) {
      const auto it = nets.find(head_cfg.model);
      if (it == nets.end()) continue;
      stage("segmentation:" + head_cfg.name, [&] {
        const Network<float>& net = it->second;
        const BlurDistribution dist = cfg.distribution(head_cfg.mix);
        const std::uint64_t head_seed = derive_seed(cfg.seg_schedule.seed, {hash_label(head_cfg.name)});
        std::vector<PixelSet> per_image(seg.train.size());
        parallel_for(seg.train.size(), [&](std::size_t i) {
          Rng rng(derive_seed(head_seed, {hash_label("pixels"), i}));
          const Kernel k = dist.sample(rng);
          const Image x = degrade_eval(seg.train[i].image, k, cfg.canonical, cfg.seg_scale);
          const LabelGrid mask = resize_nearest(seg.train[i].mask, x.height, x.width);
          sample_pixels(hypercolumn_features(net, x), mask, cfg.seg_pixels_per_image, rng, per_image[i]);
        });
        PixelSet pixels;
        for (const auto& p : per_image) {
          if (pixels.dims == 0) pixels.dims = p.dims;
          pixels.features.insert(pixels.features.end(), p.features.begin(), p.features.end());
          pixels.labels.insert(pixels.labels.end(), p.labels.begin(), p.labels.end());
        }
        TrainSchedule sched = cfg.seg_schedule;
        sched.seed = head_seed;
        const SegHead head = segmentation_head_train(pixels, kShapeSegClasses, sched);
        for (const auto& cond : cfg.seg_conditions) {
          const KernelSource& src = cfg.kernel(cond);
          std::vector<LabelGrid> preds(seg.val.size()), gts(seg.val.size());
          parallel_for(seg.val.size(), [&](std::size_t i) {
            const Image x = degrade_eval(seg.val[i].image, src.for_item(i), cfg.canonical, cfg.seg_scale);
            gts[i] = resize_nearest(seg.val[i].mask, x.height, x.width);
            preds[i] = head.predict_mask(hypercolumn_features(net, x));
          });
          for (auto& row : report.segmentation)
            if (row.head == head_cfg.name && row.condition == cond) {
              row.miou = miou(preds, gts, kShapeSegClasses);
              row.boundary_miou = boundary_miou(preds, gts, kShapeSegClasses, cfg.seg_band);
              row.ok = true;
            }
        }
      });
    }
  }

  report.total_seconds = detail::seconds_since(t_start);
  write_report_atomically(report, out, [&](const std::filesystem::path& tmp) {
    std::filesystem::create_directories(tmp / "models");
    for (const auto& [name, net] : nets) save_checkpoint(net, (tmp / "models" / (file_stem(name) + ".ckpt")).string());
  });
  say("report written to " + out.string());
  return report;
}

}  // namespace blurlab
