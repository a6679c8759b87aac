// blurlab command-line interface.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "blurlab/blurlab.hpp"

namespace fs = std::filesystem;
using namespace blurlab;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

void collect_flags(const CLI::App& app, std::set<std::string>& out) {
  for (const CLI::Option* opt : app.get_options())
    for (const auto& name : opt->get_lnames()) out.insert("--" + name);
  for (const CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) collect_flags(*sub, out);
}

/// "did you mean" hint for the first unknown long flag on the command line.
std::string suggestion(const CLI::App& app, int argc, char** argv) {
  std::set<std::string> known;
  collect_flags(app, known);
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (!arg.starts_with("--")) continue;
    arg = arg.substr(0, arg.find('='));
    if (known.count(arg)) continue;
    std::string best;
    std::size_t best_d = 4;
    for (const auto& k : known) {
      const std::size_t d = edit_distance(arg, k);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    if (!best.empty()) return "unknown flag " + arg + "; did you mean " + best + "?";
    return "unknown flag " + arg;
  }
  return {};
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

ExperimentConfig experiment_from(const std::string& path, std::optional<std::uint64_t> seed) {
  if (path.empty()) throw ConfigError("--config is required");
  return load_experiment(path, seed);
}

Kernel make_kernel(const std::string& kind, double radius, int length, double sigma, std::uint64_t seed) {
  switch (kernel_kind_from_string(kind)) {
    case KernelKind::disk: return disk_kernel(radius);
    case KernelKind::box_h: return box_kernel(length, Orientation::horizontal);
    case KernelKind::box_v: return box_kernel(length, Orientation::vertical);
    case KernelKind::gaussian: return gaussian_kernel(sigma);
    case KernelKind::camera_shake: return camera_shake_kernel(seed);
    case KernelKind::delta: return delta_kernel();
  }
  throw InvalidParameter("unknown kernel kind");
}

void print_kernel(const Kernel& k) {
  std::cout << "kind " << to_string(k.kind) << "\n";
  for (const auto& [key, v] : k.params) std::cout << key << " " << v << "\n";
  std::cout << "size " << k.height << "x" << k.width << "\n";
  std::cout << "nonzero " << k.nonzero_count() << "\n";
  std::cout << "sum " << std::setprecision(17) << k.sum() << "\n";
  std::cout << std::setprecision(4) << std::fixed;
  for (int r = 0; r < k.height; ++r) {
    for (int c = 0; c < k.width; ++c) std::cout << (c ? " " : "") << k.at(r, c);
    std::cout << "\n";
  }
}

std::vector<ClassDistribution> evaluate(const Network<float>& net, const std::vector<LabeledImage>& data,
                                        const KernelSource& src, int canonical, const std::vector<int>& scales,
                                        const CropPolicy& crop) {
  std::vector<ClassDistribution> preds(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const Image x = resize(data[i].image, {ScaleMode::min_side, canonical});
    preds[i] = multiscale_predict(net, quantize8(convolve(x, src.for_item(i))), scales, crop);
  });
  return preds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blurlab: blur kernels, synthetic datasets, and blur-robustness experiments for small CNNs"};
  app.require_subcommand(1);
  app.fallthrough(false);

  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;

  // kernel gen | show
  auto* kernel = app.add_subcommand("kernel", "Generate or inspect PSF1 kernel files");
  kernel->require_subcommand(1);
  auto* kgen = kernel->add_subcommand("gen", "Write a kernel to a PSF1 file");
  std::string kind = "disk";
  double radius = 1.0, sigma = 1.0;
  int length = 4;
  kgen->add_option("--kind", kind, "disk, box_h, box_v, gaussian, camera_shake or delta")->capture_default_str();
  kgen->add_option("--radius", radius, "Disk radius in pixels")->capture_default_str();
  kgen->add_option("--length", length, "Box length in pixels")->capture_default_str();
  kgen->add_option("--sigma", sigma, "Gaussian standard deviation")->capture_default_str();
  kgen->add_option("--seed", seed, "Camera-shake seed")->capture_default_str();
  kgen->add_option("--out", out, "Output PSF1 path")->required();
  auto* kshow = kernel->add_subcommand("show", "Print a PSF1 kernel");
  std::string in_path;
  kshow->add_option("--in", in_path, "PSF1 file")->required();

  // dataset gen
  auto* dataset = app.add_subcommand("dataset", "Generate synthetic datasets");
  dataset->require_subcommand(1);
  auto* dgen = dataset->add_subcommand("gen", "Render a dataset to <out>/train and <out>/val");
  std::string dkind = "shapestex";
  int train_count = 1000, val_count = 200, render = 96;
  dgen->add_option("--kind", dkind, "shapestex or shapeseg")->capture_default_str();
  dgen->add_option("--train", train_count, "Training examples")->capture_default_str();
  dgen->add_option("--val", val_count, "Validation examples")->capture_default_str();
  dgen->add_option("--render", render, "Render size in pixels")->capture_default_str();
  dgen->add_option("--seed", seed, "Dataset seed")->capture_default_str();
  dgen->add_option("--out", out, "Output directory")->required();

  // degrade
  auto* degrade = app.add_subcommand("degrade", "Blur an image through the evaluation pipeline");
  std::string kernel_path;
  int canonical = 96, scale = 64;
  std::string mode = "min_side";
  degrade->add_option("--in", in_path, "Input PGM/PPM")->required();
  degrade->add_option("--kernel", kernel_path, "PSF1 kernel")->required();
  degrade->add_option("--canonical", canonical, "Canonical blur scale")->capture_default_str();
  degrade->add_option("--scale", scale, "Network scale")->capture_default_str();
  degrade->add_option("--mode", mode, "min_side or geometric_mean")->capture_default_str();
  degrade->add_option("--out", out, "Output PGM/PPM")->required();

  // train / finetune
  std::string data_dir, model_path, setting;
  auto* trn = app.add_subcommand("train", "Train a model on sharp images ([pretrain] schedule)");
  trn->add_option("--config", config_path, "Experiment config")->required();
  trn->add_option("--data", data_dir, "Dataset directory holding train/")->required();
  trn->add_option("--seed", seed, "Master seed (overrides the config)");
  trn->add_option("--out", out, "Output checkpoint")->required();
  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint on a configured blur setting");
  ft->add_option("--config", config_path, "Experiment config")->required();
  ft->add_option("--model", model_path, "Starting checkpoint")->required();
  ft->add_option("--data", data_dir, "Dataset directory holding train/")->required();
  ft->add_option("--setting", setting, "Name of a setting.<name> entry in [finetune]")->required();
  ft->add_option("--seed", seed, "Master seed (overrides the config)");
  ft->add_option("--out", out, "Output checkpoint")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one blur condition");
  std::string condition = "sharp", scales_text = "64";
  ev->add_option("--config", config_path, "Experiment config (kernels, canonical scale, crop policy)")->required();
  ev->add_option("--model", model_path, "Checkpoint")->required();
  ev->add_option("--data", data_dir, "Dataset directory holding val/")->required();
  ev->add_option("--condition", condition, "Kernel name from [kernels]")->capture_default_str();
  ev->add_option("--scale", scales_text, "Net scale, or scales joined by '+'")->capture_default_str();
  ev->add_option("--seed", seed, "Master seed (overrides the config)");
  ev->add_option("--out", out, "Optional CSV output");

  // invariance
  auto* inv = app.add_subcommand("invariance", "Hamming invariance maps for one sharp/blurred pair");
  inv->add_option("--model", model_path, "Checkpoint")->required();
  inv->add_option("--in", in_path, "Sharp input image")->required();
  inv->add_option("--kernel", kernel_path, "PSF1 kernel")->required();
  inv->add_option("--canonical", canonical, "Canonical blur scale")->capture_default_str();
  inv->add_option("--scale", scale, "Network scale")->capture_default_str();
  inv->add_option("--out", out, "Directory for per-tap heatmaps")->required();

  // report
  auto* rep = app.add_subcommand("report", "Redraw charts for an existing report directory");
  rep->add_option("--in", in_path, "Report directory")->required();
  rep->add_option("--out", out, "Directory for plots (default: the report directory)");

  // run
  auto* run = app.add_subcommand("run", "Run the full experiment described by a config");
  run->add_option("--config", config_path, "Experiment config")->required();
  run->add_option("--seed", seed, "Master seed (overrides the config)");
  run->add_option("--out", out, "Report directory (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const std::string hint = suggestion(app, argc, argv);
    std::cerr << "error: " << e.what() << "\n";
    if (!hint.empty()) std::cerr << hint << "\n";
    std::cerr << "run with --help for usage\n";
    return kUsageError;
  }

  const auto seed_override = [&](const CLI::App* sub) -> std::optional<std::uint64_t> {
    if (sub->count("--seed")) return seed;
    return std::nullopt;
  };

  try {
    if (*kgen) {
      save_kernel(make_kernel(kind, radius, length, sigma, seed), out);
      std::cout << "wrote " << out << "\n";
    } else if (*kshow) {
      print_kernel(load_kernel(in_path));
    } else if (*dgen) {
      DatasetSpec spec;
      spec.train_count = train_count;
      spec.val_count = val_count;
      spec.render_size = render;
      spec.seed = seed;
      if (dkind == "shapestex") {
        const auto data = generate_shapestex(spec);
        save_dataset(data.train, fs::path(out) / "train");
        save_dataset(data.val, fs::path(out) / "val");
      } else if (dkind == "shapeseg") {
        spec.num_classes = kShapeSegClasses;
        const auto data = generate_shapeseg(spec);
        save_seg_dataset(data.train, fs::path(out) / "train");
        save_seg_dataset(data.val, fs::path(out) / "val");
      } else {
        throw InvalidParameter("unknown dataset kind '" + dkind + "'");
      }
      std::cout << "wrote " << out << "\n";
    } else if (*degrade) {
      ScaleMode m;
      if (mode == "min_side") m = ScaleMode::min_side;
      else if (mode == "geometric_mean") m = ScaleMode::geometric_mean;
      else throw InvalidParameter("unknown scale mode '" + mode + "'");
      write_pnm(degrade_eval(read_pnm(in_path), load_kernel(kernel_path), canonical, scale, m), out);
      std::cout << "wrote " << out << "\n";
    } else if (*trn) {
      const auto cfg = experiment_from(config_path, seed_override(trn));
      const auto data = load_dataset(fs::path(data_dir) / "train");
      auto r = train(cfg.make_architecture(), data, BlurDistribution::sharp_only(), cfg.pretrain, cfg.pretrain_pipeline,
                     [](int e, double loss) { log_line("epoch " + std::to_string(e) + " loss " + format_value(loss, 4)); });
      save_checkpoint(r.model, out);
      std::cout << "wrote " << out << "\n";
    } else if (*ft) {
      const auto cfg = experiment_from(config_path, seed_override(ft));
      const FinetuneSetting* s = nullptr;
      for (const auto& x : cfg.settings)
        if (x.name == setting) s = &x;
      if (!s) throw ConfigError("no fine-tune setting named '" + setting + "'");
      const auto arch = cfg.make_architecture();
      auto model = load_checkpoint<float>(model_path, &arch);
      const auto data = load_dataset(fs::path(data_dir) / "train");
      TrainSchedule sched = cfg.finetune;
      sched.seed = derive_seed(cfg.finetune.seed, {hash_label(s->name)});
      auto r = finetune(std::move(model), data, cfg.distribution(s->mix), sched, cfg.finetune_pipeline,
                        [](int e, double loss) { log_line("epoch " + std::to_string(e) + " loss " + format_value(loss, 4)); });
      save_checkpoint(r.model, out);
      std::cout << "wrote " << out << "\n";
    } else if (*ev) {
      const auto cfg = experiment_from(config_path, seed_override(ev));
      const auto arch = cfg.make_architecture();
      const auto model = load_checkpoint<float>(model_path, &arch);
      const auto data = load_dataset(fs::path(data_dir) / "val");
      const EvalScale es = parse_eval_scale(scales_text);
      const auto preds = evaluate(model, data, cfg.kernel(condition), cfg.canonical, es.scales, cfg.crop);
      std::vector<int> labels;
      for (const auto& d : data) labels.push_back(d.label);
      const std::vector<std::pair<std::string, double>> rows{
          {"top1", topk_accuracy(preds, labels, 1)},
          {"top5", topk_accuracy(preds, labels, std::min(5, arch.num_classes()))},
          {"entropy", mean_entropy(preds)},
          {"cross_entropy", mean_true_cross_entropy(preds, labels)}};
      const std::string cond = condition + "@" + es.label;
      std::ostringstream csv;
      write_csv_row(csv, {"metric", "condition", "value"});
      for (const auto& [k, v] : rows) write_csv_row(csv, {k, cond, format_value(v)});
      std::cout << csv.str();
      if (!out.empty()) std::ofstream(out, std::ios::binary) << csv.str();
    } else if (*inv) {
      const auto model = load_checkpoint<float>(model_path);
      const Image img = read_pnm(in_path);
      const Image sharp = degrade_eval(img, delta_kernel(), canonical, scale);
      const Image blurred = degrade_eval(img, load_kernel(kernel_path), canonical, scale);
      const auto map = hamming_invariance_map(model, sharp, blurred);
      fs::create_directories(out);
      for (std::size_t t = 0; t < map.tap_names.size(); ++t) {
        write_pnm(quantize8(map.resized[t]), (fs::path(out) / (map.tap_names[t] + ".pgm")).string());
        std::cout << map.tap_names[t] << " " << format_value(map.tap_means[t]) << "\n";
      }
    } else if (*rep) {
      const Report r = load_report_grid(in_path);
      const auto written = emit_plots(r, out.empty() ? fs::path(in_path) : fs::path(out));
      if (written.empty()) log_line("warning: report is empty; no plots written");
      for (const auto& p : written) std::cout << "wrote " << p.string() << "\n";
    } else if (*run) {
      const auto cfg = experiment_from(config_path, seed_override(run));
      const Report r = run_experiment(cfg, out.empty() ? fs::path(cfg.out) : fs::path(out), log_line);
      if (r.empty()) log_line("warning: report is empty");
      if (r.failed()) {
        log_line("one or more stages failed; see manifest.txt");
        return kRuntimeError;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
