// Acceptance run: prints one PASS/FAIL line per criterion.
//
//   acceptance --work DIR [--report DIR] [--strict]
//
// Criteria 1-4 run in-process. Criterion 5 runs the smoke config twice
// through the CLI. Criteria 6-12 run the shipped default config once through
// the CLI (or read an existing report given with --report) and check the
// CSV tables it wrote.
//
// Exit status is 1 when a criterion fails, except for the criteria listed in
// kKnownFailures, which are still printed as FAIL; --strict counts those too.
// A criterion from that list that starts passing also exits 1, so the list
// has to be kept honest.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "blurlab/blurlab.hpp"
#include "oracles.hpp"

using namespace blurlab;
namespace fs = std::filesystem;

namespace {

// 7: the mixed fine-tuned entropy ratio stays far above 1.25.
// 10: mixed fine-tuning raises the deep-tap Hamming distance instead of
// lowering it. Both are discussed in the README.
const std::set<int> kKnownFailures{7, 10};

// Pinned tolerances.
constexpr double kKernelSumTol = 1e-9;
constexpr double kFftTol = 1e-6;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-4;
constexpr double kBaselineDropMin = 0.20;
constexpr double kEntropyRatioBaselineMin = 1.5;
constexpr double kEntropyRatioFinetunedMax = 1.25;
constexpr double kRecoveryMin = 0.60;
constexpr double kSharpCostMax = 0.02;
constexpr double kShakeGainMin = 0.05;
constexpr double kD4OnlySharpLossMin = 0.20;
constexpr double kHammingReductionMin = 0.30;
constexpr double kWallSecondsMax = 1800.0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, bool> g_results;

void report(int id, const std::string& title, const Outcome& o) {
  g_results[id] = o.pass;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << title << ": " << o.detail
            << (!o.pass && kKnownFailures.count(id) ? " (known)" : "") << std::endl;
}

void guarded(int id, const std::string& title, const std::function<Outcome()>& fn) {
  try {
    report(id, title, fn());
  } catch (const std::exception& e) {
    report(id, title, {false, std::string("error: ") + e.what()});
  }
}

// --- 1: kernel invariants -------------------------------------------------

Outcome kernel_invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  int bad = 0;
  std::string first;
  for (int family = 0; family < oracle::kFamilies; ++family)
    for (int i = 0; i < 1000; ++i) {
      const Kernel k = oracle::random_kernel(rng, family);
      const std::string why = oracle::kernel_violation(k, family);
      double sum = 0.0;
      for (double w : k.weights) sum += w;
      if (!why.empty() || std::abs(sum - 1.0) > kKernelSumTol) {
        if (first.empty()) first = std::string(oracle::family_name(family)) + ": " + (why.empty() ? "sum" : why);
        ++bad;
      }
    }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 10.0, "5x1000 kernels, " + std::to_string(bad) + " violations" +
                                       (first.empty() ? "" : " (" + first + ")") + ", " + fmt("%.2f s", secs)};
}

// --- 2: FFT vs direct -----------------------------------------------------

Outcome fft_vs_direct() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Kernel k = oracle::random_kernel(rng, i % oracle::kFamilies);
    const int h = std::max(k.height, 16 + static_cast<int>(rng.below(49)));
    const int w = std::max(k.width, 16 + static_cast<int>(rng.below(49)));
    const Image img = oracle::random_image(rng, h, w);
    worst = std::max(worst, oracle::max_abs_diff(convolve(img, k, ConvMethod::fft), convolve(img, k, ConvMethod::direct)));
  }
  const double secs = seconds_since(t0);
  return {worst < kFftTol && secs < 30.0, "100 pairs, max abs diff " + fmt("%.3g", worst) + ", " + fmt("%.2f s", secs)};
}

// --- 3: gradient check ----------------------------------------------------

double micro_loss(const Network<double>& net, const std::vector<double>& x, int batch, const std::vector<int>& y) {
  ForwardState<double> st;
  forward(net, std::span<const double>(x), batch, net.architecture().input, st, false);
  const auto& z = st.values.back();
  const int k = st.output_shape().channels;
  double loss = 0.0;
  for (int n = 0; n < batch; ++n) {
    long double m = z[n * k], s = 0;
    for (int j = 1; j < k; ++j) m = std::max<long double>(m, z[n * k + j]);
    for (int j = 0; j < k; ++j) s += std::exp(z[n * k + j] - m);
    loss += static_cast<double>(m + std::log(s) - z[n * k + y[n]]);
  }
  return loss / batch;
}

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const Architecture arch = Architecture::parse(
      "input 1x8x8 | conv3x3 3 | relu | maxpool2 | conv3x3 4 | relu | maxpool2 | conv3x3 3 | relu | maxpool2 | "
      "flatten | fc 5 | relu | fc 2 | softmax");
  Network<double> net = Network<double>::initialized(arch, 303);
  Rng rng(304);
  for (const auto& b : net.blocks())
    for (std::size_t i = 0; i < b.bias_count; ++i) net.params()[b.bias_offset + i] = rng.uniform(-0.3, 0.3);
  const int batch = 4;
  std::vector<double> x(64 * batch);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  const std::vector<int> y{0, 1, 1, 0};
  ForwardState<double> st;
  forward(net, std::span<const double>(x), batch, arch.input, st, true);
  std::vector<double> g(net.param_count(), 0.0);
  backward(net, st, std::span<const int>(y), 1.0 / batch, std::span<double>(g));
  double worst = 0.0;
  for (std::size_t i = 0; i < net.param_count(); ++i) {
    Network<double> plus = net, minus = net;
    plus.params()[i] += kGradStep;
    minus.params()[i] -= kGradStep;
    const double fd = (micro_loss(plus, x, batch, y) - micro_loss(minus, x, batch, y)) / (2 * kGradStep);
    worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
  }
  const double secs = seconds_since(t0);
  return {worst < kGradRelTol && secs < 60.0, std::to_string(net.param_count()) + " parameters, worst relative error " +
                                                  fmt("%.3g", worst) + ", " + fmt("%.2f s", secs)};
}

// --- 4: metric oracles ----------------------------------------------------

LabelGrid grid_from(int h, int w, const std::function<int(int, int)>& f) {
  LabelGrid g(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.at(y, x) = f(y, x);
  return g;
}

std::vector<std::uint8_t> brute_band(const LabelGrid& gt, double d) {
  std::vector<std::pair<int, int>> boundary;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      for (int n = 0; n < 4; ++n) {
        const int yy = y + dy[n], xx = x + dx[n];
        if (yy >= 0 && yy < gt.height && xx >= 0 && xx < gt.width && gt.at(yy, xx) != gt.at(y, x)) {
          boundary.emplace_back(y, x);
          break;
        }
      }
    }
  std::vector<std::uint8_t> band(gt.labels.size(), 0);
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x)
      for (auto [by, bx] : boundary)
        if ((y - by) * (y - by) + (x - bx) * (x - bx) <= d * d) band[y * gt.width + x] = 1;
  return band;
}

Outcome metric_oracles() {
  std::vector<std::string> failures;
  const auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  {
    const std::vector<ClassDistribution> preds{{{0.5, 0.3, 0.2}}, {{0.1, 0.2, 0.7}}};
    const std::vector<int> labels{1, 0};
    check(topk_accuracy(preds, labels, 2) == 0.5, "top-2 example");
    check(topk_accuracy(preds, labels, 1) == 0.0, "top-1 example");
    check(topk_accuracy(preds, labels, 3) == 1.0, "top-3 example");
  }
  {
    const std::vector<LabelGrid> gt{grid_from(4, 4, [](int, int x) { return x < 2 ? 1 : 0; })};
    const std::vector<LabelGrid> pred{grid_from(4, 4, [](int y, int) { return y < 2 ? 1 : 0; })};
    check(miou(pred, gt, 2) == 1.0 / 3.0, "4x4 mIoU");
  }
  {
    const LabelGrid edge = grid_from(16, 16, [](int, int x) { return x < 8 ? 0 : 1; });
    const auto band = boundary_band(edge, 4);
    bool cols = true;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) cols = cols && band[y * 16 + x] == ((x >= 3 && x <= 12) ? 1 : 0);
    check(cols, "16x16 vertical edge band columns");
    check(band == brute_band(edge, 4), "16x16 vertical edge band brute force");
  }
  {
    const std::vector<LabelGrid> gt{grid_from(8, 8, [](int, int x) { return x < 4 ? 0 : 1; })};
    const std::vector<LabelGrid> pred{grid_from(8, 8, [](int, int x) { return x < 5 ? 0 : 1; })};
    const auto b = boundary_miou(pred, gt, 2, 1.0);
    check(b.has_value() && *b == (16.0 / 24.0 + 8.0 / 16.0) / 2.0, "8x8 boundary mIoU");
    check(miou(pred, gt, 2) == (32.0 / 40.0 + 24.0 / 32.0) / 2.0, "8x8 mIoU");
  }
  {
    Rng rng(404);
    for (int t = 0; t < 50; ++t) {
      const int h = 6 + static_cast<int>(rng.below(20)), w = 6 + static_cast<int>(rng.below(20));
      LabelGrid g(h, w, 0);
      for (int r = 0; r < 3; ++r) {
        const int y0 = static_cast<int>(rng.below(h)), x0 = static_cast<int>(rng.below(w));
        const int c = static_cast<int>(rng.below(3));
        for (int y = y0; y < std::min(h, y0 + 1 + static_cast<int>(rng.below(h / 2))); ++y)
          for (int x = x0; x < std::min(w, x0 + 1 + static_cast<int>(rng.below(w / 2))); ++x) g.at(y, x) = c;
      }
      const double d = rng.uniform(0.0, 6.0);
      if (boundary_band(g, d) != brute_band(g, d)) {
        failures.push_back("random band brute force");
        break;
      }
    }
  }
  std::string detail = failures.empty() ? "all examples exact" : "mismatch:";
  for (const auto& f : failures) detail += " [" + f + "]";
  return {failures.empty(), detail};
}

// --- CLI and CSV helpers --------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + BLURLAB_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error(p.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(is), {}};
}

// Rows of a CSV written by the library (no quoted fields), keyed by header.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::istringstream is(slurp(p));
  std::string line;
  std::getline(is, line);
  const auto header = split_list(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_list(line);
    if (f.size() != header.size()) throw std::runtime_error(p.string() + ": bad row '" + line + "'");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

class Tables {
 public:
  explicit Tables(const fs::path& dir)
      : grid_(read_csv(dir / "accuracy_grid.csv")),
        entropy_(read_csv(dir / "entropy.csv")),
        invariance_(read_csv(dir / "invariance.csv")),
        miou_(read_csv(dir / "miou.csv")) {}

  double top1(const std::string& model, const std::string& cond, const std::string& scale) const {
    return value(grid_, {{"model", model}, {"condition", cond}, {"scale", scale}}, "top1");
  }
  double entropy(const std::string& model, const std::string& cond, const std::string& scale) const {
    return value(entropy_, {{"model", model}, {"condition", cond}, {"scale", scale}}, "entropy");
  }
  double hamming(const std::string& model, const std::string& tap) const {
    return value(invariance_, {{"model", model}, {"tap", tap}}, "mean_hamming");
  }
  double boundary_miou(const std::string& head, const std::string& cond) const {
    return value(miou_, {{"head", head}, {"condition", cond}}, "boundary_miou");
  }
  std::vector<std::string> taps(const std::string& model) const {
    std::vector<std::string> out;
    for (const auto& r : invariance_)
      if (r.at("model") == model) out.push_back(r.at("tap"));
    return out;
  }

 private:
  using Rows = std::vector<std::map<std::string, std::string>>;

  static double value(const Rows& rows, const std::map<std::string, std::string>& key, const std::string& column) {
    for (const auto& r : rows) {
      bool match = true;
      for (const auto& [k, v] : key) match = match && r.at(k) == v;
      if (!match) continue;
      const auto v = parse_number<double>(r.at(column));
      if (!v) throw std::runtime_error("cell " + describe(key) + " is '" + r.at(column) + "'");
      return *v;
    }
    throw std::runtime_error("no row for " + describe(key));
  }

  static std::string describe(const std::map<std::string, std::string>& key) {
    std::string s;
    for (const auto& [k, v] : key) s += (s.empty() ? "" : ",") + k + "=" + v;
    return s;
  }

  Rows grid_, entropy_, invariance_, miou_;
};

double manifest_total_seconds(const fs::path& dir) {
  std::istringstream is(slurp(dir / "manifest.txt"));
  std::string line;
  while (std::getline(is, line))
    if (line.starts_with("total ")) {
      std::string v = line.substr(6);
      if (!v.empty() && v.back() == 's') v.pop_back();
      if (const auto d = parse_number<double>(v)) return *d;
    }
  throw std::runtime_error("manifest has no total line");
}

// Model, head and condition names from configs/default.cfg.
const std::string kBase = "baseline";
const std::string kMixed = "sharp+D1..D4";
const std::string kSharpOnly = "sharp-only";
const std::string kShake = "sharp+shake";
const std::string kD4Only = "D4-only";
const std::vector<std::string> kDefocus{"sharp", "D1", "D2", "D3", "D4"};
const std::string kSmall = "64";
const std::string kLarge = "128";

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "blurlab-acceptance";
  std::optional<fs::path> existing;
  bool strict = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) work = argv[++i];
    else if (a == "--report" && i + 1 < argc) existing = fs::path(argv[++i]);
    else if (a == "--strict") strict = true;
    else {
      std::cerr << "usage: acceptance [--work DIR] [--report DIR] [--strict]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  const std::string source = BLURLAB_SOURCE_DIR;

  guarded(1, "kernel invariants", kernel_invariants);
  guarded(2, "FFT matches direct convolution", fft_vs_direct);
  guarded(3, "analytic gradients match finite differences", gradient_check);
  guarded(4, "metric oracles", metric_oracles);

  guarded(5, "byte-identical CSV reports across runs", [&]() -> Outcome {
    const std::string cfg = source + "/configs/smoke.cfg";
    for (const char* name : {"a", "b"}) {
      const int code = run_cli("run --config \"" + cfg + "\" --out \"" + (work / "smoke" / name).string() + "\"",
                               work / ("smoke-" + std::string(name) + ".log"));
      if (code != 0) return {false, "smoke run exited " + std::to_string(code)};
    }
    int compared = 0;
    std::string differ;
    for (const auto& e : fs::directory_iterator(work / "smoke" / "a")) {
      if (e.path().extension() != ".csv") continue;
      ++compared;
      if (slurp(e.path()) != slurp(work / "smoke" / "b" / e.path().filename())) differ += " " + e.path().filename().string();
    }
    return {compared == 6 && differ.empty(),
            std::to_string(compared) + " CSV files compared" + (differ.empty() ? ", identical" : ", differ:" + differ)};
  });

  fs::path report_dir;
  std::optional<double> wall;
  if (existing) {
    report_dir = *existing;
  } else {
    report_dir = work / "default";
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_cli("run --config \"" + source + "/configs/default.cfg\" --out \"" + report_dir.string() + "\"",
                             work / "default.log");
    wall = seconds_since(t0);
    if (code != 0) std::cerr << "default run exited " << code << "; see " << (work / "default.log").string() << "\n";
  }

  std::optional<Tables> tables;
  std::string load_error;
  try {
    tables.emplace(report_dir);
  } catch (const std::exception& e) {
    load_error = e.what();
  }
  const auto with_tables = [&](const std::function<Outcome(const Tables&)>& fn) {
    return [&, fn]() -> Outcome {
      if (!tables) return {false, "report unavailable: " + load_error};
      return fn(*tables);
    };
  };

  guarded(6, "baseline accuracy falls strictly with defocus", with_tables([](const Tables& t) -> Outcome {
            std::string detail;
            bool strictly = true;
            double prev = 2.0;
            for (const auto& c : kDefocus) {
              const double v = t.top1(kBase, c, kSmall);
              strictly = strictly && v < prev;
              prev = v;
              detail += (detail.empty() ? "" : " > ") + c + " " + fmt("%.4f", v);
            }
            const double drop = t.top1(kBase, "sharp", kSmall) - t.top1(kBase, "D4", kSmall);
            return {strictly && drop >= kBaselineDropMin, detail + ", drop " + fmt("%.4f", drop)};
          }));

  guarded(7, "entropy ratio heavy/sharp", with_tables([](const Tables& t) -> Outcome {
            const double base = t.entropy(kBase, "D4", kSmall) / t.entropy(kBase, "sharp", kSmall);
            const double ft = t.entropy(kMixed, "D4", kSmall) / t.entropy(kMixed, "sharp", kSmall);
            return {base >= kEntropyRatioBaselineMin && ft < kEntropyRatioFinetunedMax,
                    "baseline " + fmt("%.3f", base) + " (need >= 1.5), mixed fine-tuned " + fmt("%.3f", ft) +
                        " (need < 1.25); entropies baseline " + fmt("%.4f", t.entropy(kBase, "sharp", kSmall)) + "/" +
                        fmt("%.4f", t.entropy(kBase, "D4", kSmall)) + ", mixed " +
                        fmt("%.4f", t.entropy(kMixed, "sharp", kSmall)) + "/" + fmt("%.4f", t.entropy(kMixed, "D4", kSmall))};
          }));

  guarded(8, "fine-tuning recovers blurred accuracy", with_tables([](const Tables& t) -> Outcome {
            const double bs = t.top1(kBase, "sharp", kSmall), bd = t.top1(kBase, "D4", kSmall);
            const double recovery = (t.top1(kMixed, "D4", kSmall) - bd) / (bs - bd);
            const double cost = bs - t.top1(kMixed, "sharp", kSmall);
            double base_def = 0.0, shake_def = 0.0;
            for (const char* c : {"D1", "D2", "D3", "D4"}) {
              base_def += t.top1(kBase, c, kSmall) / 4.0;
              shake_def += t.top1(kShake, c, kSmall) / 4.0;
            }
            const double d4_loss = bs - t.top1(kD4Only, "sharp", kSmall);
            const bool ok = recovery >= kRecoveryMin && cost <= kSharpCostMax && shake_def - base_def >= kShakeGainMin &&
                            d4_loss >= kD4OnlySharpLossMin;
            return {ok, "recovery " + fmt("%.3f", recovery) + ", sharp cost " + fmt("%.4f", cost) +
                            ", shake gain on D1-D4 " + fmt("%.4f", shake_def - base_def) + ", D4-only sharp loss " +
                            fmt("%.4f", d4_loss)};
          }));

  guarded(9, "larger scale degrades more under heavy blur", with_tables([](const Tables& t) -> Outcome {
            const double small = t.top1(kBase, "sharp", kSmall) - t.top1(kBase, "D4", kSmall);
            const double large = t.top1(kBase, "sharp", kLarge) - t.top1(kBase, "D4", kLarge);
            return {large > small, "D4 drop at " + kLarge + " " + fmt("%.4f", large) + ", at " + kSmall + " " + fmt("%.4f", small)};
          }));

  guarded(10, "invariance emerges in deep layers", with_tables([](const Tables& t) -> Outcome {
            const auto taps = t.taps(kBase);
            if (taps.size() < 2) return {false, "fewer than two taps"};
            const std::string first = taps.front(), deep = taps.back();
            const double bd = t.hamming(kBase, deep), md = t.hamming(kMixed, deep);
            const double bf = t.hamming(kBase, first), mf = t.hamming(kMixed, first);
            const double reduction = 1.0 - md / bd;
            return {reduction >= kHammingReductionMin && (bf - mf) < (bd - md),
                    deep + " baseline " + fmt("%.4f", bd) + " mixed " + fmt("%.4f", md) + " (reduction " +
                        fmt("%.3f", reduction) + "), " + first + " baseline " + fmt("%.4f", bf) + " mixed " +
                        fmt("%.4f", mf)};
          }));

  guarded(11, "boundary mIoU ordering", with_tables([](const Tables& t) -> Outcome {
            std::string detail = "sharp head";
            bool ok = true;
            double prev = 2.0;
            for (const auto& c : kDefocus) {
              const double v = t.boundary_miou("sharp", c);
              ok = ok && v < prev;
              prev = v;
              detail += " " + c + " " + fmt("%.4f", v);
            }
            detail += "; fine-tuned head";
            for (const auto& c : kDefocus) {
              const double v = t.boundary_miou("finetuned", c);
              if (c != "sharp") ok = ok && v > t.boundary_miou("sharp", c);
              detail += " " + c + " " + fmt("%.4f", v);
            }
            return {ok, detail};
          }));

  guarded(12, "default experiment under 30 minutes", [&]() -> Outcome {
    const double recorded = manifest_total_seconds(report_dir);
    const double secs = wall ? *wall : recorded;
    return {secs < kWallSecondsMax, fmt("%.1f s", secs) + (wall ? " wall clock" : " recorded in manifest") + " on " +
                                         std::to_string(worker_count()) + " worker thread(s)"};
  });

  int unexpected = 0;
  for (const auto& [id, pass] : g_results) {
    const bool known = kKnownFailures.count(id) > 0;
    if (!pass && (strict || !known)) ++unexpected;
    if (pass && known && !strict) {
      std::cout << "note: criterion " << id << " passes but is listed as a known failure\n";
      ++unexpected;
    }
  }
  const int passed = static_cast<int>(std::count_if(g_results.begin(), g_results.end(), [](auto& kv) { return kv.second; }));
  std::cout << passed << "/" << g_results.size() << " criteria pass" << std::endl;
  return unexpected == 0 ? 0 : 1;
}
