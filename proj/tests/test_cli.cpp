#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "blurlab/blurlab.hpp"

using namespace blurlab;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("blurlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) const {
    const std::string cmd = std::string("\"") + BLURLAB_CLI + "\" " + args + " > \"" + (dir_ / "stdout").string() +
                            "\" 2> \"" + (dir_ / "stderr").string() + "\"";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout");
    r.err = slurp(dir_ / "stderr");
    return r;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

const std::string kSmoke = std::string(BLURLAB_SOURCE_DIR) + "/configs/smoke.cfg";

}  // namespace

TEST_F(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("run"), std::string::npos);
  EXPECT_EQ(run("kernel gen --help").code, 0);
}

TEST_F(Cli, UnknownFlagSuggestsNearest) {
  const auto r = run("kernel gen --kind disk --radus 2 --out " + path("k.psf"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("did you mean --radius"), std::string::npos) << r.err;
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("kernel gen --kind disk").code, 1);  // missing --out
}

TEST_F(Cli, KernelGenWritesValidPsf) {
  ASSERT_EQ(run("kernel gen --kind disk --radius 2 --out " + path("k.psf")).code, 0);
  const Kernel k = load_kernel(path("k.psf"));
  EXPECT_NO_THROW(check_kernel(k));
  EXPECT_EQ(k.width, 5);
  EXPECT_EQ(k.nonzero_count(), 13);
  const auto show = run("kernel show --in " + path("k.psf"));
  EXPECT_EQ(show.code, 0);
  EXPECT_NE(show.out.find("disk"), std::string::npos);
  EXPECT_EQ(run("kernel gen --kind disk --radius -1 --out " + path("bad.psf")).code, 2);
  EXPECT_EQ(run("kernel show --in " + path("missing.psf")).code, 2);
}

TEST_F(Cli, DegradeMatchesLibrary) {
  Image img(96, 96);
  Rng rng(4);
  for (double& v : img.values) v = to_code(rng.uniform()) / 255.0;
  write_pnm(img, path("in.pgm"));
  ASSERT_EQ(run("kernel gen --kind disk --radius 3 --out " + path("k.psf")).code, 0);
  ASSERT_EQ(run("degrade --in " + path("in.pgm") + " --kernel " + path("k.psf") + " --scale 64 --out " +
                path("out.pgm"))
                .code,
            0);
  const Image got = read_pnm(path("out.pgm"));
  // PGM output stores 8-bit codes.
  const Image want = quantize8(degrade_eval(img, disk_kernel(3), 96, 64));
  EXPECT_EQ(got, want);
}

TEST_F(Cli, RuntimeErrorsExitTwo) {
  std::ofstream(path("broken.cfg")) << "[experiment]\nseed = 1\n[bogus]\n";
  const auto r = run("run --config " + path("broken.cfg") + " --out " + path("rep"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown section [bogus]"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(path("rep")));
}

TEST_F(Cli, SmokeRunIsDeterministic) {
  ASSERT_EQ(run("run --config " + kSmoke + " --out " + path("a")).code, 0);
  ASSERT_EQ(run("run --config " + kSmoke + " --out " + path("b")).code, 0);
  for (const char* f : {"accuracy_grid.csv", "entropy.csv", "scale.csv", "invariance.csv", "miou.csv", "metrics.csv"}) {
    const std::string a = slurp(dir_ / "a" / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, slurp(dir_ / "b" / f)) << f;
  }
  EXPECT_NE(slurp(dir_ / "a" / "accuracy_grid.csv"), "");
  // A different seed gives a different experiment.
  ASSERT_EQ(run("run --config " + kSmoke + " --seed 99 --out " + path("c")).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "accuracy_grid.csv"), slurp(dir_ / "c" / "accuracy_grid.csv"));
  // Plots can be redrawn from the tables alone.
  ASSERT_EQ(run("report --in " + path("a") + " --out " + path("plots")).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "plots" / "plots" / "accuracy_64.ppm"));
}

TEST_F(Cli, StagewiseCommandsChain) {
  ASSERT_EQ(run("dataset gen --kind shapestex --train 60 --val 30 --seed 5 --out " + path("data")).code, 0);
  EXPECT_EQ(load_dataset(dir_ / "data" / "train").size(), 60u);
  ASSERT_EQ(run("train --config " + kSmoke + " --data " + path("data") + " --out " + path("base.ckpt")).code, 0);
  ASSERT_EQ(run("finetune --config " + kSmoke + " --model " + path("base.ckpt") + " --data " + path("data") +
                " --setting mixed --out " + path("mixed.ckpt"))
                .code,
            0);
  const auto ev = run("eval --config " + kSmoke + " --model " + path("mixed.ckpt") + " --data " + path("data") +
                      " --condition D2 --scale 64+80 --out " + path("eval.csv"));
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(slurp(path("eval.csv")).find("D2"), std::string::npos);
  EXPECT_EQ(run("finetune --config " + kSmoke + " --model " + path("base.ckpt") + " --data " + path("data") +
                " --setting nope --out " + path("x.ckpt"))
                .code,
            2);
}
