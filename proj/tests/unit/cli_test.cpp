#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>

#include "gpd/gpd.hpp"

using namespace gpd;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run gpd_cli(const std::string& args) {
  const std::string cmd = std::string(GPD_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path work_dir() {
  auto d = fs::temp_directory_path() / "gpd_cli_test";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Cli, ExpandThenExtractRecoversTheStudent) {
  const auto d = work_dir();
  const auto s = (d / "s.ckpt").string(), t = (d / "t.ckpt").string(), back = (d / "back.ckpt").string();
  ASSERT_EQ(gpd_cli("init --set data.input_shape=1,8,8 --seed 4 --out " + s).code, 0);
  const auto ex = gpd_cli("expand --in " + s + " --out " + t + " --ratio 2 --branches 3 --mode bn_safe --seed 1");
  EXPECT_EQ(ex.code, 0) << ex.out;
  ASSERT_EQ(gpd_cli("extract --in " + t + " --out " + back).code, 0);
  auto a = load(s), b = load(back);
  Rng rng = make_rng(4);
  const auto x = random_input(a, 8, rng);
  NoGradGuard guard;
  EXPECT_LT(max_abs_diff(forward(a, x, View::student, Mode::eval), forward(b, x, View::student, Mode::eval)), 1e-12);
  EXPECT_EQ(load(t).meta.branches, 3u);
}

TEST(Cli, ExitCodes) {
  const auto d = work_dir();
  EXPECT_EQ(gpd_cli("--help").code, 0);
  EXPECT_EQ(gpd_cli("no-such-command").code, 1);
  EXPECT_EQ(gpd_cli("config show --set no_such_key=1").code, 1);
  EXPECT_EQ(gpd_cli("verify bogus").code, 1);
  const auto bad = (d / "bad.ckpt").string();
  write_file_atomic(bad, "not a checkpoint");
  EXPECT_EQ(gpd_cli("extract --in " + bad + " --out " + (d / "x.ckpt").string()).code, 1);
  const auto s = (d / "bn.ckpt").string();
  ASSERT_EQ(gpd_cli("init --set data.input_shape=1,8,8 --out " + s).code, 0);
  EXPECT_EQ(gpd_cli("expand --in " + s + " --out " + (d / "y.ckpt").string() + " --mode paper").code, 1);
}

TEST(Cli, ConfigShowAppliesSeedPrecedence) {
  const auto cfg = work_dir() / "seed.cfg";
  write_file_atomic(cfg, "seed = 3\n");
  const auto show = [&](const std::string& extra) { return gpd_cli("config show --config " + cfg.string() + extra).out; };
  EXPECT_NE(show("").find("seed = 3"), std::string::npos);
  EXPECT_NE(show(" --seed 9").find("seed = 9"), std::string::npos);
  const auto defaults = gpd_cli("config print-defaults --no-help");
  EXPECT_EQ(defaults.code, 0);
  EXPECT_EQ(defaults.out, print_config(default_train_config(), false));
}

TEST(Cli, VerifySuitePasses) {
  const auto r = gpd_cli("verify cbr");
  EXPECT_EQ(r.code, 0) << r.out;
}
