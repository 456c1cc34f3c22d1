// Acceptance runner: one PASS/FAIL line per criterion, with the underlying
// checks listed beneath it. Pass criterion numbers as arguments to run a
// subset. Exit status is 0 iff every selected criterion passes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "gpd/gpd.hpp"

namespace fs = std::filesystem;
using namespace gpd;

namespace {

struct Criterion {
  int id;
  const char* title;
  double budget_s;
  std::function<Report()> run;
};

// The toy GPD* setup: convnet-small on the synthetic dataset (K=10, 5k train,
// 1k eval), r=2, M=2, 15 epochs.
TrainConfig toy_config(Protocol protocol, std::uint64_t seed, const fs::path& out) {
  TrainConfig cfg = default_train_config();
  cfg.protocol = protocol;
  cfg.seed = seed;
  cfg.epochs = 15;
  cfg.plan.ratio = 2;
  cfg.plan.branches = 2;
  cfg.plan.epsilon = 0.0;
  cfg.data.classes = 10;
  cfg.data.train_per_class = 500;
  cfg.data.eval_per_class = 100;
  cfg.out_dir = out.string();
  return cfg;
}

struct ToyRuns {
  fs::path root;
  std::optional<DatasetPair> data;
  std::vector<std::vector<TrainRecord>> gpd, baseline;

  const DatasetPair& dataset() {
    if (!data) data = load_dataset(toy_config(Protocol::scratch, 0, {}).data);
    return *data;
  }

  std::vector<TrainRecord> run(Protocol p, std::uint64_t seed, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    auto res = train(toy_config(p, seed, out), dataset());
    const auto& last = res.records.back();
    std::printf("       %-8s seed %llu: acc_s %.3f acc_t %.3f (%.0fs)\n", to_string(p),
                static_cast<unsigned long long>(seed), last.acc_s, last.acc_t,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::fflush(stdout);
    return res.records;
  }
};

Report gap_behavior(ToyRuns& runs) {
  Report rep;
  for (std::uint64_t s = 0; s < 5; ++s) {
    runs.gpd.push_back(runs.run(Protocol::scratch, s, runs.root / ("scratch" + std::to_string(s))));
    const auto& rec = runs.gpd.back();
    const auto g = track_gap(rec);
    const std::string tag = "seed " + std::to_string(s);
    rep.add_exact("gap.epoch0_is_zero " + tag, std::abs(rec.front().gap),
                  "acc_s=" + format_double(rec.front().acc_s) + " acc_t=" + format_double(rec.front().acc_t));
    rep.add_exact("gap.fraction_nonnegative " + tag, std::max(0.0, 0.8 - g.fraction_nonnegative),
                  "fraction " + format_double(g.fraction_nonnegative) + " (need >= 0.8)");
  }
  return rep;
}

Report gpd_benefit(ToyRuns& runs) {
  Report rep;
  for (std::uint64_t s = runs.gpd.size(); s < 5; ++s) {
    runs.gpd.push_back(runs.run(Protocol::scratch, s, runs.root / ("scratch" + std::to_string(s))));
  }
  double mean_gpd = 0.0, mean_base = 0.0;
  std::size_t wins = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    runs.baseline.push_back(runs.run(Protocol::baseline, s, runs.root / ("baseline" + std::to_string(s))));
    const double a = runs.gpd[s].back().acc_s, b = runs.baseline[s].back().acc_s;
    mean_gpd += a / 5.0;
    mean_base += b / 5.0;
    if (a > b) ++wins;
  }
  rep.add_exact("benefit.mean_student_acc", std::max(0.0, (mean_base - 0.005) - mean_gpd),
                "GPD* " + format_double(mean_gpd) + " vs baseline " + format_double(mean_base));
  rep.add_exact("benefit.seeds_strictly_better", wins >= 3 ? 0.0 : static_cast<double>(3 - wins),
                std::to_string(wins) + "/5 (need >= 3)");
  return rep;
}

Report determinism(ToyRuns& runs) {
  Report rep;
  const auto a = runs.root / "scratch0";
  const auto b = runs.root / "scratch0_repeat";
  if (!fs::exists(a / "records.csv")) runs.run(Protocol::scratch, 0, a);
  runs.run(Protocol::scratch, 0, b);
  for (const char* f : {"records.csv", "teacher.ckpt", "student.ckpt"}) {
    const auto x = read_file(a / f), y = read_file(b / f);
    rep.add_exact(std::string("determinism.byte_identical ") + f, x == y ? 0.0 : 1.0,
                  std::to_string(x.size()) + " vs " + std::to_string(y.size()) + " bytes");
  }
  return rep;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  ToyRuns runs;
  runs.root = fs::temp_directory_path() / "gpd_acceptance";
  fs::remove_all(runs.root);
  fs::create_directories(runs.root);

  const std::vector<Criterion> criteria = {
      {1, "IR function preservation, BN-free, paper mode", 60,
       [] {
         auto r = verify_scalar_chain();
         r.append(verify_ir_preservation(false, 120));
         return r;
       }},
      {2, "IR preservation with BN, bn_safe mode, eval", 60, [] { return verify_ir_preservation(true, 120); }},
      {3, "CBR inverse at init, r in {2,3}, M in {1,2,6}", 10, [] { return verify_cbr_inverse(); }},
      {4, "branch-merge soundness at arbitrary weights", 60, [] { return verify_merge_soundness(100); }},
      {5, "gradients vs central finite differences", 120,
       [] {
         auto r = verify_op_gradients();
         r.append(verify_pullback_gradients());
         return r;
       }},
      {6, "shared train_step vs two-model oracle, 10 steps", 60, [] { return verify_shared_step(10); }},
      {7, "stop-gradient contract", 10,
       [] {
         Report r;
         for (const auto& c : verify_stop_gradient().checks)
           if (c.name.rfind("stopgrad.", 0) == 0) r.checks.push_back(c);
         return r;
       }},
      {8, "BN statistics isolation over 100 steps", 60, [] { return verify_bn_isolation(100); }},
      {9, "gap behavior, scratch GPD*, seeds 0..4", 600, [&] { return gap_behavior(runs); }},
      {10, "GPD* student vs CE-only baseline, seeds 0..4", 1200, [&] { return gpd_benefit(runs); }},
      {11, "determinism of a repeated seed-0 run", 600, [&] { return determinism(runs); }},
  };

  std::size_t failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Report rep;
    std::string error;
    try {
      rep = c.run();
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs <= c.budget_s;
    const bool ok = error.empty() && rep.passed() && !rep.checks.empty() && in_budget;
    if (!ok) ++failed;
    std::printf("%s  criterion %2d  %-48s %7.1fs (budget %.0fs)\n", ok ? "PASS" : "FAIL", c.id, c.title, secs,
                c.budget_s);
    for (const auto& r : rep.checks) {
      std::printf("       %-4s %-46s dev=%.3e tol=%.1e%s%s\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.deviation,
                  r.tolerance, r.detail.empty() ? "" : "  ", r.detail.c_str());
    }
    if (!error.empty()) std::printf("       error: %s\n", error.c_str());
    if (!in_budget) std::printf("       over the runtime budget\n");
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", ran - failed, ran);
  fs::remove_all(runs.root);
  return failed == 0 ? 0 : 1;
}
