// gpd: expand, extract, train, evaluate, verify, and plot.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 a verification
// report exceeded its tolerance.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gpd/gpd.hpp"

namespace {

using namespace gpd;

constexpr int kVerifyFailed = 2;

TrainConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig cfg = default_train_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    cfg = parse_config(in, path);
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

// Config seed, then GPD_SEED, then --seed.
void resolve_seed(TrainConfig& cfg, const std::optional<std::uint64_t>& flag) {
  apply_seed_env(cfg);
  if (flag) cfg.seed = *flag;
}

std::uint64_t seed_or_env(const std::optional<std::uint64_t>& flag) {
  TrainConfig c;
  resolve_seed(c, flag);
  return c.seed;
}

int cmd_init(const std::string& config, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
             const std::string& out) {
  auto cfg = load_run_config(config, sets);
  resolve_seed(cfg, seed);
  ArchConfig a = cfg.arch;
  a.seed = cfg.seed;
  a.input_shape = cfg.data.input_shape;
  a.num_classes = cfg.data.classes;
  const auto m = build_student(a);
  save(m, out);
  std::printf("wrote %s: %s, %zu parameters, seed %llu\n", out.c_str(), m.meta.arch.c_str(), m.parameter_count(),
              static_cast<unsigned long long>(cfg.seed));
  return 0;
}

int cmd_expand(const std::string& in, const std::string& out, std::size_t ratio, std::size_t branches, double epsilon,
               const std::string& mode, std::optional<std::uint64_t> seed, std::size_t probes) {
  auto student = load(in);
  if (!student.is_plain()) throw ConfigError(in + " is already expanded (r=" + std::to_string(student.meta.ratio) +
                                             ", M=" + std::to_string(student.meta.branches) + ")");
  const ExpansionPlan plan{ratio, branches, epsilon, parse_ir_mode(mode), seed_or_env(seed)};
  auto teacher = expand_model(student, plan);
  save(teacher, out);

  Rng rng = make_rng(plan.seed, 0xE0);
  const auto x = random_input(student, probes, rng);
  NoGradGuard guard;
  const auto ys = forward(student, x, View::student, Mode::eval);
  const double dev_t = max_abs_diff(ys, forward(teacher, x, View::teacher, Mode::eval));
  const double dev_s = max_abs_diff(ys, forward(teacher, x, View::student, Mode::eval));
  std::printf("wrote %s: r=%zu M=%zu epsilon=%g mode=%s, %zu -> %zu parameters\n", out.c_str(), ratio, branches,
              epsilon, mode.c_str(), student.parameter_count(), teacher.parameter_count());
  Report rep;
  // With noise both views are only approximately preserved; the bound is
  // enforced for exact expansions.
  const bool exact = epsilon == 0.0;
  const char* note = exact ? "" : "epsilon > 0, informational";
  rep.add("expand.teacher_vs_input (" + std::to_string(probes) + " probes)", dev_t, exact ? 1e-9 : INFINITY, note);
  rep.add("expand.student_view_vs_input", dev_s, exact ? 1e-9 : INFINITY, note);
  rep.print(stdout);
  return rep.passed() ? 0 : kVerifyFailed;
}

int cmd_extract(const std::string& in, const std::string& out) {
  auto teacher = load(in);
  const auto student = materialize_student(teacher);
  save(student, out);
  std::printf("wrote %s: %zu parameters (from r=%zu M=%zu teacher)\n", out.c_str(), student.parameter_count(),
              teacher.meta.ratio, teacher.meta.branches);
  return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
              const std::string& out, bool quiet) {
  auto cfg = load_run_config(config, sets);
  resolve_seed(cfg, seed);
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
  const auto data = load_dataset(cfg.data);
  std::printf("protocol=%s arch=%s r=%zu M=%zu seed=%llu train=%zu eval=%zu\n", to_string(cfg.protocol),
              cfg.arch.name.c_str(), cfg.plan.ratio, cfg.plan.branches, static_cast<unsigned long long>(cfg.seed),
              data.train.size(), data.eval.size());
  TrainHooks hooks;
  if (!quiet) {
    hooks.on_epoch = [](const TrainRecord& r) {
      std::printf("epoch %3zu  total %.4f  acc_s %.4f  acc_t %.4f  gap %+.4f\n", r.epoch, r.loss.total, r.acc_s,
                  r.acc_t, r.gap);
      std::fflush(stdout);
    };
  }
  const auto res = train(cfg, data, hooks);
  const auto g = track_gap(res.records);
  std::printf("final acc_s %.4f acc_t %.4f gap %+.4f; gap >= 0 in %.3f of epochs\n", res.records.back().acc_s,
              res.records.back().acc_t, g.final_gap, g.fraction_nonnegative);
  if (!cfg.out_dir.empty()) std::printf("wrote %s/{records.csv,teacher.ckpt,student.ckpt}\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& config, const std::vector<std::string>& sets,
             const std::string& view) {
  auto model = load(ckpt);
  auto cfg = load_run_config(config, sets);
  const auto data = load_dataset(cfg.data);
  if (data.eval.image_shape != model.meta.input_shape) {
    throw ConfigError("dataset images do not match the checkpoint input shape");
  }
  auto run = [&](View v) {
    const auto r = evaluate(model, v, data.eval);
    std::printf("%-8s accuracy %.4f  mean_ce %.6f  (%zu samples)\n", to_string(v), r.accuracy, r.mean_ce,
                data.eval.size());
  };
  if (view == "both") {
    run(View::teacher);
    run(View::student);
  } else {
    run(parse_view(view));
  }
  return 0;
}

int cmd_verify(const std::string& suite, std::optional<std::uint64_t> seed) {
  const auto s = seed_or_env(seed);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_suite(suite, s);
  rep.print(stdout);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t failed = 0;
  for (const auto& c : rep.checks) failed += c.passed ? 0 : 1;
  std::printf("%s: %zu checks, %zu failed, seed %llu, %.1fs\n", suite.c_str(), rep.checks.size(), failed,
              static_cast<unsigned long long>(s), secs);
  return rep.passed() ? 0 : kVerifyFailed;
}

int cmd_plot(const std::string& records, const std::string& out) {
  std::ifstream in(records);
  if (!in) throw ConfigError("cannot open records '" + records + "'");
  const auto rows = parse_records(in, records);
  write_file_atomic(out, render_svg(rows));
  std::printf("wrote %s (%zu epochs)\n", out.c_str(), rows.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gap preserving distillation: expand, extract, train, evaluate, verify, plot"};
  app.require_subcommand(1);

  std::string config, in, out, view = "both", suite = "all", mode = "bn_safe";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::size_t ratio = 2, branches = 2, probes = 16;
  double epsilon = 0.0;
  bool quiet = false, no_help = false;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", config, "run configuration file (key = value)")->check(CLI::ExistingFile);
    c->add_option("--set", sets, "override one config key, as key=value (repeatable)");
  };

  auto* init = app.add_subcommand("init", "write a freshly initialized student checkpoint");
  add_config(init);
  init->add_option("--seed", seed, "initialization seed");
  init->add_option("--out", out, "output checkpoint")->required();

  auto* expand = app.add_subcommand("expand", "inverse-reparameterize a student into a dynamic teacher");
  expand->add_option("--in", in, "student checkpoint")->required()->check(CLI::ExistingFile);
  expand->add_option("--out", out, "teacher checkpoint")->required();
  expand->add_option("--ratio", ratio, "channel expansion ratio r")->capture_default_str();
  expand->add_option("--branches", branches, "branch count M")->capture_default_str();
  expand->add_option("--epsilon", epsilon, "replica noise relative to weight std")->capture_default_str();
  expand->add_option("--mode", mode, "paper | bn_safe")->capture_default_str();
  expand->add_option("--seed", seed, "noise and extra-branch seed");
  expand->add_option("--probes", probes, "probe inputs for the preservation report")->capture_default_str();

  auto* extract = app.add_subcommand("extract", "channel-branch reparameterize a teacher into a plain student");
  extract->add_option("--in", in, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  extract->add_option("--out", out, "student checkpoint")->required();

  auto* trainc = app.add_subcommand("train", "run a training protocol");
  add_config(trainc);
  trainc->add_option("--seed", seed, "run seed (overrides config and GPD_SEED)");
  trainc->add_option("--out", out, "output directory (overrides out_dir)");
  trainc->add_flag("--quiet", quiet, "no per-epoch lines");

  auto* eval = app.add_subcommand("eval", "accuracy and cross-entropy of a checkpoint on the eval split");
  eval->add_option("--ckpt", in, "checkpoint")->required()->check(CLI::ExistingFile);
  add_config(eval);
  eval->add_option("--view", view, "teacher | student | both")->capture_default_str();

  auto* verify = app.add_subcommand("verify", "run the numerical verification suites");
  verify->add_option("suite", suite, "ir | cbr | grad | algo1 | all")->capture_default_str();
  verify->add_option("--seed", seed, "base seed of the randomized batteries");

  auto* plot = app.add_subcommand("plot", "SVG chart of accuracy and gap per epoch");
  plot->add_option("records", in, "records.csv")->required();
  plot->add_option("--out", out, "output SVG")->required();

  auto* configc = app.add_subcommand("config", "configuration utilities");
  configc->require_subcommand(1);
  auto* defaults = configc->add_subcommand("print-defaults", "print every key with its default");
  defaults->add_flag("--no-help", no_help, "omit comment lines");
  auto* show = configc->add_subcommand("show", "print the effective configuration");
  add_config(show);
  show->add_option("--seed", seed, "run seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*init) return cmd_init(config, sets, seed, out);
    if (*expand) return cmd_expand(in, out, ratio, branches, epsilon, mode, seed, probes);
    if (*extract) return cmd_extract(in, out);
    if (*trainc) return cmd_train(config, sets, seed, out, quiet);
    if (*eval) return cmd_eval(in, config, sets, view);
    if (*verify) return cmd_verify(suite, seed);
    if (*plot) return cmd_plot(in, out);
    if (*defaults) {
      std::fputs(print_config(default_train_config(), !no_help).c_str(), stdout);
      return 0;
    }
    if (*show) {
      auto cfg = load_run_config(config, sets);
      resolve_seed(cfg, seed);
      cfg.validate();
      std::fputs(print_config(cfg, false).c_str(), stdout);
      return 0;
    }
  } catch (const gpd::Error& e) {
    std::fprintf(stderr, "gpd: %s\n", e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "gpd: %s\n", e.what());
    return 1;
  }
  return 0;
}
