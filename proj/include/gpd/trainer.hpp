#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gpd/channel_branch_reparam.hpp"
#include "gpd/checkpoint.hpp"
#include "gpd/dataset.hpp"
#include "gpd/errors.hpp"
#include "gpd/forward.hpp"
#include "gpd/inverse_reparam.hpp"
#include "gpd/losses.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/optim.hpp"

namespace gpd {

enum class Protocol { distill, scratch, finetune, baseline };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::distill: return "distill";
    case Protocol::scratch: return "scratch";
    case Protocol::finetune: return "finetune";
    case Protocol::baseline: return "baseline";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "distill") return Protocol::distill;
  if (s == "scratch") return Protocol::scratch;
  if (s == "finetune") return Protocol::finetune;
  if (s == "baseline") return Protocol::baseline;
  throw ConfigError("unknown protocol '" + s + "' (expected distill, scratch, finetune, or baseline)");
}

struct TrainConfig {
  Protocol protocol = Protocol::scratch;
  std::size_t epochs = 15;
  std::size_t batch_size = 64;
  double lr = 0.05;
  std::vector<std::size_t> lr_steps{10};  // decay after these epochs
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  ArchConfig arch;
  ExpansionPlan plan{2, 2, 1e-3, IrMode::bn_safe, 0};
  LossConfig loss;
  DatasetSpec data;
  std::string static_ckpt;  // distill
  std::string init_ckpt;    // finetune
  std::string out_dir;      // empty: nothing written
  std::size_t checkpoint_every = 0;  // epochs; 0 = final only
  bool log_timing = false;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    plan.validate();
    loss.validate();
    if (protocol == Protocol::distill && static_ckpt.empty()) {
      throw ConfigError("protocol distill needs static_ckpt (a frozen teacher checkpoint)");
    }
    if (protocol == Protocol::finetune && init_ckpt.empty()) {
      throw ConfigError("protocol finetune needs init_ckpt (a pre-trained student checkpoint)");
    }
  }

  // Learning rate for a 1-based epoch.
  double lr_at(std::size_t epoch) const {
    double out = protocol == Protocol::finetune ? 0.1 * lr : lr;
    for (auto s : lr_steps)
      if (epoch > s) out *= lr_decay;
    return out;
  }

  // The objective actually optimized under this protocol.
  LossConfig effective_loss() const {
    LossConfig l = loss;
    l.use_static_teacher = protocol == Protocol::distill;
    if (protocol == Protocol::baseline) {
      l.ce_teacher = false;
      l.kd_dynamic = false;
    }
    return l;
  }
};

struct TrainRecord {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  LossValues loss;
  double acc_s = 0.0;
  double acc_t = 0.0;
  double gap = 0.0;
  double ms = 0.0;
};

inline constexpr const char* kRecordHeader = "epoch,iter,ce_s,kd_ss,ce_t,kd_sd,kd_ds,total,acc_s,acc_t,gap,ms";

inline std::string record_row(const TrainRecord& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.6f,%.6f,%.6f,%.1f", r.epoch, r.iteration,
                r.loss.ce_s, r.loss.kd_ss, r.loss.ce_t, r.loss.kd_sd, r.loss.kd_ds, r.loss.total, r.acc_s, r.acc_t,
                r.gap, r.ms);
  return buf;
}

inline void write_records(std::ostream& out, const std::vector<TrainRecord>& records) {
  out << kRecordHeader << "\n";
  for (const auto& r : records) out << record_row(r) << "\n";
}

// Parses the first eleven columns of a record CSV; `ms` is optional.
inline std::vector<TrainRecord> parse_records(std::istream& in, const std::string& name = "records") {
  std::vector<TrainRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("epoch", 0) == 0) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() < 11) {
      throw FormatError(name + ":" + std::to_string(lineno) + ": expected at least 11 columns, got " +
                        std::to_string(cells.size()));
    }
    const auto where = name + ":" + std::to_string(lineno);
    TrainRecord r;
    r.epoch = parse_uint(cells[0], where);
    r.iteration = parse_uint(cells[1], where);
    r.loss = {parse_double(cells[2], where), parse_double(cells[3], where), parse_double(cells[4], where),
              parse_double(cells[5], where), parse_double(cells[6], where), parse_double(cells[7], where)};
    r.acc_s = parse_double(cells[8], where);
    r.acc_t = parse_double(cells[9], where);
    r.gap = parse_double(cells[10], where);
    if (cells.size() > 11) r.ms = parse_double(cells[11], where);
    out.push_back(r);
  }
  return out;
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_ce = 0.0;
};

// Top-1 accuracy and mean cross-entropy; never records a tape or touches
// running statistics.
inline EvalResult evaluate(ModelGraph& m, View view, const Dataset& data, std::size_t batch_size = 250) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  NoGradGuard guard;
  const std::optional<StudentView> student =
      view == View::student && !m.is_plain() ? std::optional<StudentView>(extract_student(m)) : std::nullopt;
  std::size_t correct = 0;
  double ce = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto x = data.batch(idx);
    const auto y = data.batch_labels(idx);
    const auto logits = student ? forward_student(m, *student, x, Mode::eval) : forward(m, x, view, Mode::eval);
    ce += softmax_cross_entropy(logits, y).item() * static_cast<double>(n);
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits[r * k + j] > logits[r * k + best]) best = j;
      if (static_cast<int>(best) == y[r]) ++correct;
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()), ce / static_cast<double>(data.size())};
}

// Loss values of every objective term on a whole dataset, in eval mode.
inline LossValues evaluate_losses(ModelGraph& m, ModelGraph* frozen, const Dataset& data, const LossConfig& cfg,
                                  std::size_t batch_size = 250) {
  NoGradGuard guard;
  const auto view = extract_student(m);
  LossValues acc;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto x = data.batch(idx);
    const auto y = data.batch_labels(idx);
    const auto s = forward_student(m, view, x, Mode::eval);
    const auto t = cfg.needs_teacher() ? forward(m, x, View::teacher, Mode::eval) : Tensor{};
    std::optional<Tensor> st;
    if (cfg.use_static_teacher) st = forward(*frozen, x, View::teacher, Mode::eval);
    const auto v = gpd_loss(s, t, st, y, cfg).values();
    const double w = static_cast<double>(n) / static_cast<double>(data.size());
    acc.ce_s += w * v.ce_s;
    acc.kd_ss += w * v.kd_ss;
    acc.ce_t += w * v.ce_t;
    acc.kd_sd += w * v.kd_sd;
    acc.kd_ds += w * v.kd_ds;
    acc.total += w * v.total;
  }
  return acc;
}

// One shared-parameter update. The teacher view and the student view are run
// on the same batch; the unified tape routes the student-path gradient back
// through channel-branch reparameterization, so a single backward yields the
// sum of both gradients on the shared tensors.
inline LossValues train_step(ModelGraph& teacher, ModelGraph* frozen, const Tensor& x, std::span<const int> labels,
                             const LossConfig& cfg, SgdMomentum& opt, double lr) {
  opt.zero_grad();
  const auto t_logits = cfg.needs_teacher() ? forward(teacher, x, View::teacher, Mode::train) : Tensor{};
  const auto s_logits = forward(teacher, x, View::student, Mode::train);
  std::optional<Tensor> st;
  if (cfg.use_static_teacher) {
    if (!frozen) throw ConfigError("train_step: static teacher required by the loss configuration");
    NoGradGuard guard;
    st = forward(*frozen, x, View::teacher, Mode::eval);
  }
  LossBreakdown loss;
  try {
    loss = gpd_loss(s_logits, t_logits, st, labels, cfg);
  } catch (const NumericError& e) {
    throw NumericError(std::string("train_step aborted: ") + e.what());
  }
  const auto v = loss.values();
  check_loss_finite(v);
  loss.total.backward();
  opt.step(lr);
  return v;
}

struct GapSummary {
  std::vector<double> gaps;           // per record, epoch order
  double fraction_nonnegative = 0.0;  // over epochs >= 1
  double final_gap = 0.0;
};

inline GapSummary track_gap(const std::vector<TrainRecord>& records) {
  GapSummary out;
  std::size_t counted = 0, ok = 0;
  for (const auto& r : records) {
    out.gaps.push_back(r.gap);
    if (r.epoch >= 1) {
      ++counted;
      if (r.gap >= 0.0) ++ok;
    }
  }
  if (counted) out.fraction_nonnegative = static_cast<double>(ok) / static_cast<double>(counted);
  if (!records.empty()) out.final_gap = records.back().gap;
  return out;
}

struct TrainResult {
  ModelGraph teacher;
  std::vector<TrainRecord> records;
};

// The model trained under `cfg.protocol`, before any update.
inline ModelGraph initial_model(const TrainConfig& cfg) {
  ModelGraph student;
  if (cfg.protocol == Protocol::finetune) {
    student = load(cfg.init_ckpt);
    if (!student.is_plain()) throw ConfigError("init_ckpt must hold a plain student (r = M = 1)");
  } else {
    ArchConfig a = cfg.arch;
    a.seed = cfg.seed;
    a.input_shape = cfg.data.input_shape;
    a.num_classes = cfg.data.classes;
    student = build_student(a);
  }
  if (cfg.protocol == Protocol::baseline) return student;
  ExpansionPlan plan = cfg.plan;
  plan.seed = cfg.seed;
  if (student.has_batchnorm() && plan.ir_mode == IrMode::paper) {
    throw ConfigError("ir_mode=paper cannot expand a model with batchnorm; use bn_safe");
  }
  return expand_model(student, plan);
}

struct TrainHooks {
  // Called after every epoch's record is appended.
  std::function<void(const TrainRecord&)> on_epoch;
};

inline TrainResult train(const TrainConfig& cfg, const DatasetPair& data, const TrainHooks& hooks = {}) {
  cfg.validate();
  const auto loss_cfg = cfg.effective_loss();
  TrainResult res;
  res.teacher = initial_model(cfg);
  auto& model = res.teacher;
  std::optional<ModelGraph> frozen;
  if (loss_cfg.use_static_teacher) {
    frozen = load(cfg.static_ckpt);
    for (auto& p : frozen->parameters()) p.tensor.set_requires_grad(false);
    if (frozen->meta.num_classes != model.meta.num_classes) {
      throw ConfigError("static teacher predicts " + std::to_string(frozen->meta.num_classes) + " classes, student " +
                        std::to_string(model.meta.num_classes));
    }
  }
  SgdMomentum opt(model.parameter_tensors(), cfg.momentum, cfg.weight_decay);
  std::filesystem::path out_dir = cfg.out_dir;
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(out_dir);

  auto record_epoch = [&](std::size_t epoch, std::size_t iteration, const LossValues& loss, double ms) {
    TrainRecord r;
    r.epoch = epoch;
    r.iteration = iteration;
    r.loss = loss;
    r.acc_s = evaluate(model, View::student, data.eval).accuracy;
    r.acc_t = evaluate(model, View::teacher, data.eval).accuracy;
    r.gap = r.acc_t - r.acc_s;
    r.ms = cfg.log_timing ? ms : 0.0;
    res.records.push_back(r);
    if (hooks.on_epoch) hooks.on_epoch(r);
  };

  record_epoch(0, 0, evaluate_losses(model, frozen ? &*frozen : nullptr, data.eval, loss_cfg), 0.0);
  std::vector<std::size_t> order(data.train.size());
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(cfg.seed, 0x5F000000ULL + epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = cfg.lr_at(epoch);
    LossValues sum;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2 && model.has_batchnorm()) continue;  // batch statistics need two samples
      std::span<const std::size_t> idx(order.data() + start, n);
      const auto x = data.train.batch(idx);
      const auto y = data.train.batch_labels(idx);
      const auto v = train_step(model, frozen ? &*frozen : nullptr, x, y, loss_cfg, opt, lr);
      sum.ce_s += v.ce_s;
      sum.kd_ss += v.kd_ss;
      sum.ce_t += v.ce_t;
      sum.kd_sd += v.kd_sd;
      sum.kd_ds += v.kd_ds;
      sum.total += v.total;
      ++steps;
      ++iteration;
    }
    const double k = steps ? 1.0 / static_cast<double>(steps) : 0.0;
    const LossValues mean{sum.ce_s * k, sum.kd_ss * k, sum.ce_t * k, sum.kd_sd * k, sum.kd_ds * k, sum.total * k};
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    record_epoch(epoch, iteration, mean, ms);
    if (!cfg.out_dir.empty() && cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs) {
      save(model, out_dir / "teacher.ckpt");
    }
  }

  if (!cfg.out_dir.empty()) {
    save(model, out_dir / "teacher.ckpt");
    save(materialize_student(model), out_dir / "student.ckpt");
    std::ostringstream csv;
    write_records(csv, res.records);
    write_file_atomic(out_dir / "records.csv", csv.str());
  }
  return res;
}

}  // namespace gpd
