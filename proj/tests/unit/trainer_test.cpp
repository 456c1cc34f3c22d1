#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <sstream>

#include "gpd/gpd.hpp"

using namespace gpd;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(Protocol p = Protocol::scratch, std::uint64_t seed = 0) {
  TrainConfig cfg = default_train_config();
  cfg.protocol = p;
  cfg.seed = seed;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.data.classes = 3;
  cfg.data.modes = 1;
  cfg.data.train_per_class = 16;
  cfg.data.eval_per_class = 8;
  cfg.out_dir.clear();
  return cfg;
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "gpd_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double total_loss(ModelGraph& m, const Tensor& x, std::span<const int> y, const LossConfig& cfg) {
  NoGradGuard guard;
  const auto t = forward(m, x, View::teacher, Mode::eval);
  const auto s = forward(m, x, View::student, Mode::eval);
  return gpd_loss(s, t, std::nullopt, y, cfg).total.item();
}

std::vector<double> flat_params(const ModelGraph& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) {
    const auto v = p.tensor.to_vector();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& y) {
  std::vector<int> out;
  const std::size_t k = y.dim(1);
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (y[i * k + j] > y[i * k + best]) best = j;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

}  // namespace

TEST(TrainStep, MatchesHandWrittenTwoModelUpdate) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto rep = verify_shared_step(10, seed);
    for (const auto& c : rep.checks) EXPECT_TRUE(c.passed) << c.name << " " << c.deviation;
  }
}

TEST(TrainStep, ZeroLearningRateKeepsParametersButUpdatesStats) {
  auto m = small_expanded_model(1);
  Rng rng = make_rng(1);
  const auto x = random_input(m, 4, rng);
  const std::vector<int> y{0, 1, 2, 0};
  const auto before = flat_params(m);
  std::vector<double> stats_before;
  for (const auto& p : m.state()) {
    if (p.name.find("_mean") == std::string::npos) continue;
    const auto v = p.tensor.to_vector();
    stats_before.insert(stats_before.end(), v.begin(), v.end());
  }
  SgdMomentum opt(m.parameter_tensors(), 0.9, 1e-4);
  train_step(m, nullptr, x, y, LossConfig{}, opt, 0.0);
  EXPECT_EQ(flat_params(m), before);
  std::vector<double> stats_after;
  for (const auto& p : m.state()) {
    if (p.name.find("_mean") == std::string::npos) continue;
    const auto v = p.tensor.to_vector();
    stats_after.insert(stats_after.end(), v.begin(), v.end());
  }
  EXPECT_NE(stats_after, stats_before);
}

TEST(TrainStep, SmallStepDescendsOnTheSameBatch) {
  int descended = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = small_expanded_model(seed, 2, 2, false);
    Rng rng = make_rng(seed, 1);
    const auto x = random_input(m, 6, rng);
    const std::vector<int> y{0, 1, 2, 2, 1, 0};
    const double before = total_loss(m, x, y, LossConfig{});
    SgdMomentum opt(m.parameter_tensors(), 0.0, 0.0);
    train_step(m, nullptr, x, y, LossConfig{}, opt, 1e-3);
    if (total_loss(m, x, y, LossConfig{}) < before) ++descended;
  }
  EXPECT_GE(descended, 18);
}

TEST(TrainStep, MissingStaticTeacherIsRejected) {
  auto m = small_expanded_model(2);
  Rng rng = make_rng(2);
  const auto x = random_input(m, 2, rng);
  const std::vector<int> y{0, 1};
  LossConfig cfg;
  cfg.use_static_teacher = true;
  SgdMomentum opt(m.parameter_tensors(), 0.9, 0.0);
  EXPECT_THROW(train_step(m, nullptr, x, y, cfg, opt, 0.1), ConfigError);
}

TEST(Train, EpochZeroHasNoGap) {
  const auto cfg = tiny_config();
  const auto data = load_dataset(cfg.data);
  const auto res = train(cfg, data);
  ASSERT_EQ(res.records.size(), 3u);
  EXPECT_EQ(res.records[0].epoch, 0u);
  EXPECT_EQ(res.records[0].gap, 0.0);
  EXPECT_EQ(res.records[0].acc_s, res.records[0].acc_t);
  EXPECT_EQ(res.records[2].iteration, 6u);
}

TEST(Train, SameSeedIsBitIdentical) {
  auto a = tiny_config(), b = tiny_config();
  a.out_dir = temp_dir("det_a").string();
  b.out_dir = temp_dir("det_b").string();
  const auto data = load_dataset(a.data);
  train(a, data);
  train(b, data);
  for (const char* f : {"records.csv", "teacher.ckpt", "student.ckpt"}) {
    EXPECT_EQ(read_file(fs::path(a.out_dir) / f), read_file(fs::path(b.out_dir) / f)) << f;
  }
  auto c = tiny_config(Protocol::scratch, 1);
  c.out_dir = temp_dir("det_c").string();
  train(c, data);
  EXPECT_NE(read_file(fs::path(a.out_dir) / "teacher.ckpt"), read_file(fs::path(c.out_dir) / "teacher.ckpt"));
}

TEST(Train, SavedStudentMatchesStudentView) {
  const auto cfg = tiny_config();
  auto res = train(cfg, load_dataset(cfg.data));
  auto student = materialize_student(res.teacher);
  EXPECT_TRUE(student.is_plain());
  Rng rng = make_rng(3);
  const auto x = random_input(student, 8, rng);
  NoGradGuard guard;
  EXPECT_LT(max_abs_diff(forward(student, x, View::student, Mode::eval),
                         forward(res.teacher, x, View::student, Mode::eval)),
            1e-9);
}

TEST(Train, UnexpandedModelHasZeroGapThroughout) {
  auto cfg = tiny_config();
  cfg.plan.ratio = 1;
  cfg.plan.branches = 1;
  const auto res = train(cfg, load_dataset(cfg.data));
  for (double g : track_gap(res.records).gaps) EXPECT_EQ(g, 0.0);
}

TEST(Train, BaselineTrainsOnlyThePlainStudent) {
  const auto cfg = tiny_config(Protocol::baseline);
  const auto res = train(cfg, load_dataset(cfg.data));
  EXPECT_TRUE(res.teacher.is_plain());
  for (const auto& r : res.records) {
    EXPECT_EQ(r.loss.ce_t, 0.0);
    EXPECT_EQ(r.loss.kd_sd, 0.0);
    EXPECT_EQ(r.loss.total, r.loss.ce_s);
  }
}

TEST(Train, DistillAndFinetuneUseSavedCheckpoints) {
  auto base = tiny_config(Protocol::baseline);
  base.out_dir = temp_dir("static").string();
  const auto data = load_dataset(base.data);
  train(base, data);
  const auto ckpt = (fs::path(base.out_dir) / "student.ckpt").string();

  auto distill = tiny_config(Protocol::distill);
  distill.static_ckpt = ckpt;
  const auto d = train(distill, data);
  EXPECT_GT(d.records.back().loss.kd_ss, 0.0);
  EXPECT_GT(d.records.back().loss.kd_ds, 0.0);

  auto finetune = tiny_config(Protocol::finetune);
  finetune.init_ckpt = ckpt;
  const auto f = train(finetune, data);
  EXPECT_EQ(f.records.back().loss.kd_ss, 0.0);
  auto student = load(ckpt);
  const auto eval0 = evaluate(student, View::student, data.eval).accuracy;
  EXPECT_EQ(f.records.front().acc_s, eval0);

  distill.static_ckpt.clear();
  EXPECT_THROW(train(distill, data), ConfigError);
  finetune.init_ckpt = (fs::path(base.out_dir) / "teacher_missing.ckpt").string();
  EXPECT_THROW(train(finetune, data), Error);
}

TEST(Train, OnEpochHookSeesEveryRecord) {
  const auto cfg = tiny_config();
  std::vector<std::size_t> epochs;
  TrainHooks hooks;
  hooks.on_epoch = [&](const TrainRecord& r) { epochs.push_back(r.epoch); };
  train(cfg, load_dataset(cfg.data), hooks);
  EXPECT_EQ(epochs, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Evaluate, LabelsMatchingPredictionsScoreOne) {
  auto cfg = tiny_config();
  auto data = load_dataset(cfg.data);
  ArchConfig a;
  a.input_shape = cfg.data.input_shape;
  a.num_classes = 3;
  auto m = build_student(a);
  std::vector<std::size_t> idx(data.eval.size());
  std::iota(idx.begin(), idx.end(), 0);
  {
    NoGradGuard guard;
    const auto y = forward(m, data.eval.batch(idx), View::student, Mode::eval);
    data.eval.labels = argmax_rows(y);
  }
  EXPECT_EQ(evaluate(m, View::student, data.eval).accuracy, 1.0);
}

TEST(Evaluate, UntrainedModelIsNearChanceAndRepeatable) {
  auto cfg = tiny_config();
  cfg.data.classes = 10;
  cfg.data.train_per_class = 1;
  cfg.data.eval_per_class = 200;
  const auto data = load_dataset(cfg.data);
  ArchConfig a;
  a.input_shape = cfg.data.input_shape;
  a.seed = 5;
  auto m = build_student(a);
  const auto r1 = evaluate(m, View::student, data.eval);
  EXPECT_NEAR(r1.accuracy, 0.1, 0.03);
  const auto r2 = evaluate(m, View::student, data.eval);
  EXPECT_EQ(r1.accuracy, r2.accuracy);
  EXPECT_EQ(r1.mean_ce, r2.mean_ce);
}

TEST(Records, CsvRoundTripIsStable) {
  const auto cfg = tiny_config();
  const auto res = train(cfg, load_dataset(cfg.data));
  std::ostringstream out;
  write_records(out, res.records);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), kRecordHeader);
  std::istringstream in(out.str());
  const auto back = parse_records(in);
  ASSERT_EQ(back.size(), res.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].epoch, res.records[i].epoch);
    EXPECT_EQ(back[i].iteration, res.records[i].iteration);
    EXPECT_NEAR(back[i].loss.total, res.records[i].loss.total, 5e-10);
    EXPECT_NEAR(back[i].acc_s, res.records[i].acc_s, 5e-7);
    EXPECT_NEAR(back[i].gap, res.records[i].gap, 5e-7);
  }
  std::ostringstream again;
  write_records(again, back);
  EXPECT_EQ(again.str(), out.str());
}

TEST(Records, MalformedRowsAreRejected) {
  std::istringstream bad_header("epoch,iter\n0,0\n");
  EXPECT_THROW(parse_records(bad_header), FormatError);
  std::istringstream short_row(std::string(kRecordHeader) + "\n0,0,1\n");
  EXPECT_THROW(parse_records(short_row), FormatError);
}

TEST(TrackGap, FractionCountsOnlyTrainedEpochs) {
  std::vector<TrainRecord> rec(5);
  const double gaps[] = {-0.5, 0.1, -0.1, 0.0, 0.2};
  for (std::size_t i = 0; i < rec.size(); ++i) {
    rec[i].epoch = i;
    rec[i].gap = gaps[i];
  }
  const auto g = track_gap(rec);
  EXPECT_EQ(g.fraction_nonnegative, 0.75);
  EXPECT_EQ(g.final_gap, 0.2);
  EXPECT_EQ(g.gaps.size(), 5u);
}

TEST(TrainConfig, StepScheduleAndFinetuneRate) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.lr_steps = {5, 10};
  EXPECT_DOUBLE_EQ(cfg.lr_at(1), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(5), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(6), 0.01);
  EXPECT_DOUBLE_EQ(cfg.lr_at(11), 0.001);
  cfg.protocol = Protocol::finetune;
  EXPECT_DOUBLE_EQ(cfg.lr_at(1), 0.01);
}

TEST(TrainConfig, ProtocolNamesRoundTrip) {
  for (Protocol p : {Protocol::distill, Protocol::scratch, Protocol::finetune, Protocol::baseline}) {
    EXPECT_EQ(parse_protocol(to_string(p)), p);
  }
  EXPECT_THROW(parse_protocol("bogus"), ConfigError);
}
