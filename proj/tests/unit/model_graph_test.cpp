#include <gtest/gtest.h>

#include <filesystem>

#include "gpd/gpd.hpp"

using namespace gpd;
namespace fs = std::filesystem;

namespace {

ArchConfig small_arch(std::uint64_t seed = 0, Shape input = {1, 28, 28}) {
  ArchConfig a;
  a.input_shape = std::move(input);
  a.seed = seed;
  return a;
}

std::vector<double> flat_state(const ModelGraph& m) {
  std::vector<double> out;
  for (const auto& p : m.state()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

std::vector<double> stats(const ModelGraph& m, View v) {
  std::vector<double> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].kind != LayerKind::bn) continue;
    const auto& s = m.bn(i);
    const Tensor& mean = v == View::teacher ? s.teacher_mean : s.student_mean;
    const Tensor& var = v == View::teacher ? s.teacher_var : s.student_var;
    for (const Tensor* t : {&mean, &var}) out.insert(out.end(), t->values().begin(), t->values().end());
  }
  return out;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "gpd_unit";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(BuildStudent, SameSeedIsBitIdentical) {
  const auto a = build_student(small_arch(0)), b = build_student(small_arch(0));
  EXPECT_EQ(flat_state(a), flat_state(b));
  EXPECT_NE(flat_state(a), flat_state(build_student(small_arch(1))));
}

TEST(BuildStudent, MismatchedChannelChainIsRejected) {
  std::vector<LayerSpec> layers{LayerSpec::conv(1, 4, 3, 1, 1), LayerSpec::relu(), LayerSpec::conv(5, 4, 3),
                                LayerSpec::pool(), LayerSpec::linear(4, 10)};
  assign_roles(layers);
  ModelMeta meta;
  meta.input_shape = {1, 8, 8};
  EXPECT_THROW(build_model(layers, meta), ShapeError);
  ArchConfig bad = small_arch();
  bad.widths = {4, 8};
  EXPECT_THROW(build_student(bad), ConfigError);
  bad.name = "resnet18";
  bad.widths = {};
  EXPECT_THROW(build_student(bad), ConfigError);
}

TEST(BuildStudent, ConvnetSmallOn28x28GivesTenLogits) {
  auto m = build_student(small_arch());
  Rng rng = make_rng(1);
  NoGradGuard guard;
  const auto y = forward(m, random_input(m, 5, rng), View::student, Mode::eval);
  EXPECT_EQ(y.shape(), (Shape{5, 10}));
}

TEST(BuildStudent, ShapePropagationMatchesConvFormula) {
  for (const char* arch : {"convnet-small", "convnet-small-nobn", "convnet-wide"})
    for (std::size_t hw : {5, 8, 13, 28}) {
      ArchConfig a = small_arch(0, {2, hw, hw});
      a.name = arch;
      const auto m = build_student(a);
      const auto shapes = infer_shapes(m.layers, m.meta.input_shape);
      std::size_t h = hw;
      std::size_t conv_seen = 0;
      for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& l = m.layers[i];
        if (l.kind == LayerKind::conv) {
          h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
          ++conv_seen;
          EXPECT_EQ(shapes[i + 1], (Shape{1, l.out_channels, h, h})) << arch << " " << hw << " layer " << i;
        }
      }
      EXPECT_EQ(conv_seen, 3u);
      EXPECT_EQ(shapes.back(), (Shape{1, 10}));
    }
}

TEST(BuildStudent, RolesAreFirstIntermediateLast) {
  const auto m = build_student(small_arch());
  std::vector<Role> roles;
  for (const auto& l : m.layers)
    if (l.weight_bearing()) roles.push_back(l.role);
  ASSERT_EQ(roles.size(), 4u);
  EXPECT_EQ(roles.front(), Role::first);
  EXPECT_EQ(roles[1], Role::intermediate);
  EXPECT_EQ(roles[2], Role::intermediate);
  EXPECT_EQ(roles.back(), Role::last);
}

TEST(Forward, PlainStudentViewsCoincideBitExactly) {
  auto m = build_student(small_arch(0, {1, 8, 8}));
  Rng rng = make_rng(2);
  const auto x = random_input(m, 4, rng);
  NoGradGuard guard;
  const auto a = forward(m, x, View::student, Mode::eval), b = forward(m, x, View::teacher, Mode::eval);
  EXPECT_EQ(a.to_vector(), b.to_vector());
}

TEST(Forward, ExpandedTeacherMatchesStudentAtInit) {
  auto student = build_student(small_arch(3, {1, 8, 8}));
  auto teacher = expand_model(student, {2, 2, 0.0, IrMode::bn_safe, 3});
  Rng rng = make_rng(3);
  const auto x = random_input(student, 8, rng);
  NoGradGuard guard;
  EXPECT_LT(max_abs_diff(forward(student, x, View::student, Mode::eval), forward(teacher, x, View::teacher, Mode::eval)),
            1e-9);
}

TEST(Forward, EvalModeIsPureAndRepeatable) {
  auto teacher = expand_model(build_student(small_arch(4, {1, 8, 8})), {2, 2, 0.0, IrMode::bn_safe, 4});
  Rng rng = make_rng(4);
  const auto x = random_input(teacher, 3, rng);
  const auto before = flat_state(teacher);
  NoGradGuard guard;
  for (View v : {View::student, View::teacher}) {
    const auto a = forward(teacher, x, v, Mode::eval), b = forward(teacher, x, v, Mode::eval);
    EXPECT_EQ(a.to_vector(), b.to_vector());
  }
  EXPECT_EQ(flat_state(teacher), before);
}

TEST(Forward, TrainModeMutatesOnlyTheActiveViewStats) {
  auto teacher = expand_model(build_student(small_arch(5, {1, 8, 8})), {2, 2, 0.0, IrMode::bn_safe, 5});
  Rng rng = make_rng(5);
  const auto x = random_input(teacher, 4, rng);
  NoGradGuard guard;
  auto s0 = stats(teacher, View::student), t0 = stats(teacher, View::teacher);
  forward(teacher, x, View::teacher, Mode::train);
  EXPECT_EQ(stats(teacher, View::student), s0);
  EXPECT_NE(stats(teacher, View::teacher), t0);
  t0 = stats(teacher, View::teacher);
  forward(teacher, x, View::student, Mode::train);
  EXPECT_EQ(stats(teacher, View::teacher), t0);
  EXPECT_NE(stats(teacher, View::student), s0);
}

TEST(Forward, WrongInputShapeIsRejected) {
  auto m = build_student(small_arch(0, {1, 8, 8}));
  NoGradGuard guard;
  EXPECT_THROW(forward(m, Tensor::zeros({2, 3, 8, 8}), View::student, Mode::eval), ShapeError);
}

TEST(ModelGraph, CloneIsDeep) {
  auto m = build_student(small_arch(0, {1, 8, 8}));
  auto c = m.clone();
  c.parameters()[0].tensor.mutable_values()[0] += 1.0;
  EXPECT_NE(flat_state(m), flat_state(c));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto teacher = expand_model(build_student(small_arch(6, {1, 8, 8})), {2, 3, 1e-3, IrMode::bn_safe, 6});
  const auto path = temp_path("roundtrip.ckpt");
  save(teacher, path);
  const auto first = read_file(path);
  save(load(path), path);
  EXPECT_EQ(read_file(path), first);
}

TEST(Checkpoint, CorruptedByteIsChecksumError) {
  const auto bytes = serialize(build_student(small_arch(0, {1, 8, 8})));
  for (std::size_t pos : {std::size_t{0}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x20);
    try {
      deserialize(bad);
      ADD_FAILURE() << "corruption at byte " << pos << " went unnoticed";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() / 3)), FormatError);
  EXPECT_THROW(deserialize(""), FormatError);
}

TEST(Checkpoint, ExpandedMetadataSurvives) {
  auto teacher = expand_model(build_student(small_arch(7, {1, 8, 8})), {2, 6, 0.0, IrMode::bn_safe, 11});
  const auto back = deserialize(serialize(teacher));
  EXPECT_EQ(back.meta.ratio, 2u);
  EXPECT_EQ(back.meta.branches, 6u);
  EXPECT_EQ(back.meta.ir_mode, IrMode::bn_safe);
  EXPECT_EQ(back.meta.expand_seed, 11u);
  EXPECT_EQ(back.meta.input_shape, teacher.meta.input_shape);
  EXPECT_EQ(back.layers, teacher.layers);
}

class CheckpointProperty : public ::testing::TestWithParam<int> {};

TEST_P(CheckpointProperty, RandomModelRoundTripIsBitExact) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto m = random_chain(seed, seed % 2 == 0);
  if (seed % 3 != 0) {
    m = expand_model(m, {1 + seed % 3, 1 + seed % 4, (seed % 5) * 1e-3, m.meta.ir_mode, seed});
    Rng rng = make_rng(seed, 5);
    perturb_parameters(m, rng, 0.1);
  }
  const auto bytes = serialize(m);
  const auto back = deserialize(bytes);
  EXPECT_EQ(back.layers, m.layers);
  EXPECT_EQ(back.meta.ratio, m.meta.ratio);
  EXPECT_EQ(back.meta.branches, m.meta.branches);
  EXPECT_EQ(back.meta.epsilon, m.meta.epsilon);
  EXPECT_EQ(flat_state(back), flat_state(m));
  EXPECT_EQ(serialize(back), bytes);
}

INSTANTIATE_TEST_SUITE_P(Seeds, CheckpointProperty, ::testing::Range(0, 100));

TEST(Checkpoint, AtomicWriteLeavesNoTemporary) {
  const auto path = temp_path("atomic.ckpt");
  save(build_student(small_arch(0, {1, 8, 8})), path);
  for (const auto& e : fs::directory_iterator(path.parent_path())) {
    EXPECT_EQ(e.path().string().find(".tmp"), std::string::npos) << e.path();
  }
}

TEST(Checkpoint, MissingFileIsReported) {
  EXPECT_THROW(load(temp_path("does_not_exist.ckpt")), Error);
}
