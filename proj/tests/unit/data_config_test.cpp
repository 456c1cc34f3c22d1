#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "gpd/gpd.hpp"

using namespace gpd;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::string s = be32(0x803) + be32(n) + be32(rows) + be32(cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) s.push_back(static_cast<char>(i % 256));
  return s;
}

template <class E>
std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  return "";
}

DatasetSpec synthetic_spec() {
  DatasetSpec s;
  s.classes = 4;
  s.train_per_class = 16;
  s.eval_per_class = 16;
  s.input_shape = {1, 8, 8};
  s.seed = 7;
  return s;
}

// Restores an environment variable on scope exit.
struct EnvGuard {
  std::string name;
  std::optional<std::string> old;
  explicit EnvGuard(std::string n) : name(std::move(n)) {
    if (const char* v = std::getenv(name.c_str())) old = v;
  }
  ~EnvGuard() {
    if (old) {
      setenv(name.c_str(), old->c_str(), 1);
    } else {
      unsetenv(name.c_str());
    }
  }
};

}  // namespace

TEST(Idx, ParsesImagesAndLabels) {
  const auto img = parse_idx_images(idx_images(2, 3, 2));
  EXPECT_EQ(img.count, 2u);
  EXPECT_EQ(img.rows, 3u);
  EXPECT_EQ(img.cols, 2u);
  EXPECT_EQ(img.pixels.size(), 12u);
  EXPECT_EQ(img.pixels[11], 11);
  const auto lab = parse_idx_labels(be32(0x801) + be32(3) + std::string("\x01\x00\x09", 3));
  EXPECT_EQ(lab, (std::vector<int>{1, 0, 9}));
}

TEST(Idx, WrongMagicNamesTheOffset) {
  const auto msg = error_of<FormatError>([] { parse_idx_images(be32(0x801) + be32(0) + be32(0) + be32(0), "imgs"); });
  EXPECT_NE(msg.find("imgs"), std::string::npos);
  EXPECT_NE(msg.find("offset 0"), std::string::npos);
  EXPECT_THROW(parse_idx_labels(be32(0x803) + be32(0)), FormatError);
}

TEST(Idx, TruncationIsDetected) {
  auto bytes = idx_images(2, 3, 2);
  bytes.pop_back();
  EXPECT_NE(error_of<FormatError>([&] { parse_idx_images(bytes); }).find("truncated"), std::string::npos);
  EXPECT_THROW(parse_idx_images(be32(0x803) + be32(1)), FormatError);
  EXPECT_THROW(parse_idx_labels(be32(0x801) + be32(4) + "ab"), FormatError);
}

TEST(Dataset, LabelOutsideClassRangeIsRejected) {
  Dataset d;
  d.image_shape = {1, 1, 1};
  d.num_classes = 2;
  d.images = {0.0, 0.0};
  d.labels = {0, 2};
  EXPECT_THROW(d.validate(), FormatError);
  d.labels = {0, 1};
  EXPECT_NO_THROW(d.validate());
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  const auto a = make_synthetic(synthetic_spec()), b = make_synthetic(synthetic_spec());
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_EQ(a.eval.labels, b.eval.labels);
  EXPECT_EQ(a.train.size(), 64u);
  auto other = synthetic_spec();
  other.seed = 8;
  EXPECT_NE(make_synthetic(other).train.images, a.train.images);
  EXPECT_NE(a.train.images, a.eval.images);
}

TEST(Synthetic, NoiselessSamplesSitOnTheirCentroids) {
  for (std::size_t modes : {1, 3}) {
    auto spec = synthetic_spec();
    spec.noise = 0.0;
    spec.modes = modes;
    const auto d = make_synthetic(spec).train;
    Rng rng = make_rng(spec.seed, 0xC0);
    const auto centroids = synthetic_centroids(spec.classes * modes, spec.input_shape, rng);
    const std::size_t dim = d.image_numel();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < centroids.size(); ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < dim; ++j) s += std::pow(d.images[i * dim + j] - centroids[c][j], 2);
        if (s < best_d) best_d = s, best = c;
      }
      // Centroid index is mode * classes + class.
      if (static_cast<int>(best % spec.classes) == d.labels[i]) ++correct;
    }
    EXPECT_EQ(correct, d.size());
  }
}

TEST(Synthetic, BadSettingsAreConfigErrors) {
  auto s = synthetic_spec();
  s.classes = 1;
  EXPECT_THROW(make_synthetic(s), ConfigError);
  s = synthetic_spec();
  s.modes = 0;
  EXPECT_THROW(make_synthetic(s), ConfigError);
  s = synthetic_spec();
  s.input_shape = {8, 8};
  EXPECT_THROW(make_synthetic(s), ConfigError);
  s = synthetic_spec();
  s.format = "parquet";
  EXPECT_THROW(load_dataset(s), ConfigError);
}

TEST(Csv, ParsesAndNormalizes) {
  DatasetSpec spec;
  spec.classes = 3;
  spec.input_shape = {1, 1, 2};
  spec.mean = 1.0;
  spec.stddev = 2.0;
  std::istringstream in("# label,p0,p1\n2,1,5\n\n0,3,-1\n");
  const auto d = parse_csv_dataset(in, spec);
  EXPECT_EQ(d.labels, (std::vector<int>{2, 0}));
  EXPECT_EQ(d.images, (std::vector<double>{0.0, 2.0, 1.0, -1.0}));
}

TEST(Csv, ErrorsNameTheLine) {
  DatasetSpec spec;
  spec.classes = 3;
  spec.input_shape = {1, 1, 2};
  auto parse = [&](const std::string& text) {
    return error_of<FormatError>([&] {
      std::istringstream in(text);
      parse_csv_dataset(in, spec, "d.csv");
    });
  };
  EXPECT_NE(parse("0,1,2\n1,1\n").find("d.csv:2"), std::string::npos);
  EXPECT_NE(parse("0,1,x\n").find("bad number"), std::string::npos);
  EXPECT_NE(parse("3,1,2\n").find("label"), std::string::npos);
  EXPECT_NE(parse("0.5,1,2\n").find("label"), std::string::npos);
}

TEST(Config, PrintedDefaultsParseBackToTheSameText) {
  const auto text = print_config(default_train_config());
  EXPECT_EQ(print_config(parse_config_text(text)), text);
  const auto bare = print_config(default_train_config(), false);
  EXPECT_EQ(bare.find('#'), std::string::npos);
  EXPECT_EQ(print_config(parse_config_text(bare), false), bare);
}

TEST(Config, NonDefaultValuesRoundTrip) {
  const auto cfg = parse_config_text(
      "protocol = distill\nlr_steps = 3,7\nwidths = 4,8,8\nir_mode = paper\narch = convnet-small-nobn\n"
      "data.input_shape = 1,5,5\nlambda = 0.25\nce_teacher = false\nstatic_ckpt = t.ckpt\n");
  EXPECT_EQ(cfg.protocol, Protocol::distill);
  EXPECT_EQ(cfg.lr_steps, (std::vector<std::size_t>{3, 7}));
  EXPECT_EQ(cfg.arch.widths, (std::vector<std::size_t>{4, 8, 8}));
  EXPECT_EQ(cfg.plan.ir_mode, IrMode::paper);
  EXPECT_EQ(cfg.data.input_shape, (Shape{1, 5, 5}));
  EXPECT_EQ(cfg.loss.lambda, 0.25);
  EXPECT_FALSE(cfg.loss.ce_teacher);
  EXPECT_EQ(print_config(parse_config_text(print_config(cfg))), print_config(cfg));
}

TEST(Config, UnknownAndDuplicateKeysNameTheLine) {
  const auto unknown = error_of<ConfigError>([] { parse_config_text("epochs = 3\nlearning_rate = 0.1\n", "run.cfg"); });
  EXPECT_NE(unknown.find("run.cfg:2"), std::string::npos);
  EXPECT_NE(unknown.find("learning_rate"), std::string::npos);
  const auto dup = error_of<ConfigError>([] { parse_config_text("lr = 0.1\n\nlr = 0.2\n", "run.cfg"); });
  EXPECT_NE(dup.find("run.cfg:3"), std::string::npos);
  EXPECT_NE(dup.find("line 1"), std::string::npos);
  EXPECT_THROW(parse_config_text("epochs 3\n"), ConfigError);
  EXPECT_THROW(parse_config_text("epochs = three\n"), ConfigError);
  EXPECT_THROW(parse_config_text("ce_teacher = maybe\n"), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  auto cfg = default_train_config();
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_train_config();
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_train_config();
  cfg.protocol = Protocol::finetune;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(default_train_config().validate());
}

TEST(Config, SeedEnvironmentOverridesFile) {
  EnvGuard guard("GPD_SEED");
  auto cfg = parse_config_text("seed = 3\n");
  unsetenv("GPD_SEED");
  apply_seed_env(cfg);
  EXPECT_EQ(cfg.seed, 3u);
  setenv("GPD_SEED", "11", 1);
  apply_seed_env(cfg);
  EXPECT_EQ(cfg.seed, 11u);
  setenv("GPD_SEED", "eleven", 1);
  EXPECT_THROW(apply_seed_env(cfg), ConfigError);
}

TEST(Plot, OneTickPerRecord) {
  std::vector<TrainRecord> rec(3);
  for (std::size_t i = 0; i < 3; ++i) {
    rec[i].epoch = i;
    rec[i].acc_s = 0.1 * static_cast<double>(i);
    rec[i].acc_t = 0.2 * static_cast<double>(i);
    rec[i].gap = rec[i].acc_t - rec[i].acc_s;
  }
  const auto svg = render_svg(rec, PlotStyle{});
  std::size_t ticks = 0;
  for (auto p = svg.find("class=\"xtick\""); p != std::string::npos; p = svg.find("class=\"xtick\"", p + 1)) ++ticks;
  EXPECT_EQ(ticks, 3u);
  EXPECT_NE(svg.find("class=\"gap\""), std::string::npos);
  EXPECT_NE(svg.find("class=\"teacher\""), std::string::npos);
  EXPECT_NE(svg.find("class=\"student\""), std::string::npos);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_THROW(render_svg({}, PlotStyle{}), FormatError);
}
