#include <gtest/gtest.h>

#include "gpd/gpd.hpp"

using namespace gpd;

namespace {

const std::vector<int> kLabels{0, 3, 1, 2};

Tensor logits(std::uint64_t seed, bool grad = true) {
  Rng rng = make_rng(seed);
  auto t = random_tensor(rng, {4, 5});
  t.set_requires_grad(grad);
  return t;
}

}  // namespace

TEST(GpdLoss, IdenticalLogitsGiveTwiceTheCrossEntropy) {
  const auto z = logits(1);
  const auto out = gpd_loss(z, z, std::nullopt, kLabels, LossConfig{});
  const auto v = out.values();
  EXPECT_EQ(v.kd_sd, 0.0);
  EXPECT_NEAR(v.total, 2.0 * softmax_cross_entropy(z, kLabels).item(), 1e-12);
}

TEST(GpdLoss, WithoutStaticTeacherThoseTermsAreUndefined) {
  const auto s = logits(2), t = logits(3);
  const auto out = gpd_loss(s, t, std::nullopt, kLabels, LossConfig{});
  EXPECT_FALSE(out.kd_student_static.defined());
  EXPECT_FALSE(out.kd_dynamic_static.defined());
  const auto v = out.values();
  EXPECT_EQ(v.kd_ss, 0.0);
  EXPECT_EQ(v.kd_ds, 0.0);
  EXPECT_NEAR(v.total, v.ce_s + v.ce_t + v.kd_sd, 1e-12);
}

TEST(GpdLoss, FullObjectiveSumsAllFiveTerms) {
  const auto s = logits(4), t = logits(5), st = logits(6, false);
  LossConfig cfg;
  cfg.use_static_teacher = true;
  cfg.lambda = 0.7;
  const auto v = gpd_loss(s, t, st, kLabels, cfg).values();
  EXPECT_GT(v.kd_ss, 0.0);
  EXPECT_GT(v.kd_ds, 0.0);
  EXPECT_NEAR(v.total, v.ce_s + 0.7 * v.kd_ss + v.ce_t + v.kd_sd + v.kd_ds, 1e-12);
  EXPECT_NEAR(v.kd_ss, kd_kl_divergence(s, st, 4.0).item(), 1e-15);
}

TEST(GpdLoss, DefaultsAreUnitLambdaAndTemperatureFour) {
  const LossConfig cfg;
  EXPECT_EQ(cfg.lambda, 1.0);
  EXPECT_EQ(cfg.temperature, 4.0);
  EXPECT_FALSE(cfg.use_static_teacher);
}

TEST(GpdLoss, MissingRequiredLogitsAreConfigErrors) {
  const auto s = logits(7);
  LossConfig cfg;
  EXPECT_THROW(gpd_loss(s, Tensor{}, std::nullopt, kLabels, cfg), ConfigError);
  cfg.use_static_teacher = true;
  EXPECT_THROW(gpd_loss(s, logits(8), std::nullopt, kLabels, cfg), ConfigError);
  cfg.use_static_teacher = false;
  cfg.ce_teacher = cfg.kd_dynamic = false;
  EXPECT_NO_THROW(gpd_loss(s, Tensor{}, std::nullopt, kLabels, cfg));
  cfg.lambda = -1.0;
  EXPECT_THROW(gpd_loss(s, Tensor{}, std::nullopt, kLabels, cfg), ConfigError);
}

TEST(GpdLoss, BaselineObjectiveIsPlainCrossEntropy) {
  const auto s = logits(9);
  LossConfig cfg;
  cfg.ce_teacher = cfg.kd_dynamic = false;
  const auto v = gpd_loss(s, Tensor{}, std::nullopt, kLabels, cfg).values();
  EXPECT_EQ(v.total, v.ce_s);
}

TEST(GpdLoss, DistillationTermsNeverReachTheirTargets) {
  const auto s = logits(10), t = logits(11), st = logits(12);
  LossConfig cfg;
  cfg.use_static_teacher = true;
  cfg.ce_teacher = false;
  const auto out = gpd_loss(s, t, st, kLabels, cfg);
  out.kd_student_dynamic.backward();
  for (double g : t.grad()) EXPECT_EQ(g, 0.0);
  double gs = 0.0;
  for (double g : s.grad()) gs += std::abs(g);
  EXPECT_GT(gs, 0.0);
  for (double g : st.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GpdLoss, StopGradientContract) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto rep = verify_stop_gradient(LossConfig{}, seed);
    for (const auto& c : rep.checks) EXPECT_TRUE(c.passed) << c.name << " " << c.deviation;
  }
}

TEST(GpdLoss, NonFiniteComponentIsNamed) {
  LossValues v;
  v.kd_sd = std::numeric_limits<double>::infinity();
  try {
    check_loss_finite(v);
    ADD_FAILURE() << "no error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("kd_sd"), std::string::npos);
  }
  EXPECT_NO_THROW(check_loss_finite(LossValues{}));
}
