#pragma once

// The distillation objective. With a static teacher T_s, a dynamic teacher T_d
// and the student S extracted from it:
//
//   total = CE(S) + lambda * KD(S | T_s) + CE(T_d) + KD(S | T_d) + KD(T_d | T_s)
//
// where KD(a | b) never propagates gradient into b.

#include <cmath>
#include <optional>
#include <span>
#include <string>

#include "gpd/errors.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

struct LossConfig {
  double lambda = 1.0;
  double temperature = 4.0;
  bool use_static_teacher = false;
  bool ce_teacher = true;  // CE(T_d)
  bool kd_dynamic = true;  // KD(S | T_d)

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss lambda must be a finite value >= 0");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("KD temperature must be positive");
  }

  bool needs_teacher() const { return ce_teacher || kd_dynamic; }
};

// Plain values of each component; disabled terms are 0.
struct LossValues {
  double ce_s = 0.0, kd_ss = 0.0, ce_t = 0.0, kd_sd = 0.0, kd_ds = 0.0, total = 0.0;
};

// Tape-connected components. Disabled terms are left undefined and never
// enter the tape.
struct LossBreakdown {
  Tensor ce_student;
  Tensor kd_student_static;
  Tensor ce_teacher;
  Tensor kd_student_dynamic;
  Tensor kd_dynamic_static;
  Tensor total;
  double lambda = 1.0;

  LossValues values() const {
    auto v = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
    return {v(ce_student), v(kd_student_static), v(ce_teacher), v(kd_student_dynamic), v(kd_dynamic_static),
            v(total)};
  }
};

inline LossBreakdown gpd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                              const std::optional<Tensor>& static_logits, std::span<const int> labels,
                              const LossConfig& cfg) {
  cfg.validate();
  if (cfg.use_static_teacher && !(static_logits && static_logits->defined())) {
    throw ConfigError("gpd_loss: use_static_teacher is set but no static-teacher logits were given");
  }
  if (cfg.needs_teacher() && !teacher_logits.defined()) {
    throw ConfigError("gpd_loss: dynamic-teacher logits are required by the enabled terms");
  }
  const double tau = cfg.temperature;
  LossBreakdown out;
  out.lambda = cfg.lambda;
  out.ce_student = softmax_cross_entropy(student_logits, labels);
  std::vector<Tensor> terms{out.ce_student};
  if (cfg.use_static_teacher) {
    const auto fixed = stop_gradient(*static_logits);
    out.kd_student_static = kd_kl_divergence(student_logits, fixed, tau);
    terms.push_back(cfg.lambda == 1.0 ? out.kd_student_static : scale(out.kd_student_static, cfg.lambda));
  }
  if (cfg.ce_teacher) {
    out.ce_teacher = softmax_cross_entropy(teacher_logits, labels);
    terms.push_back(out.ce_teacher);
  }
  if (cfg.kd_dynamic) {
    out.kd_student_dynamic = kd_kl_divergence(student_logits, stop_gradient(teacher_logits), tau);
    terms.push_back(out.kd_student_dynamic);
  }
  if (cfg.use_static_teacher && teacher_logits.defined()) {
    out.kd_dynamic_static = kd_kl_divergence(teacher_logits, stop_gradient(*static_logits), tau);
    terms.push_back(out.kd_dynamic_static);
  }
  out.total = add_n(terms);
  return out;
}

// Throws NumericError naming the first non-finite component.
inline void check_loss_finite(const LossValues& v) {
  const std::pair<const char*, double> parts[] = {{"ce_s", v.ce_s},   {"kd_ss", v.kd_ss}, {"ce_t", v.ce_t},
                                                  {"kd_sd", v.kd_sd}, {"kd_ds", v.kd_ds}, {"total", v.total}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw NumericError(std::string("non-finite loss component ") + name + " = " + std::to_string(value));
    }
  }
}

}  // namespace gpd
