#pragma once

// Inverse reparameterization: grow a plain student into a dynamic teacher that
// computes the same function.
//
// Channel level: every weight is replicated r times along each expanded
// channel axis and divided by a compensating factor. Two conventions exist:
//
//   paper    divide by r when the *output* axis is expanded (first and
//            intermediate layers); the last layer is left unscaled. Activations
//            inside the teacher are 1/r of the student's, which only survives
//            positively homogeneous layers, so BN is rejected in this mode.
//   bn_safe  divide by r when the *input* axis is expanded. Every teacher
//            activation is an exact replica of the student's, so BN parameters
//            and statistics can simply be tiled.
//
// Branch level: the expanded kernel becomes branch 0 of an ExpandedBlock with
// scale vector 1; branches 1..M-1 are randomly initialized [1x1 -> KxK] stacks
// with scale vector 0.

#include <cmath>
#include <string>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/rng.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

struct ExpansionPlan {
  std::size_t ratio = 1;
  std::size_t branches = 1;
  double epsilon = 0.0;
  IrMode ir_mode = IrMode::bn_safe;
  std::uint64_t seed = 0;

  void validate() const {
    if (ratio < 1) throw ConfigError("expansion ratio r must be >= 1");
    if (branches < 1) throw ConfigError("branch count M must be >= 1");
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be a finite value >= 0");
  }
};

// Factor by which the student-side weight exceeds one teacher replica. IR
// divides by it, CBR multiplies by it.
inline double reparam_factor(bool input_expanded, bool output_expanded, std::size_t r, IrMode mode) {
  const bool expanded = mode == IrMode::paper ? output_expanded : input_expanded;
  return expanded ? static_cast<double>(r) : 1.0;
}

inline double bias_factor(bool output_expanded, std::size_t r, IrMode mode) {
  return mode == IrMode::paper && output_expanded ? static_cast<double>(r) : 1.0;
}

inline double population_std(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

// Replicates `kernel` out_rep x in_rep times, dividing by `divisor`, and adds
// i.i.d. uniform noise in [-eps * std(W), eps * std(W)] to every replica.
inline Tensor replicate_kernel(const Tensor& kernel, std::size_t out_rep, std::size_t in_rep, double divisor,
                               double epsilon, Rng& rng) {
  const std::size_t co = kernel.dim(0), ci = kernel.dim(1), kk = kernel.dim(2) * kernel.dim(3);
  const std::size_t to = co * out_rep, ti = ci * in_rep;
  const double amp = epsilon * population_std(kernel.values());
  const bool noisy = amp > 0.0 && out_rep * in_rep > 1;
  std::vector<double> out(to * ti * kk);
  for (std::size_t a = 0; a < out_rep; ++a)
    for (std::size_t b = 0; b < in_rep; ++b)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ci; ++i)
          for (std::size_t k = 0; k < kk; ++k) {
            double v = kernel[(o * ci + i) * kk + k] / divisor;
            if (noisy) v += uniform(rng, -amp, amp);
            out[((a * co + o) * ti + b * ci + i) * kk + k] = v;
          }
  return Tensor({to, ti, kernel.dim(2), kernel.dim(3)}, std::move(out), true);
}

inline Tensor tile_vector(const Tensor& v, std::size_t reps, double divisor = 1.0, bool requires_grad = false) {
  const std::size_t n = v.numel();
  std::vector<double> out(n * reps);
  for (std::size_t a = 0; a < reps; ++a)
    for (std::size_t i = 0; i < n; ++i) out[a * n + i] = v[i] / divisor;
  return Tensor({n * reps}, std::move(out), requires_grad);
}

// Channel-level expansion of one weight layer according to its role.
inline ConvWeight expand_channels(const ConvWeight& w, std::size_t r, Role role, double epsilon, Rng& rng,
                                  IrMode mode = IrMode::paper) {
  w.validate();
  if (r < 1) throw ConfigError("expand_channels: r must be >= 1");
  if (role == Role::none) throw ShapeError("expand_channels: weight layer needs a role");
  if (r == 1) return ConvWeight{deep_copy(w.kernel), deep_copy(w.bias), w.stride, w.padding};
  const bool in_exp = role != Role::first;
  const bool out_exp = role != Role::last;
  ConvWeight out;
  out.kernel = replicate_kernel(w.kernel, out_exp ? r : 1, in_exp ? r : 1, reparam_factor(in_exp, out_exp, r, mode),
                                epsilon, rng);
  if (w.has_bias()) out.bias = tile_vector(w.bias, out_exp ? r : 1, bias_factor(out_exp, r, mode), true);
  out.stride = w.stride;
  out.padding = w.padding;
  return out;
}

// Tiles gamma, beta, and the running statistics r times into the teacher set;
// the student set keeps the original (un-tiled) statistics.
inline DualBNState expand_bn(const DualBNState& p, std::size_t r, IrMode mode = IrMode::bn_safe) {
  if (mode == IrMode::paper) {
    throw ConfigError("expand_bn: batchnorm layers cannot be expanded in ir_mode=paper (use bn_safe)");
  }
  if (r < 1) throw ConfigError("expand_bn: r must be >= 1");
  DualBNState out;
  out.gamma = tile_vector(p.gamma, r, 1.0, true);
  out.beta = tile_vector(p.beta, r, 1.0, true);
  out.teacher_mean = tile_vector(p.student_mean, r);
  out.teacher_var = tile_vector(p.student_var, r);
  out.student_mean = p.student_mean.clone();
  out.student_var = p.student_var.clone();
  out.momentum = p.momentum;
  out.eps = p.eps;
  return out;
}

// Branch-level expansion. Extra branches map the block's input width to itself
// with a 1x1 conv, then to the output width with the K x K conv.
inline ExpandedBlock expand_branches(const ConvWeight& w_expanded, std::size_t branches, Rng& rng) {
  w_expanded.validate();
  if (branches < 1) throw ConfigError("expand_branches: M must be >= 1");
  ExpandedBlock b;
  b.branches.push_back({deep_copy(w_expanded.kernel)});
  b.branches[0][0].set_requires_grad(true);
  b.bias = deep_copy(w_expanded.bias);
  const std::size_t out = w_expanded.out_channels(), in = w_expanded.in_channels(), k = w_expanded.kernel_size();
  for (std::size_t m = 1; m < branches; ++m) {
    auto pw = he_kernel(rng, in, in, 1);
    auto sp = he_kernel(rng, out, in, k);
    b.branches.push_back({std::move(pw), std::move(sp)});
  }
  if (branches > 1) {
    b.scales.push_back(Tensor::full({out}, 1.0, true));
    for (std::size_t m = 1; m < branches; ++m) b.scales.push_back(Tensor::zeros({out}, true));
  }
  return b;
}

// Builds the dynamic teacher from a plain student.
inline ModelGraph expand_model(const ModelGraph& student, const ExpansionPlan& plan) {
  plan.validate();
  if (!student.is_plain()) throw ConfigError("expand_model: model is already expanded (r=" +
                                             std::to_string(student.meta.ratio) + ", M=" +
                                             std::to_string(student.meta.branches) + ")");
  if (plan.ir_mode == IrMode::paper && student.has_batchnorm()) {
    throw ConfigError("expand_model: ir_mode=paper requires a BN-free model; use bn_safe");
  }
  ModelGraph t;
  t.layers = student.layers;
  t.meta = student.meta;
  t.meta.ratio = plan.ratio;
  t.meta.branches = plan.branches;
  t.meta.ir_mode = plan.ir_mode;
  t.meta.epsilon = plan.epsilon;
  t.meta.expand_seed = plan.seed;
  Rng rng = make_rng(plan.seed, 0xE1ULL);
  for (std::size_t i = 0; i < student.layers.size(); ++i) {
    const auto& l = student.layers[i];
    if (l.weight_bearing()) {
      const auto& src = student.block(i);
      ConvWeight w{src.main_kernel(), src.bias, l.stride, l.padding};
      auto wide = expand_channels(w, plan.ratio, l.role, plan.epsilon, rng, plan.ir_mode);
      t.params.emplace_back(expand_branches(wide, plan.branches, rng));
    } else if (l.kind == LayerKind::bn) {
      t.params.emplace_back(expand_bn(student.bn(i), plan.ratio, plan.ir_mode));
    } else {
      t.params.emplace_back(std::monostate{});
    }
  }
  return t;
}

}  // namespace gpd
