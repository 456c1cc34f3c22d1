#pragma once

// Self-contained numerical checks of every function-preservation and gradient
// claim. Each battery builds its own seeded models, so suites are independent
// and replayable from the printed seed.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gpd/channel_branch_reparam.hpp"
#include "gpd/forward.hpp"
#include "gpd/inverse_reparam.hpp"
#include "gpd/losses.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/optim.hpp"
#include "gpd/report.hpp"
#include "gpd/rng.hpp"
#include "gpd/tensor.hpp"
#include "gpd/trainer.hpp"

namespace gpd {

// ---------------------------------------------------------------------------
// Random models and tensors

inline Tensor random_tensor(Rng& rng, Shape shape, double sd = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, sd);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return max_abs_diff(a.values(), b.values());
}

// A random sequential chain: 2-4 conv stages (optional BN, ReLU), global
// pooling, and a linear head. BN statistics and affine parameters are
// randomized so that eval-mode normalization is not the identity.
inline ModelGraph random_chain(std::uint64_t seed, bool with_bn) {
  Rng rng = make_rng(seed, 0xA11);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  ModelMeta meta;
  meta.arch = with_bn ? "random-bn" : "random";
  meta.seed = seed;
  meta.ir_mode = with_bn ? IrMode::bn_safe : IrMode::paper;
  meta.input_shape = {pick(1, 3), pick(4, 6), pick(4, 6)};
  std::vector<LayerSpec> layers;
  std::size_t c = meta.input_shape[0];
  const std::size_t stages = pick(1, 3);
  for (std::size_t s = 0; s < stages; ++s) {
    const std::size_t out = pick(1, 4);
    const bool k3 = pick(0, 1) == 1;
    layers.push_back(LayerSpec::conv(c, out, k3 ? 3 : 1, pick(1, 2), k3 ? 1 : 0, !with_bn && pick(0, 1) == 1));
    if (with_bn) layers.push_back(LayerSpec::bn(out));
    layers.push_back(LayerSpec::relu());
    c = out;
  }
  layers.push_back(LayerSpec::pool());
  layers.push_back(LayerSpec::linear(c, pick(2, 5), pick(0, 1) == 1));
  assign_roles(layers);
  auto m = build_model(std::move(layers), meta);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].kind == LayerKind::bn) {
      auto& s = m.bn(i);
      for (auto& v : s.gamma.mutable_values()) v = uniform(rng, 0.5, 1.5);
      for (auto& v : s.beta.mutable_values()) v = uniform(rng, -0.5, 0.5);
      for (auto& v : s.student_mean.mutable_values()) v = uniform(rng, -0.5, 0.5);
      for (auto& v : s.student_var.mutable_values()) v = uniform(rng, 0.5, 2.0);
      std::copy(s.student_mean.values().begin(), s.student_mean.values().end(), s.teacher_mean.mutable_values().begin());
      std::copy(s.student_var.values().begin(), s.student_var.values().end(), s.teacher_var.mutable_values().begin());
    } else if (m.layers[i].weight_bearing() && m.block(i).bias.defined()) {
      for (auto& v : m.block(i).bias.mutable_values()) v = normal(rng, 0.0, 0.3);
    }
  }
  return m;
}

inline Tensor random_input(const ModelGraph& m, std::size_t n, Rng& rng) {
  const auto& s = m.meta.input_shape;
  return random_tensor(rng, {n, s[0], s[1], s[2]});
}

// Moves every trainable tensor of `m` away from its initial value, including
// the extra-branch scale vectors.
inline void perturb_parameters(ModelGraph& m, Rng& rng, double sd) {
  for (auto& p : m.parameters()) {
    for (auto& v : p.tensor.mutable_values()) v += normal(rng, 0.0, sd);
  }
}

// ---------------------------------------------------------------------------
// Inverse reparameterization

// The three-layer 1x1 chain with W1 = [[1],[2]], W2 = [[1,1],[2,0]],
// W3 = [[1,2]] and input 3 produces 21; so must its r = 2 expansion.
inline ModelGraph scalar_chain() {
  std::vector<LayerSpec> layers{LayerSpec::conv(1, 2, 1), LayerSpec::conv(2, 2, 1), LayerSpec::pool(),
                                LayerSpec::linear(2, 1, false)};
  assign_roles(layers);
  ModelMeta meta;
  meta.arch = "scalar-chain";
  meta.ir_mode = IrMode::paper;
  meta.input_shape = {1, 1, 1};
  auto m = build_model(std::move(layers), meta);
  const double w1[] = {1, 2}, w2[] = {1, 1, 2, 0}, w3[] = {1, 2};
  std::copy(std::begin(w1), std::end(w1), m.block(0).branches[0][0].mutable_values().begin());
  std::copy(std::begin(w2), std::end(w2), m.block(1).branches[0][0].mutable_values().begin());
  std::copy(std::begin(w3), std::end(w3), m.block(3).branches[0][0].mutable_values().begin());
  return m;
}

// Dense matrix-vector evaluation of a chain of 1x1 layers, independent of the
// convolution kernels.
inline std::vector<double> dense_chain_output(const ModelGraph& m, std::vector<double> x) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (!m.layers[i].weight_bearing()) continue;
    const auto& w = m.block(i).main_kernel();
    std::vector<double> y(w.dim(0), 0.0);
    for (std::size_t o = 0; o < w.dim(0); ++o)
      for (std::size_t j = 0; j < w.dim(1); ++j) y[o] += w[o * w.dim(1) + j] * x[j];
    x = std::move(y);
  }
  return x;
}

inline Report verify_scalar_chain() {
  Report rep;
  auto student = scalar_chain();
  ExpansionPlan plan{2, 1, 0.0, IrMode::paper, 0};
  auto teacher = expand_model(student, plan);
  const Tensor x({1, 1, 1, 1}, {3.0});
  NoGradGuard guard;
  const double y = forward(student, x, View::student, Mode::eval).item();
  const double y3 = forward(teacher, x, View::teacher, Mode::eval).item();
  const double dense = dense_chain_output(teacher, {3.0})[0];
  rep.add_exact("ir.scalar_chain.student=21", std::abs(y - 21.0), "Y=" + format_double(y));
  rep.add_exact("ir.scalar_chain.teacher=student", std::abs(y3 - y), "Y3=" + format_double(y3));
  rep.add_exact("ir.scalar_chain.dense_oracle", std::abs(dense - y), "dense=" + format_double(dense));
  return rep;
}

// Teacher view of IR(m) against m itself, eval mode, over `trials` random
// chains with r cycling through {2, 3}.
inline Report verify_ir_preservation(bool with_bn, std::size_t trials, std::uint64_t seed0 = 0) {
  Report rep;
  double worst = 0.0;
  std::uint64_t worst_seed = seed0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t seed = seed0 + t;
    auto student = random_chain(seed, with_bn);
    ExpansionPlan plan{2 + t % 2, 1 + t % 3, 0.0, with_bn ? IrMode::bn_safe : IrMode::paper, seed};
    auto teacher = expand_model(student, plan);
    Rng rng = make_rng(seed, 0x1);
    const auto x = random_input(student, 4, rng);
    NoGradGuard guard;
    const auto ys = forward(student, x, View::student, Mode::eval);
    const auto yt = forward(teacher, x, View::teacher, Mode::eval);
    const double d = max_abs_diff(ys, yt);
    if (d >= worst) {
      worst = d;
      worst_seed = seed;
    }
  }
  rep.add(std::string("ir.preservation.") + (with_bn ? "bn_safe" : "paper") + " x" + std::to_string(trials), worst,
          1e-9, "worst seed " + std::to_string(worst_seed));
  return rep;
}

// Output deviation at epsilon in {1e-2, 1e-3, 1e-4} must shrink monotonically.
inline Report verify_noise_monotone(std::size_t trials, std::uint64_t seed0 = 0) {
  Report rep;
  std::size_t bad = 0;
  double worst_small = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto seed = seed0 + t;
    auto student = random_chain(seed, t % 2 == 1);
    Rng rng = make_rng(seed, 0x2);
    const auto x = random_input(student, 4, rng);
    NoGradGuard guard;
    const auto ys = forward(student, x, View::student, Mode::eval);
    double prev = INFINITY;
    for (double eps : {1e-2, 1e-3, 1e-4}) {
      auto teacher = expand_model(student, {2, 1, eps, t % 2 == 1 ? IrMode::bn_safe : IrMode::paper, seed});
      const double d = max_abs_diff(ys, forward(teacher, x, View::teacher, Mode::eval));
      if (!(d < prev) && d > 1e-15) ++bad;
      prev = d;
      if (eps == 1e-4) worst_small = std::max(worst_small, d);
    }
  }
  rep.add_exact("ir.noise_monotone x" + std::to_string(trials), static_cast<double>(bad),
                "non-monotone trials; max dev at 1e-4 = " + format_double(worst_small));
  return rep;
}

// ---------------------------------------------------------------------------
// Channel-branch reparameterization

// CBR(IR(W)) against W for every parameter of random chains.
inline Report verify_cbr_inverse(std::uint64_t seed0 = 0) {
  Report rep;
  for (std::size_t r : {2, 3})
    for (std::size_t m : {1, 2, 6}) {
      double worst = 0.0;
      for (int bn = 0; bn < 2; ++bn)
        for (std::uint64_t s = 0; s < 4; ++s) {
          const auto seed = seed0 + s;
          auto student = random_chain(seed, bn == 1);
          auto teacher = expand_model(student, {r, m, 0.0, bn ? IrMode::bn_safe : IrMode::paper, seed});
          const auto view = extract_student(teacher);
          const auto got = view.parameters();
          std::vector<Tensor> want;
          for (std::size_t i = 0; i < student.layers.size(); ++i) {
            if (student.layers[i].weight_bearing()) {
              want.push_back(student.block(i).main_kernel());
              if (student.block(i).bias.defined()) want.push_back(student.block(i).bias);
            } else if (student.layers[i].kind == LayerKind::bn) {
              want.push_back(student.bn(i).gamma);
              want.push_back(student.bn(i).beta);
            }
          }
          if (got.size() != want.size()) {
            worst = INFINITY;
            continue;
          }
          for (std::size_t k = 0; k < got.size(); ++k) worst = std::max(worst, max_abs_diff(got[k].tensor, want[k]));
        }
      rep.add("cbr.inverse_at_init r=" + std::to_string(r) + " M=" + std::to_string(m), worst, 1e-12);
    }
  return rep;
}

// Student-path multi-branch computation done step by step: every branch conv
// is channel-extracted and applied in sequence, then scaled and summed.
inline Tensor sequential_student_block(const Tensor& x, const ExpandedBlock& b, const LayerSpec& l, std::size_t r,
                                       IrMode mode) {
  const bool in_exp = l.input_expanded(), out_exp = l.output_expanded();
  std::vector<Tensor> terms;
  for (std::size_t m = 0; m < b.branches.size(); ++m) {
    const auto& st = b.branches[m];
    Tensor h;
    if (st.size() == 1) {
      h = conv2d(x, extract_kernel(st[0], in_exp, out_exp, r, mode), {}, l.stride, l.padding);
    } else {
      h = conv2d(x, extract_kernel(st[0], in_exp, in_exp, r, mode), {}, 1, 0);
      h = conv2d(h, extract_kernel(st[1], in_exp, out_exp, r, mode), {}, l.stride, l.padding);
    }
    if (!b.scales.empty()) h = mul_along(h, narrow(b.scales[m], {l.out_channels}), 1);
    terms.push_back(h);
  }
  auto y = add_n(terms);
  if (b.bias.defined()) y = add_along(y, extract_bias(b.bias, out_exp, r, mode), 1);
  return y;
}

inline Report verify_merge_soundness(std::size_t trials, std::uint64_t seed0 = 0) {
  Report rep;
  double worst = 0.0;
  std::uint64_t worst_seed = seed0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto seed = seed0 + t;
    Rng rng = make_rng(seed, 0xB0);
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    const Role roles[] = {Role::first, Role::intermediate, Role::last};
    const bool k3 = pick(0, 1) == 1;
    LayerSpec l = LayerSpec::conv(pick(1, 4), pick(1, 4), k3 ? 3 : 1, pick(1, 2), k3 ? pick(0, 1) : 0, pick(0, 1) == 1);
    l.role = roles[pick(0, 2)];
    const std::size_t r = pick(1, 3), branches = pick(1, 4);
    const IrMode mode = pick(0, 1) ? IrMode::paper : IrMode::bn_safe;
    const ConvWeight w{random_tensor(rng, {l.out_channels, l.in_channels, l.kernel, l.kernel}),
                       l.bias ? random_tensor(rng, {l.out_channels}) : Tensor{}, l.stride, l.padding};
    auto wide = expand_channels(w, r, l.role, 0.0, rng, mode);
    auto block = expand_branches(wide, branches, rng);
    // Drift every tensor, scale vectors included.
    for (auto& stack : block.branches)
      for (auto& k : stack)
        for (auto& v : k.mutable_values()) v += normal(rng, 0.0, 0.5);
    for (auto& s : block.scales)
      for (auto& v : s.mutable_values()) v = normal(rng, 0.0, 1.0);
    const auto x = random_tensor(rng, {2, l.in_channels, pick(3, 6), pick(3, 6)});
    NoGradGuard guard;
    const auto merged = merge_block(block, l, r, mode);
    const auto y_merged = conv2d(x, merged);
    const auto y_seq = sequential_student_block(x, block, l, r, mode);
    const double d = max_abs_diff(y_merged, y_seq);
    if (d >= worst) {
      worst = d;
      worst_seed = seed;
    }
  }
  rep.add("cbr.merge_soundness x" + std::to_string(trials), worst, 1e-9, "worst seed " + std::to_string(worst_seed));
  return rep;
}

// Student view of an expanded model at init versus the original student.
inline Report verify_student_view(std::size_t trials, std::uint64_t seed0 = 0) {
  Report rep;
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto seed = seed0 + t;
    const bool bn = t % 2 == 1;
    auto student = random_chain(seed, bn);
    auto teacher = expand_model(student, {2 + t % 2, 1 + t % 6, 0.0, bn ? IrMode::bn_safe : IrMode::paper, seed});
    Rng rng = make_rng(seed, 0x3);
    const auto x = random_input(student, 3, rng);
    NoGradGuard guard;
    worst = std::max(worst, max_abs_diff(forward(student, x, View::student, Mode::eval),
                                         forward(teacher, x, View::student, Mode::eval)));
  }
  rep.add("cbr.student_view_at_init x" + std::to_string(trials), worst, 1e-9);
  return rep;
}

// ---------------------------------------------------------------------------
// Finite differences

// Elementwise relative error |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Max relative error between the tape gradient of `loss_fn` and central
// differences, over every element of every tensor in `params`.
inline double finite_difference_error(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                      double h = 1e-5) {
  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  NoGradGuard guard;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto vals = params[k].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = loss_fn().item();
      vals[i] = orig - h;
      const double down = loss_fn().item();
      vals[i] = orig;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// Reduces any tensor to a scalar with fixed random weights so every output
// element carries a distinct gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xF0);
  return sum(mul(y, random_tensor(rng, y.shape())));
}

inline Report verify_op_gradients(std::uint64_t seed = 0) {
  Report rep;
  Rng rng = make_rng(seed, 0xD0);
  auto check = [&](const std::string& name, const std::function<Tensor()>& fn, std::vector<Tensor> params) {
    rep.add("grad." + name, finite_difference_error(fn, std::move(params)), 1e-4, "seed " + std::to_string(seed));
  };

  {
    auto a = random_tensor(rng, {2, 3}, 1.0, true), b = random_tensor(rng, {2, 3}, 1.0, true);
    check("elementwise", [=] { return add_n({weighted_sum(add(a, b), 1), weighted_sum(sub(a, b), 2),
                                           weighted_sum(mul(a, b), 3), weighted_sum(scale(a, -1.7), 4),
                                           mean(b), sum(a)}); },
        {a, b});
  }
  {
    auto a = random_tensor(rng, {3, 4, 2}, 1.0, true);
    auto v0 = random_tensor(rng, {3}, 1.0, true), v1 = random_tensor(rng, {4}, 1.0, true);
    check("structural", [=] {
      return add_n({weighted_sum(narrow(a, {2, 3, 1}), 5), weighted_sum(reshape(a, {12, 2}), 6),
                    weighted_sum(mul_along(a, v0, 0), 7), weighted_sum(add_along(a, v1, 1), 8)});
    }, {a, v0, v1});
  }
  {
    auto x = random_tensor(rng, {2, 3, 4, 4}, 1.0, true);
    auto w = random_tensor(rng, {4, 3, 3, 3}, 0.5, true), b = random_tensor(rng, {4}, 0.5, true);
    check("conv2d.k3s1p1", [=] { return weighted_sum(conv2d(x, w, b, 1, 1), 9); }, {x, w, b});
    check("conv2d.k3s2p0", [=] { return weighted_sum(conv2d(x, w, {}, 2, 0), 10); }, {x, w});
    auto w1 = random_tensor(rng, {5, 3, 1, 1}, 0.5, true);
    check("conv2d.k1s1p0", [=] { return weighted_sum(conv2d(x, w1, {}, 1, 0), 11); }, {x, w1});
    auto w2 = random_tensor(rng, {2, 3, 2, 2}, 0.5, true);
    check("conv2d.k2s2p1", [=] { return weighted_sum(conv2d(x, w2, {}, 2, 1), 12); }, {x, w2});
  }
  {
    auto x = random_tensor(rng, {3, 5}, 1.0, true);
    auto w = random_tensor(rng, {4, 5}, 1.0, true), b = random_tensor(rng, {4}, 1.0, true);
    check("linear", [=] { return weighted_sum(linear(x, w, b), 13); }, {x, w, b});
  }
  {
    auto x = random_tensor(rng, {3, 2, 3, 3}, 1.0, true);
    auto g = random_tensor(rng, {2}, 1.0, true), be = random_tensor(rng, {2}, 1.0, true);
    auto run = [=](Mode mode) {
      BNParams p{g, be, Tensor::zeros({2}), Tensor::full({2}, 1.5), 0.1, 1e-5};
      return weighted_sum(batchnorm(x, p, mode), 14);
    };
    check("batchnorm.train", [=] { return run(Mode::train); }, {x, g, be});
    check("batchnorm.eval", [=] { return run(Mode::eval); }, {x, g, be});
    auto x2 = random_tensor(rng, {4, 3}, 1.0, true);
    auto g2 = random_tensor(rng, {3}, 1.0, true), b2 = random_tensor(rng, {3}, 1.0, true);
    check("batchnorm.train.rank2", [=] {
      BNParams p{g2, b2, Tensor::zeros({3}), Tensor::full({3}, 1.0), 0.1, 1e-5};
      return weighted_sum(batchnorm(x2, p, Mode::train), 15);
    }, {x2, g2, b2});
  }
  {
    // Keep inputs away from the kink at zero.
    std::vector<double> v(24);
    for (auto& e : v) e = (normal(rng) > 0 ? 1.0 : -1.0) * uniform(rng, 0.1, 2.0);
    auto x = Tensor({2, 3, 2, 2}, v, true);
    check("relu+avgpool", [=] { return weighted_sum(avgpool_global(relu(x)), 16); }, {x});
  }
  {
    auto z = random_tensor(rng, {4, 5}, 2.0, true), t = random_tensor(rng, {4, 5}, 2.0);
    const std::vector<int> y{0, 3, 4, 1};
    check("softmax_cross_entropy", [=] { return softmax_cross_entropy(z, y); }, {z});
    check("kd_kl_divergence", [=] { return kd_kl_divergence(z, t, 4.0); }, {z});
    check("kd_kl_divergence.tau1", [=] { return kd_kl_divergence(z, t, 1.0); }, {z});
  }
  {
    auto pw = random_tensor(rng, {2, 3, 1, 1}, 1.0, true), sp = random_tensor(rng, {4, 2, 3, 3}, 1.0, true);
    check("merge_kernels", [=] { return weighted_sum(merge_kernels(pw, sp), 17); }, {pw, sp});
  }
  return rep;
}

// A small expanded model whose every shared tensor matters to the student.
inline ModelGraph small_expanded_model(std::uint64_t seed, std::size_t r = 2, std::size_t m = 2, bool bn = true) {
  ArchConfig a;
  a.name = bn ? "convnet-small" : "convnet-small-nobn";
  a.input_shape = {1, 5, 5};
  a.num_classes = 3;
  a.widths = {2, 3, 3};
  a.seed = seed;
  auto student = build_student(a);
  auto teacher = expand_model(student, {r, m, 1e-2, bn ? IrMode::bn_safe : IrMode::paper, seed});
  Rng rng = make_rng(seed, 0xE5);
  perturb_parameters(teacher, rng, 0.2);
  return teacher;
}

// Student-view loss differentiated into the teacher's shared tensors.
inline Report verify_pullback_gradients(std::uint64_t seed = 0) {
  Report rep;
  for (int bn = 0; bn < 2; ++bn) {
    auto teacher = small_expanded_model(seed, 2, 2, bn == 1);
    Rng rng = make_rng(seed, 0xD1);
    const auto x = random_input(teacher, 4, rng);
    const std::vector<int> y{0, 1, 2, 1};
    auto fn = [&] { return softmax_cross_entropy(forward(teacher, x, View::student, Mode::train), y); };
    rep.add(std::string("grad.cbr_pullback.full_pipeline") + (bn ? ".bn" : ".nobn"),
            finite_difference_error(fn, teacher.parameter_tensors()), 1e-4, "seed " + std::to_string(seed));
    auto tfn = [&] { return softmax_cross_entropy(forward(teacher, x, View::teacher, Mode::train), y); };
    rep.add(std::string("grad.teacher_path.full_pipeline") + (bn ? ".bn" : ".nobn"),
            finite_difference_error(tfn, teacher.parameter_tensors()), 1e-4, "seed " + std::to_string(seed));
  }
  // Pull-back of dL/dW_bar for L = sum(merged kernel): the linear-map transpose.
  {
    auto teacher = small_expanded_model(seed, 2, 2, false);
    const auto view = extract_student(teacher);
    std::vector<std::vector<double>> ones;
    for (const auto& p : view.parameters()) ones.emplace_back(p.tensor.numel(), 1.0);
    const auto g = grad_pullback(teacher, ones);
    auto fn = [&] {
      std::vector<Tensor> terms;
      for (const auto& p : extract_student(teacher).parameters()) terms.push_back(sum(p.tensor));
      return add_n(terms);
    };
    const auto params = teacher.parameter_tensors();
    // Finite differences of the same linear functional.
    NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto t = params[k];
      auto vals = t.mutable_values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + 1e-5;
        const double up = fn().item();
        vals[i] = orig - 1e-5;
        const double down = fn().item();
        vals[i] = orig;
        worst = std::max(worst, relative_error(g[k].tensor[i], (up - down) / 2e-5));
      }
    }
    rep.add("grad.grad_pullback.sum_of_student_params", worst, 1e-4, "seed " + std::to_string(seed));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Stop-gradient contract and loss linearity

inline Report verify_stop_gradient(const LossConfig& base = {}, std::uint64_t seed = 0) {
  Report rep;
  LossConfig cfg = base;
  cfg.use_static_teacher = true;
  cfg.ce_teacher = true;
  cfg.kd_dynamic = true;
  auto shared = small_expanded_model(seed);
  // The teacher-side argument of every KD term is computed on an identical
  // copy whose tensors would receive any leaking gradient.
  auto teacher_copy = shared.clone();
  auto static_model = small_expanded_model(seed + 7, 1, 1);
  for (auto& p : static_model.parameters()) p.tensor.set_requires_grad(true);
  for (auto& p : teacher_copy.parameters()) p.tensor.set_requires_grad(true);
  Rng rng = make_rng(seed, 0xD2);
  const auto x = random_input(shared, 4, rng);
  const std::vector<int> y{2, 0, 1, 1};

  auto grad_norm = [](const ModelGraph& m) {
    double s = 0.0;
    for (const auto& p : m.parameters())
      for (double g : p.tensor.grad()) s = std::max(s, std::abs(g));
    return s;
  };
  auto zero_all = [&] {
    shared.zero_grad();
    teacher_copy.zero_grad();
    static_model.zero_grad();
  };

  // KD(S | T_d): the T_d argument comes from teacher_copy.
  zero_all();
  {
    const auto s = forward(shared, x, View::student, Mode::eval);
    const auto t = forward(teacher_copy, x, View::teacher, Mode::eval);
    LossConfig only = cfg;
    only.use_static_teacher = false;
    only.ce_teacher = false;
    auto l = gpd_loss(s, t, std::nullopt, y, only);
    l.kd_student_dynamic.backward();
    rep.add_exact("stopgrad.kd_student_dynamic.teacher_side", grad_norm(teacher_copy));
    const double gs = grad_norm(shared);
    rep.add_exact("stopgrad.kd_student_dynamic.student_side_nonzero", gs > 0.0 ? 0.0 : 1.0,
            "max |grad| = " + format_double(gs));
  }
  // KD(S | T_s) and KD(T_d | T_s): the static model must receive nothing.
  zero_all();
  {
    const auto s = forward(shared, x, View::student, Mode::eval);
    const auto st = forward(static_model, x, View::teacher, Mode::eval);
    auto l = gpd_loss(s, Tensor{}, st, y, LossConfig{cfg.lambda, cfg.temperature, true, false, false});
    l.kd_student_static.backward();
    rep.add_exact("stopgrad.kd_student_static.static_side", grad_norm(static_model));
  }
  zero_all();
  {
    const auto s = forward(shared, x, View::student, Mode::eval);
    const auto t = forward(shared, x, View::teacher, Mode::eval);
    const auto st = forward(static_model, x, View::teacher, Mode::eval);
    auto l = gpd_loss(s, t, st, y, cfg);
    l.kd_dynamic_static.backward();
    rep.add_exact("stopgrad.kd_dynamic_static.static_side", grad_norm(static_model));
    const double gt = grad_norm(shared);
    rep.add_exact("stopgrad.kd_dynamic_static.teacher_side_nonzero", gt > 0.0 ? 0.0 : 1.0,
            "max |grad| = " + format_double(gt));
  }
  // CE(T_d) reaches the shared tensors.
  zero_all();
  {
    const auto t = forward(shared, x, View::teacher, Mode::eval);
    softmax_cross_entropy(t, y).backward();
    const double g = grad_norm(shared);
    rep.add_exact("stopgrad.ce_teacher.shared_nonzero", g > 0.0 ? 0.0 : 1.0, "max |grad| = " + format_double(g));
  }
  // Linearity: backward(total) equals the sum of per-term backwards.
  {
    auto run = [&](int term) {
      auto m = shared.clone();
      const auto s = forward(m, x, View::student, Mode::eval);
      const auto t = forward(m, x, View::teacher, Mode::eval);
      const auto st = forward(static_model, x, View::teacher, Mode::eval);
      auto l = gpd_loss(s, t, st, y, cfg);
      const Tensor pick[] = {l.total, l.ce_student, scale(l.kd_student_static, cfg.lambda), l.ce_teacher,
                             l.kd_student_dynamic, l.kd_dynamic_static};
      pick[term].backward();
      std::vector<double> g;
      for (const auto& p : m.parameters()) g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
      return g;
    };
    const auto total = run(0);
    std::vector<double> acc(total.size(), 0.0);
    for (int term = 1; term <= 5; ++term) {
      const auto g = run(term);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
    rep.add("losses.linearity", max_abs_diff(total, acc), 1e-12);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Reference update with two explicit models

namespace oracle {

struct BlockOracle {
  // Student-shaped merged kernel and bias from teacher tensors, by loops.
  static std::pair<std::vector<double>, std::vector<double>> merge(const ExpandedBlock& b, const LayerSpec& l,
                                                                   std::size_t r, IrMode mode) {
    const bool in_exp = l.input_expanded(), out_exp = l.output_expanded();
    const std::size_t co = l.out_channels, ci = l.in_channels, kk = l.kernel * l.kernel;
    std::vector<double> w(co * ci * kk, 0.0);
    for (std::size_t m = 0; m < b.branches.size(); ++m) {
      const auto& st = b.branches[m];
      std::vector<double> part(co * ci * kk, 0.0);
      if (st.size() == 1) {
        const auto& K = st[0];
        const std::size_t ti = K.dim(1);
        const double f = reparam_factor(in_exp, out_exp, r, mode);
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t k = 0; k < kk; ++k) part[(o * ci + i) * kk + k] = f * K[(o * ti + i) * kk + k];
      } else {
        const auto& P = st[0];
        const auto& Q = st[1];
        const std::size_t pi = P.dim(1), qm = Q.dim(1);
        const double f1 = reparam_factor(in_exp, in_exp, r, mode), f2 = reparam_factor(in_exp, out_exp, r, mode);
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t k = 0; k < kk; ++k) {
              double s = 0.0;
              for (std::size_t mid = 0; mid < ci; ++mid) s += f2 * Q[(o * qm + mid) * kk + k] * f1 * P[mid * pi + i];
              part[(o * ci + i) * kk + k] = s;
            }
      }
      for (std::size_t o = 0; o < co; ++o) {
        const double sc = b.scales.empty() ? 1.0 : b.scales[m][o];
        for (std::size_t j = 0; j < ci * kk; ++j) w[o * ci * kk + j] += sc * part[o * ci * kk + j];
      }
    }
    std::vector<double> bias;
    if (b.bias.defined()) {
      const double fb = bias_factor(out_exp, r, mode);
      for (std::size_t o = 0; o < co; ++o) bias.push_back(fb * b.bias[o]);
    }
    return {w, bias};
  }

  // Transpose of `merge`: accumulates dL/d(teacher tensors) given dL/dW_bar
  // and dL/d(bias_bar). Output order follows ModelGraph::parameters().
  static void pullback(const ExpandedBlock& b, const LayerSpec& l, std::size_t r, IrMode mode,
                       const std::vector<double>& gw, const std::vector<double>& gb,
                       std::vector<std::vector<double>>& out) {
    const bool in_exp = l.input_expanded(), out_exp = l.output_expanded();
    const std::size_t co = l.out_channels, ci = l.in_channels, kk = l.kernel * l.kernel;
    std::vector<std::vector<double>> g_stack;
    std::vector<std::vector<double>> g_scales(b.scales.size());
    for (std::size_t m = 0; m < b.branches.size(); ++m) {
      const auto& st = b.branches[m];
      auto sc = [&](std::size_t o) { return b.scales.empty() ? 1.0 : b.scales[m][o]; };
      if (!b.scales.empty()) g_scales[m].assign(b.scales[m].numel(), 0.0);
      if (st.size() == 1) {
        const auto& K = st[0];
        const std::size_t ti = K.dim(1);
        const double f = reparam_factor(in_exp, out_exp, r, mode);
        std::vector<double> gk(K.numel(), 0.0);
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t k = 0; k < kk; ++k) {
              const double g = gw[(o * ci + i) * kk + k];
              gk[(o * ti + i) * kk + k] += g * sc(o) * f;
              if (!b.scales.empty()) g_scales[m][o] += g * f * K[(o * ti + i) * kk + k];
            }
        g_stack.push_back(std::move(gk));
      } else {
        const auto& P = st[0];
        const auto& Q = st[1];
        const std::size_t pi = P.dim(1), qm = Q.dim(1);
        const double f1 = reparam_factor(in_exp, in_exp, r, mode), f2 = reparam_factor(in_exp, out_exp, r, mode);
        std::vector<double> gp(P.numel(), 0.0), gq(Q.numel(), 0.0);
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t k = 0; k < kk; ++k) {
              const double g = gw[(o * ci + i) * kk + k];
              double merged = 0.0;
              for (std::size_t mid = 0; mid < ci; ++mid) {
                const double a = f1 * P[mid * pi + i], bq = f2 * Q[(o * qm + mid) * kk + k];
                merged += bq * a;
                gp[mid * pi + i] += f1 * g * sc(o) * bq;
                gq[(o * qm + mid) * kk + k] += f2 * g * sc(o) * a;
              }
              if (!b.scales.empty()) g_scales[m][o] += g * merged;
            }
        g_stack.push_back(std::move(gp));
        g_stack.push_back(std::move(gq));
      }
    }
    for (auto& g : g_stack) out.push_back(std::move(g));
    for (auto& g : g_scales) out.push_back(std::move(g));
    if (b.bias.defined()) {
      std::vector<double> g(b.bias.numel(), 0.0);
      const double fb = bias_factor(out_exp, r, mode);
      for (std::size_t o = 0; o < co; ++o) g[o] = fb * gb[o];
      out.push_back(std::move(g));
    }
  }
};

// Plain student built from teacher values by loops. BN running statistics are
// the teacher's own student-view tensors, so updates land in place.
inline ModelGraph materialize(const ModelGraph& t) {
  ModelGraph s;
  s.layers = t.layers;
  s.meta = t.meta;
  s.meta.ratio = 1;
  s.meta.branches = 1;
  for (std::size_t i = 0; i < t.layers.size(); ++i) {
    const auto& l = t.layers[i];
    if (l.weight_bearing()) {
      auto [w, bias] = BlockOracle::merge(t.block(i), l, t.meta.ratio, t.meta.ir_mode);
      ExpandedBlock b;
      b.branches.push_back({Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel}, std::move(w), true)});
      if (!bias.empty()) b.bias = Tensor({l.out_channels}, std::move(bias), true);
      s.params.emplace_back(std::move(b));
    } else if (l.kind == LayerKind::bn) {
      const auto& d = t.bn(i);
      const std::size_t c = l.out_channels;
      std::vector<double> g(d.gamma.values().begin(), d.gamma.values().begin() + static_cast<std::ptrdiff_t>(c));
      std::vector<double> be(d.beta.values().begin(), d.beta.values().begin() + static_cast<std::ptrdiff_t>(c));
      s.params.emplace_back(DualBNState{Tensor({c}, g, true), Tensor({c}, be, true), d.student_mean, d.student_var,
                                        d.student_mean, d.student_var, d.momentum, d.eps});
    } else {
      s.params.emplace_back(std::monostate{});
    }
  }
  return s;
}

// G_s mapped onto the teacher's tensors, in ModelGraph::parameters() order.
inline std::vector<std::vector<double>> pullback(const ModelGraph& t, const ModelGraph& s) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < t.layers.size(); ++i) {
    const auto& l = t.layers[i];
    if (l.weight_bearing()) {
      const auto& sb = s.block(i);
      std::vector<double> gw(sb.main_kernel().grad().begin(), sb.main_kernel().grad().end());
      std::vector<double> gb;
      if (sb.bias.defined()) gb.assign(sb.bias.grad().begin(), sb.bias.grad().end());
      BlockOracle::pullback(t.block(i), l, t.meta.ratio, t.meta.ir_mode, gw, gb, out);
    } else if (l.kind == LayerKind::bn) {
      const auto& d = t.bn(i);
      const auto& sd = s.bn(i);
      std::vector<double> gg(d.gamma.numel(), 0.0), gbe(d.beta.numel(), 0.0);
      for (std::size_t c = 0; c < sd.gamma.numel(); ++c) {
        gg[c] = sd.gamma.grad()[c];
        gbe[c] = sd.beta.grad()[c];
      }
      out.push_back(std::move(gg));
      out.push_back(std::move(gbe));
    }
  }
  return out;
}

// One reference iteration: explicit student, explicit G_d and G_s,
// W_d <- W_d - lr * (G_d + G_s) through a hand-written momentum update.
inline void step(ModelGraph& t, std::vector<std::vector<double>>& velocity, const Tensor& x,
                 std::span<const int> y, const LossConfig& cfg, double lr, double momentum, double wd) {
  t.zero_grad();
  auto s = materialize(t);
  const auto t_logits = forward(t, x, View::teacher, Mode::train);
  const auto s_logits = forward(s, x, View::student, Mode::train);
  std::vector<Tensor> terms{softmax_cross_entropy(s_logits, y)};
  if (cfg.ce_teacher) terms.push_back(softmax_cross_entropy(t_logits, y));
  if (cfg.kd_dynamic) terms.push_back(kd_kl_divergence(s_logits, stop_gradient(t_logits), cfg.temperature));
  add_n(terms).backward();
  const auto gs = pullback(t, s);
  auto params = t.parameter_tensors();
  if (velocity.empty())
    for (const auto& p : params) velocity.emplace_back(p.numel(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    const auto gd = params[k].grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = (gd.empty() ? 0.0 : gd[i]) + gs[k][i];
      velocity[k][i] = momentum * velocity[k][i] + g + wd * w[i];
      w[i] -= lr * velocity[k][i];
    }
  }
}

}  // namespace oracle

inline double parameter_drift(const ModelGraph& a, const ModelGraph& b) {
  const auto pa = a.state(), pb = b.state();
  if (pa.size() != pb.size()) return INFINITY;
  double d = 0.0;
  for (std::size_t k = 0; k < pa.size(); ++k) d = std::max(d, max_abs_diff(pa[k].tensor, pb[k].tensor));
  return d;
}

// Shared-implementation train_step against the two-model oracle.
inline Report verify_shared_step(std::size_t steps = 10, std::uint64_t seed = 0) {
  Report rep;
  // A BN-free toy network diverges at larger rates, which would amplify rounding.
  const double lr = 0.01, momentum = 0.9, wd = 1e-4;
  for (int bn = 0; bn < 2; ++bn) {
    auto shared = small_expanded_model(seed, 2, 2, bn == 1);
    auto literal = shared.clone();
    LossConfig cfg;
    SgdMomentum opt(shared.parameter_tensors(), momentum, wd);
    std::vector<std::vector<double>> velocity;
    Rng rng = make_rng(seed, 0xD3);
    double first = 0.0, worst = 0.0;
    for (std::size_t it = 0; it < steps; ++it) {
      const auto x = random_input(shared, 6, rng);
      std::vector<int> y(6);
      for (auto& v : y) v = static_cast<int>(std::uniform_int_distribution<int>(0, 2)(rng));
      train_step(shared, nullptr, x, y, cfg, opt, lr);
      oracle::step(literal, velocity, x, y, cfg, lr, momentum, wd);
      const double d = parameter_drift(shared, literal);
      if (it == 0) first = d;
      worst = std::max(worst, d);
    }
    const std::string tag = bn ? ".bn" : ".nobn";
    rep.add("algo1.one_step" + tag, first, 1e-8, "seed " + std::to_string(seed));
    rep.add("algo1.drift_" + std::to_string(steps) + "_steps" + tag, worst, 1e-6, "seed " + std::to_string(seed));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// BN isolation

// Runs `steps` training steps; before each, snapshots both statistic sets and
// checks that a teacher-only forward leaves the student set bit-identical and
// a student-only forward leaves the teacher set bit-identical.
inline Report verify_bn_isolation(std::size_t steps, std::uint64_t seed = 0) {
  Report rep;
  auto model = small_expanded_model(seed, 2, 2, true);
  SgdMomentum opt(model.parameter_tensors(), 0.9, 1e-4);
  Rng rng = make_rng(seed, 0xD4);
  auto snapshot = [&](bool teacher_set) {
    std::vector<double> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      if (model.layers[i].kind != LayerKind::bn) continue;
      const auto& s = model.bn(i);
      const auto& a = teacher_set ? s.teacher_mean : s.student_mean;
      const auto& b = teacher_set ? s.teacher_var : s.student_var;
      out.insert(out.end(), a.values().begin(), a.values().end());
      out.insert(out.end(), b.values().begin(), b.values().end());
    }
    return out;
  };
  double leak_into_student = 0.0, leak_into_teacher = 0.0;
  std::size_t teacher_moved = 0, student_moved = 0;
  for (std::size_t it = 0; it < steps; ++it) {
    const auto x = random_input(model, 4, rng);
    std::vector<int> y(4);
    for (auto& v : y) v = static_cast<int>(std::uniform_int_distribution<int>(0, 2)(rng));
    auto s0 = snapshot(false), t0 = snapshot(true);
    {
      NoGradGuard guard;
      forward(model, x, View::teacher, Mode::train);
    }
    leak_into_student = std::max(leak_into_student, max_abs_diff(s0, snapshot(false)));
    if (max_abs_diff(t0, snapshot(true)) > 0.0) ++teacher_moved;
    s0 = snapshot(false);
    t0 = snapshot(true);
    {
      NoGradGuard guard;
      forward(model, x, View::student, Mode::train);
    }
    leak_into_teacher = std::max(leak_into_teacher, max_abs_diff(t0, snapshot(true)));
    if (max_abs_diff(s0, snapshot(false)) > 0.0) ++student_moved;
    train_step(model, nullptr, x, y, LossConfig{}, opt, 0.05);
  }
  rep.add_exact("bn.teacher_forward_leaves_student_stats x" + std::to_string(steps), leak_into_student);
  rep.add_exact("bn.student_forward_leaves_teacher_stats x" + std::to_string(steps), leak_into_teacher);
  rep.add_exact("bn.own_stats_updated", static_cast<double>((steps - teacher_moved) + (steps - student_moved)),
                "forwards that failed to move their own set");
  return rep;
}

// ---------------------------------------------------------------------------
// Suites

inline Report run_suite(const std::string& suite, std::uint64_t seed = 0) {
  Report rep;
  const bool all = suite == "all";
  if (!all && suite != "ir" && suite != "cbr" && suite != "grad" && suite != "algo1") {
    throw ConfigError("unknown verify suite '" + suite + "' (expected ir, cbr, grad, algo1, or all)");
  }
  if (all || suite == "ir") {
    rep.append(verify_scalar_chain());
    rep.append(verify_ir_preservation(false, 100, seed));
    rep.append(verify_ir_preservation(true, 100, seed));
    rep.append(verify_noise_monotone(20, seed));
  }
  if (all || suite == "cbr") {
    rep.append(verify_cbr_inverse(seed));
    rep.append(verify_merge_soundness(100, seed));
    rep.append(verify_student_view(40, seed));
  }
  if (all || suite == "grad") {
    rep.append(verify_op_gradients(seed));
    rep.append(verify_pullback_gradients(seed));
    rep.append(verify_stop_gradient(LossConfig{}, seed));
  }
  if (all || suite == "algo1") {
    rep.append(verify_shared_step(10, seed));
    rep.append(verify_bn_isolation(20, seed));
  }
  return rep;
}

}  // namespace gpd
