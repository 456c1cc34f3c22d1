#pragma once

// Channel-branch reparameterization: the closed-form map from the dynamic
// teacher's shared parameters to the compact student. Every step is built from
// tape-aware ops, so a student loss differentiates straight back into the
// teacher tensors.

#include <string>
#include <variant>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/inverse_reparam.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

// merged[o, i, kh, kw] = sum_mid spatial[o, mid, kh, kw] * pointwise[mid, i]
inline Tensor merge_kernels(const Tensor& pointwise, const Tensor& spatial) {
  if (pointwise.rank() != 4 || spatial.rank() != 4 || pointwise.dim(2) != 1 || pointwise.dim(3) != 1) {
    throw ShapeError("merge_kernels: expected a [C_mid, C_in, 1, 1] kernel followed by [C_out, C_mid, K, K]");
  }
  if (spatial.dim(1) != pointwise.dim(0)) {
    throw ShapeError("merge_kernels: chain mismatch, 1x1 produces " + std::to_string(pointwise.dim(0)) +
                     " channels but KxK consumes " + std::to_string(spatial.dim(1)));
  }
  const std::size_t cm = pointwise.dim(0), ci = pointwise.dim(1);
  const std::size_t co = spatial.dim(0), kk = spatial.dim(2) * spatial.dim(3);
  std::vector<double> out(co * ci * kk, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t m = 0; m < cm; ++m)
      for (std::size_t i = 0; i < ci; ++i) {
        const double a = pointwise[m * ci + i];
        for (std::size_t k = 0; k < kk; ++k) out[(o * ci + i) * kk + k] += spatial[(o * cm + m) * kk + k] * a;
      }
  return detail::make_result({co, ci, spatial.dim(2), spatial.dim(3)}, std::move(out), {pointwise, spatial},
                             "merge_kernels", [co, cm, ci, kk](detail::Node& self) {
                               const auto& pw = self.inputs[0]->value;
                               const auto& sp = self.inputs[1]->value;
                               auto* gpw = detail::input_grad(self, 0);
                               auto* gsp = detail::input_grad(self, 1);
                               for (std::size_t o = 0; o < co; ++o)
                                 for (std::size_t m = 0; m < cm; ++m)
                                   for (std::size_t i = 0; i < ci; ++i)
                                     for (std::size_t k = 0; k < kk; ++k) {
                                       const double g = self.grad[(o * ci + i) * kk + k];
                                       if (gpw) (*gpw)[m * ci + i] += g * sp[(o * cm + m) * kk + k];
                                       if (gsp) (*gsp)[(o * cm + m) * kk + k] += g * pw[m * ci + i];
                                     }
                             });
}

// Slice the leading student-sized box out of a teacher kernel and rescale it.
inline Tensor extract_kernel(const Tensor& kernel, bool input_expanded, bool output_expanded, std::size_t r,
                             IrMode mode) {
  const std::size_t co = kernel.dim(0), ci = kernel.dim(1);
  if ((output_expanded && co % r) || (input_expanded && ci % r)) {
    throw ShapeError("extract_channels: r=" + std::to_string(r) + " does not divide expanded kernel " +
                     shape_str(kernel.shape()));
  }
  Shape box{output_expanded ? co / r : co, input_expanded ? ci / r : ci, kernel.dim(2), kernel.dim(3)};
  const double f = reparam_factor(input_expanded, output_expanded, r, mode);
  auto sliced = box == kernel.shape() ? kernel : narrow(kernel, std::move(box));
  return f == 1.0 ? sliced : scale(sliced, f);
}

inline Tensor extract_bias(const Tensor& bias, bool output_expanded, std::size_t r, IrMode mode) {
  if (!bias.defined()) return {};
  const std::size_t n = bias.dim(0);
  if (output_expanded && n % r) throw ShapeError("extract_channels: r does not divide bias length");
  const std::size_t keep = output_expanded ? n / r : n;
  auto sliced = keep == n ? bias : narrow(bias, {keep});
  const double f = bias_factor(output_expanded, r, mode);
  return f == 1.0 ? sliced : scale(sliced, f);
}

// Channel-level reparameterization of one teacher weight layer.
inline ConvWeight extract_channels(const ConvWeight& w, std::size_t r, Role role, IrMode mode = IrMode::paper) {
  w.validate();
  if (role == Role::none) throw ShapeError("extract_channels: unknown layer role");
  if (r < 1) throw ConfigError("extract_channels: r must be >= 1");
  const bool in_exp = role != Role::first, out_exp = role != Role::last;
  return ConvWeight{extract_kernel(w.kernel, in_exp, out_exp, r, mode), extract_bias(w.bias, out_exp, r, mode),
                    w.stride, w.padding};
}

// Folds an (already channel-extracted) branch stack into one kernel.
inline Tensor merge_branch(const std::vector<Tensor>& stack) {
  if (stack.size() == 1) return stack[0];
  if (stack.size() == 2) return merge_kernels(stack[0], stack[1]);
  throw ShapeError("merge_branch: only [KxK] or [1x1, KxK] stacks are supported, got length " +
                   std::to_string(stack.size()));
}

// Channel extraction of every conv in every branch, scale folding, branch
// merging, and summation. Scale vectors contribute their first C_out entries.
inline ConvWeight merge_block(const ExpandedBlock& b, const LayerSpec& spec, std::size_t r, IrMode mode) {
  if (b.branches.empty()) throw ShapeError("merge_block: block has no branches");
  if (b.branches.size() > 1 && b.scales.size() != b.branches.size()) {
    throw ShapeError("merge_block: expected one scale vector per branch");
  }
  const bool in_exp = spec.input_expanded(), out_exp = spec.output_expanded();
  std::vector<Tensor> merged;
  for (std::size_t m = 0; m < b.branches.size(); ++m) {
    const auto& stack = b.branches[m];
    std::vector<Tensor> extracted;
    if (stack.size() == 1) {
      extracted.push_back(extract_kernel(stack[0], in_exp, out_exp, r, mode));
    } else if (stack.size() == 2) {
      // The hidden width equals the block's teacher input width.
      extracted.push_back(extract_kernel(stack[0], in_exp, in_exp, r, mode));
      extracted.push_back(extract_kernel(stack[1], in_exp, out_exp, r, mode));
    } else {
      throw ShapeError("merge_block: unsupported branch depth " + std::to_string(stack.size()));
    }
    auto kernel = merge_branch(extracted);
    if (!b.scales.empty()) {
      const std::size_t keep = kernel.dim(0);
      const auto& s = b.scales[m];
      kernel = mul_along(kernel, s.numel() == keep ? s : narrow(s, {keep}), 0);
    }
    merged.push_back(std::move(kernel));
  }
  return ConvWeight{add_n(merged), extract_bias(b.bias, out_exp, r, mode), spec.stride, spec.padding};
}

// Per-layer student parameters derived from a teacher. BN entries reference
// the teacher's student-side running statistics directly.
struct StudentView {
  std::vector<std::variant<std::monostate, ConvWeight, BNParams>> layers;
  const ModelGraph* owner = nullptr;

  // Differentiable student parameters in layer order (kernel, bias, gamma, beta).
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "L" + std::to_string(i) + ".";
      if (const auto* w = std::get_if<ConvWeight>(&layers[i])) {
        out.push_back({p + "kernel", w->kernel});
        if (w->has_bias()) out.push_back({p + "bias", w->bias});
      } else if (const auto* bn = std::get_if<BNParams>(&layers[i])) {
        out.push_back({p + "gamma", bn->gamma});
        out.push_back({p + "beta", bn->beta});
      }
    }
    return out;
  }
};

// Recomputed on every call; never cached.
inline StudentView extract_student(const ModelGraph& teacher) {
  if (teacher.layers.size() != teacher.params.size()) throw ShapeError("extract_student: malformed model");
  StudentView view;
  view.owner = &teacher;
  const std::size_t r = teacher.meta.ratio;
  for (std::size_t i = 0; i < teacher.layers.size(); ++i) {
    const auto& l = teacher.layers[i];
    if (l.weight_bearing()) {
      const auto& b = teacher.block(i);
      if (teacher.is_plain()) {
        view.layers.emplace_back(ConvWeight{b.main_kernel(), b.bias, l.stride, l.padding});
      } else {
        view.layers.emplace_back(merge_block(b, l, r, teacher.meta.ir_mode));
      }
    } else if (l.kind == LayerKind::bn) {
      const auto& s = teacher.bn(i);
      const std::size_t c = l.out_channels;
      BNParams p;
      p.gamma = s.gamma.numel() == c ? s.gamma : narrow(s.gamma, {c});
      p.beta = s.beta.numel() == c ? s.beta : narrow(s.beta, {c});
      p.running_mean = s.student_mean;
      p.running_var = s.student_var;
      p.momentum = s.momentum;
      p.eps = s.eps;
      view.layers.emplace_back(std::move(p));
    } else {
      view.layers.emplace_back(std::monostate{});
    }
  }
  return view;
}

// Vector-Jacobian product of the CBR map: given dL/d(student parameter) in
// StudentView::parameters() order, returns dL/d(teacher parameter) in
// ModelGraph::parameters() order. The teacher's own grad buffers are untouched.
inline std::vector<NamedTensor> grad_pullback(const ModelGraph& teacher,
                                              const std::vector<std::vector<double>>& student_grads) {
  ModelGraph work = teacher.clone();
  for (auto& p : work.parameters()) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  const auto view = extract_student(work);
  const auto params = view.parameters();
  if (params.size() != student_grads.size()) {
    throw ShapeError("grad_pullback: expected " + std::to_string(params.size()) + " student gradients, got " +
                     std::to_string(student_grads.size()));
  }
  std::vector<Tensor> terms;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (student_grads[k].size() != params[k].tensor.numel()) {
      throw ShapeError("grad_pullback: gradient for " + params[k].name + " has " +
                       std::to_string(student_grads[k].size()) + " entries, expected " +
                       std::to_string(params[k].tensor.numel()));
    }
    terms.push_back(sum(mul(params[k].tensor, Tensor(params[k].tensor.shape(), student_grads[k]))));
  }
  add_n(terms).backward();
  std::vector<NamedTensor> out;
  for (const auto& p : work.parameters()) {
    out.push_back({p.name, Tensor(p.tensor.shape(), std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end()))});
  }
  return out;
}

// Standalone plain student holding copies of the extracted parameters and the
// student running statistics.
inline ModelGraph materialize_student(const ModelGraph& teacher) {
  const auto view = extract_student(teacher);
  ModelGraph out;
  out.layers = teacher.layers;
  out.meta = teacher.meta;
  out.meta.ratio = 1;
  out.meta.branches = 1;
  out.meta.epsilon = 0.0;
  for (std::size_t i = 0; i < teacher.layers.size(); ++i) {
    if (const auto* w = std::get_if<ConvWeight>(&view.layers[i])) {
      ExpandedBlock b;
      b.branches.push_back({w->kernel.clone(true)});
      if (w->has_bias()) b.bias = w->bias.clone(true);
      out.params.emplace_back(std::move(b));
    } else if (const auto* p = std::get_if<BNParams>(&view.layers[i])) {
      out.params.emplace_back(DualBNState{p->gamma.clone(true), p->beta.clone(true), p->running_mean.clone(),
                                          p->running_var.clone(), p->running_mean.clone(), p->running_var.clone(),
                                          p->momentum, p->eps});
    } else {
      out.params.emplace_back(std::monostate{});
    }
  }
  return out;
}

}  // namespace gpd
