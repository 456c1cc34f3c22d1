#pragma once

#include <string>
#include <variant>
#include <vector>

#include "gpd/channel_branch_reparam.hpp"
#include "gpd/errors.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

namespace detail {

inline Tensor apply_kernel(const Tensor& x, const Tensor& kernel, const Tensor& bias, LayerKind kind,
                           std::size_t stride, std::size_t padding) {
  if (kind == LayerKind::linear) {
    auto w = reshape(kernel, {kernel.dim(0), kernel.dim(1)});
    return linear(x, w, bias);
  }
  return conv2d(x, kernel, bias, stride, padding);
}

inline void check_input(const ModelGraph& m, const Tensor& x) {
  const auto& s = m.meta.input_shape;
  if (x.rank() != 4 || x.dim(1) != s[0] || x.dim(2) != s[1] || x.dim(3) != s[2]) {
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match declared [N, " +
                     std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " + std::to_string(s[2]) + "]");
  }
}

}  // namespace detail

// Teacher-side multi-branch computation: sum_m S_m * f_m(x) + bias.
inline Tensor block_forward(const Tensor& x, const ExpandedBlock& b, const LayerSpec& l) {
  if (b.branches.size() == 1 && b.scales.empty()) {
    return detail::apply_kernel(x, b.main_kernel(), b.bias, l.kind, l.stride, l.padding);
  }
  std::vector<Tensor> terms;
  for (std::size_t m = 0; m < b.branches.size(); ++m) {
    Tensor h = x;
    const auto& stack = b.branches[m];
    for (std::size_t j = 0; j < stack.size(); ++j) {
      const bool spatial = j + 1 == stack.size();
      h = detail::apply_kernel(h, stack[j], {}, l.kind, spatial ? l.stride : 1, spatial ? l.padding : 0);
    }
    if (!b.scales.empty()) h = mul_along(h, b.scales[m], 1);
    terms.push_back(std::move(h));
  }
  auto y = add_n(terms);
  return b.bias.defined() ? add_along(y, b.bias, 1) : y;
}

// Forward pass of an already-extracted student view.
inline Tensor forward_student(const ModelGraph& m, const StudentView& view, const Tensor& x, Mode mode) {
  detail::check_input(m, x);
  Tensor h = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::linear: {
        const auto& w = std::get<ConvWeight>(view.layers[i]);
        h = detail::apply_kernel(h, w.kernel, w.bias, l.kind, w.stride, w.padding);
        break;
      }
      case LayerKind::bn: {
        auto p = std::get<BNParams>(view.layers[i]);
        h = batchnorm(h, p, mode);
        break;
      }
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::pool: h = avgpool_global(h); break;
    }
  }
  return h;
}

// Logits of `m` under the requested view. The student view of an expanded
// model runs through channel-branch reparameterization; on a plain model both
// views are the same computation and share the student statistics. Train mode
// updates the running statistics of the active view only.
inline Tensor forward(ModelGraph& m, const Tensor& x, View view, Mode mode) {
  detail::check_input(m, x);
  if (view == View::student && !m.is_plain()) return forward_student(m, extract_student(m), x, mode);
  const bool teacher_stats = !m.is_plain();
  Tensor h = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::linear: h = block_forward(h, m.block(i), l); break;
      case LayerKind::bn: {
        auto& s = m.bn(i);
        BNParams p{s.gamma, s.beta, teacher_stats ? s.teacher_mean : s.student_mean,
                   teacher_stats ? s.teacher_var : s.student_var, s.momentum, s.eps};
        h = batchnorm(h, p, mode);
        break;
      }
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::pool: h = avgpool_global(h); break;
    }
  }
  return h;
}

}  // namespace gpd
