#pragma once

// Sequential model description shared by the student and the dynamic teacher.
//
// LayerSpec always records *student* channel widths. A model expanded with
// ratio r stores teacher-width tensors; the teacher width of a weight layer is
// derived from its role (the first layer keeps its input width, the last layer
// keeps its output width, everything else is multiplied by r).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/rng.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

enum class LayerKind { conv, bn, relu, pool, linear };
enum class Role { none, first, intermediate, last };
enum class IrMode { paper, bn_safe };
enum class View { student, teacher };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::pool: return "pool";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

inline const char* to_string(Role r) {
  switch (r) {
    case Role::none: return "none";
    case Role::first: return "first";
    case Role::intermediate: return "intermediate";
    case Role::last: return "last";
  }
  return "?";
}

inline const char* to_string(IrMode m) { return m == IrMode::paper ? "paper" : "bn_safe"; }
inline const char* to_string(View v) { return v == View::student ? "student" : "teacher"; }

inline LayerKind parse_layer_kind(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "bn") return LayerKind::bn;
  if (s == "relu") return LayerKind::relu;
  if (s == "pool") return LayerKind::pool;
  if (s == "linear") return LayerKind::linear;
  throw ConfigError("unknown layer kind '" + s + "'");
}

inline Role parse_role(const std::string& s) {
  if (s == "none") return Role::none;
  if (s == "first") return Role::first;
  if (s == "intermediate") return Role::intermediate;
  if (s == "last") return Role::last;
  throw ConfigError("unknown layer role '" + s + "'");
}

inline IrMode parse_ir_mode(const std::string& s) {
  if (s == "paper") return IrMode::paper;
  if (s == "bn_safe") return IrMode::bn_safe;
  throw ConfigError("unknown ir mode '" + s + "' (expected paper or bn_safe)");
}

inline View parse_view(const std::string& s) {
  if (s == "student") return View::student;
  if (s == "teacher") return View::teacher;
  throw ConfigError("unknown view '" + s + "' (expected student or teacher)");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  Role role = Role::none;
  std::size_t in_channels = 0;   // conv/linear
  std::size_t out_channels = 0;  // conv/linear; channel count for bn
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = false;

  bool weight_bearing() const { return kind == LayerKind::conv || kind == LayerKind::linear; }
  bool input_expanded() const { return role != Role::first; }
  bool output_expanded() const { return role != Role::last; }
  std::size_t teacher_in(std::size_t r) const { return input_expanded() ? r * in_channels : in_channels; }
  std::size_t teacher_out(std::size_t r) const { return output_expanded() ? r * out_channels : out_channels; }

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1, std::size_t pad = 0,
                        bool bias = false) {
    return {LayerKind::conv, Role::none, in, out, k, stride, pad, bias};
  }
  static LayerSpec linear(std::size_t in, std::size_t out, bool bias = true) {
    return {LayerKind::linear, Role::none, in, out, 1, 1, 0, bias};
  }
  static LayerSpec bn(std::size_t channels) { return {LayerKind::bn, Role::none, 0, channels, 1, 1, 0, false}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec pool() { return {LayerKind::pool}; }

  bool operator==(const LayerSpec&) const = default;
};

// One dynamic-teacher weight layer: Y = sum_m S_m * f_m(X) + bias.
// Branch 0 holds the single (channel-expanded) K x K kernel; the extra
// branches hold a [1x1 -> KxK] stack. Linear layers store their matrices as
// [out, in, 1, 1] kernels.
struct ExpandedBlock {
  std::vector<std::vector<Tensor>> branches;
  std::vector<Tensor> scales;  // empty when there is a single branch
  Tensor bias;

  std::size_t branch_count() const { return branches.size(); }
  const Tensor& main_kernel() const { return branches.at(0).at(0); }
};

// Shared affine parameters plus one running-statistics set per view.
struct DualBNState {
  Tensor gamma;
  Tensor beta;
  Tensor teacher_mean;
  Tensor teacher_var;
  Tensor student_mean;
  Tensor student_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

using LayerParams = std::variant<std::monostate, ExpandedBlock, DualBNState>;

struct ModelMeta {
  std::string arch = "custom";
  std::size_t ratio = 1;
  std::size_t branches = 1;
  IrMode ir_mode = IrMode::bn_safe;
  double epsilon = 0.0;
  std::uint64_t seed = 0;         // parameter initialization
  std::uint64_t expand_seed = 0;  // expansion noise and extra-branch initialization
  Shape input_shape;  // [C, H, W]
  std::size_t num_classes = 0;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline Tensor deep_copy(const Tensor& t) { return t.defined() ? t.clone(t.requires_grad()) : Tensor{}; }

class ModelGraph {
 public:
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;
  ModelMeta meta;

  bool is_plain() const { return meta.ratio == 1 && meta.branches == 1; }
  bool has_batchnorm() const {
    for (const auto& l : layers)
      if (l.kind == LayerKind::bn) return true;
    return false;
  }

  ExpandedBlock& block(std::size_t i) { return std::get<ExpandedBlock>(params.at(i)); }
  const ExpandedBlock& block(std::size_t i) const { return std::get<ExpandedBlock>(params.at(i)); }
  DualBNState& bn(std::size_t i) { return std::get<DualBNState>(params.at(i)); }
  const DualBNState& bn(std::size_t i) const { return std::get<DualBNState>(params.at(i)); }

  // Trainable tensors in a fixed order.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "L" + std::to_string(i) + ".";
      if (const auto* b = std::get_if<ExpandedBlock>(&params[i])) {
        for (std::size_t m = 0; m < b->branches.size(); ++m)
          for (std::size_t j = 0; j < b->branches[m].size(); ++j)
            out.push_back({p + "branch" + std::to_string(m) + ".w" + std::to_string(j), b->branches[m][j]});
        for (std::size_t m = 0; m < b->scales.size(); ++m) out.push_back({p + "scale" + std::to_string(m), b->scales[m]});
        if (b->bias.defined()) out.push_back({p + "bias", b->bias});
      } else if (const auto* s = std::get_if<DualBNState>(&params[i])) {
        out.push_back({p + "gamma", s->gamma});
        out.push_back({p + "beta", s->beta});
      }
    }
    return out;
  }

  // Running statistics (non-trainable state).
  std::vector<NamedTensor> buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (const auto* s = std::get_if<DualBNState>(&params[i])) {
        const std::string p = "L" + std::to_string(i) + ".";
        out.push_back({p + "teacher_mean", s->teacher_mean});
        out.push_back({p + "teacher_var", s->teacher_var});
        out.push_back({p + "student_mean", s->student_mean});
        out.push_back({p + "student_var", s->student_var});
      }
    }
    return out;
  }

  std::vector<NamedTensor> state() const {
    auto out = parameters();
    for (auto& b : buffers()) out.push_back(std::move(b));
    return out;
  }

  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  ModelGraph clone() const {
    ModelGraph out;
    out.layers = layers;
    out.meta = meta;
    for (const auto& lp : params) {
      if (const auto* b = std::get_if<ExpandedBlock>(&lp)) {
        ExpandedBlock c;
        for (const auto& br : b->branches) {
          std::vector<Tensor> stack;
          for (const auto& t : br) stack.push_back(deep_copy(t));
          c.branches.push_back(std::move(stack));
        }
        for (const auto& s : b->scales) c.scales.push_back(deep_copy(s));
        c.bias = deep_copy(b->bias);
        out.params.emplace_back(std::move(c));
      } else if (const auto* s = std::get_if<DualBNState>(&lp)) {
        out.params.emplace_back(DualBNState{deep_copy(s->gamma), deep_copy(s->beta), deep_copy(s->teacher_mean),
                                            deep_copy(s->teacher_var), deep_copy(s->student_mean),
                                            deep_copy(s->student_var), s->momentum, s->eps});
      } else {
        out.params.emplace_back(std::monostate{});
      }
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

// Checks kinds, roles, and the channel chain, and returns the per-layer
// output shapes (student widths) for a batch of one.
inline std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& input_shape) {
  if (input_shape.size() != 3) throw ShapeError("input shape must be [C, H, W], got " + shape_str(input_shape));
  std::vector<Shape> shapes;
  Shape cur{1, input_shape[0], input_shape[1], input_shape[2]};
  std::size_t firsts = 0, lasts = 0, weight_layers = 0;
  Role previous_role = Role::none;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    if (l.weight_bearing()) {
      ++weight_layers;
      if (l.role == Role::first) ++firsts;
      if (l.role == Role::last) ++lasts;
      if (l.role == Role::none) throw ShapeError(where + ": weight-bearing layer needs a role");
      if (l.in_channels == 0 || l.out_channels == 0) throw ShapeError(where + ": zero channel count");
      previous_role = l.role;
    } else if (l.role != Role::none) {
      throw ShapeError(where + ": only conv/linear layers carry a role");
    }
    switch (l.kind) {
      case LayerKind::conv:
        if (cur.size() != 4) throw ShapeError(where + ": conv after pooling");
        if (cur[1] != l.in_channels) {
          throw ShapeError(where + ": channel chain mismatch, expects " + std::to_string(l.in_channels) +
                           " input channels but receives " + std::to_string(cur[1]));
        }
        if (l.kernel < 1 || l.stride < 1) throw ShapeError(where + ": kernel and stride must be >= 1");
        cur = {1, l.out_channels, conv_out_extent(cur[2], l.kernel, l.stride, l.padding),
               conv_out_extent(cur[3], l.kernel, l.stride, l.padding)};
        break;
      case LayerKind::linear:
        if (cur.size() != 2) throw ShapeError(where + ": linear needs a pooled [N, C] input");
        if (cur[1] != l.in_channels) {
          throw ShapeError(where + ": channel chain mismatch, expects " + std::to_string(l.in_channels) +
                           " inputs but receives " + std::to_string(cur[1]));
        }
        cur = {1, l.out_channels};
        break;
      case LayerKind::bn:
        if (cur[1] != l.out_channels) {
          throw ShapeError(where + ": batchnorm over " + std::to_string(l.out_channels) + " channels receives " +
                           std::to_string(cur[1]));
        }
        if (weight_layers == 0 || previous_role == Role::last) {
          throw ShapeError(where + ": batchnorm must follow a non-final weight layer");
        }
        break;
      case LayerKind::relu:
        break;
      case LayerKind::pool:
        if (cur.size() != 4) throw ShapeError(where + ": pooling needs a [N, C, H, W] input");
        cur = {1, cur[1]};
        break;
    }
    shapes.push_back(cur);
  }
  if (weight_layers < 2) throw ShapeError("model needs at least two weight-bearing layers");
  if (firsts != 1 || lasts != 1) throw ShapeError("model needs exactly one first and one last weight layer");
  std::size_t seen = 0;
  for (const auto& l : layers) {
    if (!l.weight_bearing()) continue;
    ++seen;
    const Role expect = seen == 1 ? Role::first : seen == weight_layers ? Role::last : Role::intermediate;
    if (l.role != expect) throw ShapeError("layer roles must be first, intermediate..., last in chain order");
  }
  if (cur.size() != 2) throw ShapeError("model output must be [N, classes]");
  return shapes;
}

// Tags weight-bearing layers first / intermediate / last by position.
inline void assign_roles(std::vector<LayerSpec>& layers) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].weight_bearing()) idx.push_back(i);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    layers[idx[j]].role = j == 0 ? Role::first : j + 1 == idx.size() ? Role::last : Role::intermediate;
  }
}

// He (fan-in) normal initialization.
inline Tensor he_kernel(Rng& rng, std::size_t out, std::size_t in, std::size_t k) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in * k * k));
  std::vector<double> v(out * in * k * k);
  for (auto& x : v) x = normal(rng, 0.0, sd);
  return Tensor({out, in, k, k}, std::move(v), true);
}

// Plain (r = M = 1) model with freshly initialized parameters.
inline ModelGraph build_model(std::vector<LayerSpec> layers, ModelMeta meta) {
  meta.ratio = 1;
  meta.branches = 1;
  const auto shapes = infer_shapes(layers, meta.input_shape);
  meta.num_classes = shapes.back()[1];
  ModelGraph m;
  m.meta = meta;
  m.layers = std::move(layers);
  Rng rng = make_rng(meta.seed, 0x51ULL);
  for (const auto& l : m.layers) {
    if (l.weight_bearing()) {
      ExpandedBlock b;
      b.branches.push_back({he_kernel(rng, l.out_channels, l.in_channels, l.kernel)});
      if (l.bias) b.bias = Tensor::zeros({l.out_channels}, true);
      m.params.emplace_back(std::move(b));
    } else if (l.kind == LayerKind::bn) {
      const std::size_t c = l.out_channels;
      m.params.emplace_back(DualBNState{Tensor::full({c}, 1.0, true), Tensor::zeros({c}, true), Tensor::zeros({c}),
                                        Tensor::full({c}, 1.0), Tensor::zeros({c}), Tensor::full({c}, 1.0)});
    } else {
      m.params.emplace_back(std::monostate{});
    }
  }
  return m;
}

struct ArchConfig {
  std::string name = "convnet-small";
  Shape input_shape{1, 28, 28};
  std::size_t num_classes = 10;
  std::vector<std::size_t> widths;  // empty: architecture default
  std::uint64_t seed = 0;
};

inline std::vector<std::size_t> default_widths(const std::string& name) {
  if (name == "convnet-small" || name == "convnet-small-nobn") return {8, 16, 16};
  if (name == "convnet-wide") return {16, 32, 32};
  throw ConfigError("unknown architecture '" + name + "' (known: convnet-small, convnet-small-nobn, convnet-wide)");
}

// Built-in toy CNNs: three 3x3 conv stages (stride 1, 2, 2), each followed by
// BN (except the -nobn variant) and ReLU, then global average pooling and a
// linear classifier.
inline ModelGraph build_student(const ArchConfig& cfg) {
  auto widths = cfg.widths.empty() ? default_widths(cfg.name) : cfg.widths;
  default_widths(cfg.name);  // validates the name
  if (widths.size() != 3) throw ConfigError("architecture '" + cfg.name + "' takes exactly three stage widths");
  const bool with_bn = cfg.name != "convnet-small-nobn";
  std::vector<LayerSpec> layers;
  std::size_t in = cfg.input_shape.at(0);
  const std::size_t strides[3] = {1, 2, 2};
  for (std::size_t s = 0; s < 3; ++s) {
    layers.push_back(LayerSpec::conv(in, widths[s], 3, strides[s], 1, !with_bn));
    if (with_bn) layers.push_back(LayerSpec::bn(widths[s]));
    layers.push_back(LayerSpec::relu());
    in = widths[s];
  }
  layers.push_back(LayerSpec::pool());
  layers.push_back(LayerSpec::linear(in, cfg.num_classes, true));
  assign_roles(layers);
  ModelMeta meta;
  meta.arch = cfg.name;
  meta.seed = cfg.seed;
  meta.input_shape = cfg.input_shape;
  meta.ir_mode = with_bn ? IrMode::bn_safe : IrMode::paper;
  return build_model(std::move(layers), meta);
}

}  // namespace gpd
