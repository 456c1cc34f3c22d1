#pragma once

// Dense float64 tensors with a dynamic reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations that receive at
// least one input with requires_grad() record a backward closure; everything
// else is evaluated eagerly with no tape overhead. Leaves that require
// gradients accumulate into their grad buffer until zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gpd/errors.hpp"

namespace gpd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  // Set once the tape through this node has been released by backward().
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

inline void check_finite(std::span<const double> values, const std::string& where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << where << ": non-finite value " << values[i] << " at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

}  // namespace detail

// Disables tape recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    detail::check_finite(values, "tensor construction");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    set_requires_grad(requires_grad);
  }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  // Direct write access for optimizers, loaders, and running statistics.
  std::span<double> mutable_values() { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const std::string& op() const { return node_->op; }

  void set_requires_grad(bool flag) {
    if (!node_->leaf) throw AutodiffError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = flag;
    if (flag) {
      node_->ensure_grad();
    } else {
      node_->grad.clear();
    }
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Independent leaf carrying a copy of the values; shares nothing with the tape.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->value, requires_grad);
  }

  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Creates the output node of an operation. The backward closure is attached
// only when recording is enabled and some input requires gradients.
inline Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                          const char* op, std::function<void(Node&)> backward) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  const bool record = !grad_disabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                        return t.requires_grad();
                      });
  if (record) {
    node->requires_grad = true;
    node->leaf = false;
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input `i` if it participates in the tape, else nullptr.
inline std::vector<double>* input_grad(Node& self, std::size_t i) {
  auto& in = *self.inputs.at(i);
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return &in.grad;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw AutodiffError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (node_->consumed) throw AutodiffError("backward() called twice on the same graph");
  if (!node_->requires_grad) {
    node_->consumed = true;
    return;
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed && !node->leaf) {
      throw AutodiffError("backward() reached a graph already released by an earlier backward (op " +
                          node->op + ")");
    }
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && !child->leaf && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward) node->backward(*node);
  }
  for (auto* node : order) {
    if (node->leaf) continue;
    node->inputs.clear();
    node->backward = nullptr;
    node->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural operations

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_result(a.shape(), std::move(out), {a}, "scale", [factor](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return detail::make_result({1}, {total}, {a}, "sum", [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Sum of same-shape tensors, accumulated left to right.
inline Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ShapeError("add_n of zero tensors");
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return detail::make_result(std::move(shape), a.to_vector(), {a}, "reshape", [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

// Cuts the tape: the result carries the same values but no gradient ever
// flows back through it.
inline Tensor stop_gradient(const Tensor& a) {
  auto node = std::make_shared<detail::Node>();
  node->shape = a.shape();
  node->value = a.to_vector();
  node->op = "stop_gradient";
  return Tensor(std::move(node));
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

// Calls fn(dst_index, src_index) for every element of the leading box
// `extents` inside a tensor of shape `full`.
template <typename Fn>
void for_each_in_box(const Shape& full, const Shape& extents, Fn&& fn) {
  const auto src_strides = row_major_strides(full);
  const std::size_t total = shape_numel(extents);
  std::vector<std::size_t> idx(extents.size(), 0);
  for (std::size_t dst = 0; dst < total; ++dst) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) src += idx[d] * src_strides[d];
    fn(dst, src);
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < extents[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// Leading sub-box: result[i0, i1, ...] = a[i0, i1, ...] for i_d < extents[d].
inline Tensor narrow(const Tensor& a, Shape extents) {
  if (extents.size() != a.rank()) {
    throw ShapeError("narrow: extents rank " + std::to_string(extents.size()) + " vs tensor rank " +
                     std::to_string(a.rank()));
  }
  for (std::size_t d = 0; d < extents.size(); ++d) {
    if (extents[d] > a.dim(d)) {
      throw ShapeError("narrow: extents " + shape_str(extents) + " exceed shape " + shape_str(a.shape()));
    }
  }
  std::vector<double> out(shape_numel(extents));
  const auto src = a.values();
  detail::for_each_in_box(a.shape(), extents, [&](std::size_t d, std::size_t s) { out[d] = src[s]; });
  Shape full = a.shape();
  Shape box = extents;
  return detail::make_result(std::move(extents), std::move(out), {a}, "narrow",
                             [full, box](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 detail::for_each_in_box(full, box, [&](std::size_t d, std::size_t s) {
                                   (*g)[s] += self.grad[d];
                                 });
                               }
                             });
}

// Multiplies every slice a[..., c, ...] along `axis` by vec[c].
inline Tensor mul_along(const Tensor& a, const Tensor& vec, std::size_t axis) {
  if (vec.rank() != 1 || axis >= a.rank() || vec.dim(0) != a.dim(axis)) {
    throw ShapeError("mul_along: vector " + shape_str(vec.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  const std::size_t channels = a.dim(axis);
  const std::size_t inner = a.numel() / (outer * channels);
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double s = vec[c];
      const std::size_t base = (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = a[base + i] * s;
    }
  }
  return detail::make_result(a.shape(), std::move(out), {a, vec}, "mul_along",
                             [outer, channels, inner](detail::Node& self) {
                               const auto& av = self.inputs[0]->value;
                               const auto& sv = self.inputs[1]->value;
                               auto* ga = detail::input_grad(self, 0);
                               auto* gs = detail::input_grad(self, 1);
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t c = 0; c < channels; ++c) {
                                   const std::size_t base = (o * channels + c) * inner;
                                   double acc = 0.0;
                                   for (std::size_t i = 0; i < inner; ++i) {
                                     if (ga) (*ga)[base + i] += self.grad[base + i] * sv[c];
                                     acc += self.grad[base + i] * av[base + i];
                                   }
                                   if (gs) (*gs)[c] += acc;
                                 }
                               }
                             });
}


// Adds vec[c] to every slice a[..., c, ...] along `axis`.
inline Tensor add_along(const Tensor& a, const Tensor& vec, std::size_t axis) {
  if (vec.rank() != 1 || axis >= a.rank() || vec.dim(0) != a.dim(axis)) {
    throw ShapeError("add_along: vector " + shape_str(vec.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  const std::size_t channels = a.dim(axis);
  const std::size_t inner = a.numel() / (outer * channels);
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = a[base + i] + vec[c];
    }
  return detail::make_result(a.shape(), std::move(out), {a, vec}, "add_along",
                             [outer, channels, inner](detail::Node& self) {
                               auto* ga = detail::input_grad(self, 0);
                               auto* gv = detail::input_grad(self, 1);
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t c = 0; c < channels; ++c) {
                                   const std::size_t base = (o * channels + c) * inner;
                                   double acc = 0.0;
                                   for (std::size_t i = 0; i < inner; ++i) {
                                     if (ga) (*ga)[base + i] += self.grad[base + i];
                                     acc += self.grad[base + i];
                                   }
                                   if (gv) (*gv)[c] += acc;
                                 }
                             });
}

}  // namespace gpd
