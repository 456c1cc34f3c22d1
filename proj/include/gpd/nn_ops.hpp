#pragma once

// Neural-network primitives on top of the tensor tape: convolution, batch
// normalization, activations, pooling, and the classification/distillation
// losses. Every kernel uses a fixed loop nesting so reductions are
// bit-reproducible run to run.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

enum class Mode { train, eval };

struct ConvWeight {
  Tensor kernel;  // [C_out, C_in, K, K]
  Tensor bias;    // [C_out] or undefined
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return kernel.dim(0); }
  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t kernel_size() const { return kernel.dim(2); }
  bool has_bias() const { return bias.defined(); }

  void validate() const {
    if (!kernel.defined() || kernel.rank() != 4) throw ShapeError("conv kernel must be rank 4 [C_out, C_in, K, K]");
    if (kernel.dim(2) != kernel.dim(3) || kernel.dim(2) < 1) {
      throw ShapeError("conv kernel must be square with K >= 1, got " + shape_str(kernel.shape()));
    }
    if (stride < 1) throw ShapeError("conv stride must be >= 1");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))) {
      throw ShapeError("conv bias " + shape_str(bias.shape()) + " does not match C_out " +
                       std::to_string(kernel.dim(0)));
    }
  }
};

struct BNParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  std::size_t channels() const { return gamma.numel(); }

  void validate() const {
    const auto c = gamma.numel();
    if (beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
      throw ShapeError("batchnorm parameter vectors must share one length");
    }
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("batchnorm momentum must lie in (0, 1)");
    if (eps < 0.0) throw ConfigError("batchnorm eps must be non-negative");
    for (double v : running_var.values()) {
      if (v < 0.0) throw NumericError("batchnorm running_var has a negative entry");
    }
  }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) {
    throw ShapeError("conv: input extent " + std::to_string(in) + " with padding " + std::to_string(pad) +
                     " is smaller than kernel " + std::to_string(k));
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, k, stride, pad, oh, ow;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t positions() const { return oh * ow; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// col[(c * K + kh) * K + kw][oy * OW + ox]
inline void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t q_count = g.positions();
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        double* row = col + ((c * g.k + kh) * g.k + kw) * q_count;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<long>(oy * g.stride + kh) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<long>(ox * g.stride + kw) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
  const std::size_t q_count = g.positions();
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const double* row = col + ((c * g.k + kh) * g.k + kw) * q_count;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<long>(oy * g.stride + kh) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<long>(ox * g.stride + kw) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation via im2col; x is [N, C_in, H, W].
inline Tensor conv2d(const Tensor& x, const ConvWeight& w) {
  w.validate();
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [N, C, H, W], got " + shape_str(x.shape()));
  if (x.dim(1) != w.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                     std::to_string(w.in_channels()));
  }
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.out_channels(), w.kernel_size(),
                         w.stride, w.padding, 0, 0};
  g.oh = conv_out_extent(g.h, g.k, g.stride, g.pad);
  g.ow = conv_out_extent(g.w, g.k, g.stride, g.pad);

  const std::size_t P = g.patch();
  const std::size_t Q = g.positions();
  const std::size_t in_sample = g.c_in * g.h * g.w;
  const auto xv = x.values();
  const auto wv = w.kernel.values();

  // Pointwise convolutions read the input directly as their column matrix.
  auto cols = std::make_shared<std::vector<double>>();
  if (!g.pointwise()) {
    cols->resize(g.n * P * Q);
    for (std::size_t n = 0; n < g.n; ++n) detail::im2col(xv.data() + n * in_sample, g, cols->data() + n * P * Q);
  }

  std::vector<double> out(g.n * g.c_out * Q, 0.0);
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* col = g.pointwise() ? xv.data() + n * in_sample : cols->data() + n * P * Q;
    for (std::size_t o = 0; o < g.c_out; ++o) {
      double* row = out.data() + (n * g.c_out + o) * Q;
      if (w.has_bias()) std::fill(row, row + Q, w.bias[o]);
      for (std::size_t p = 0; p < P; ++p) {
        const double wk = wv[o * P + p];
        const double* crow = col + p * Q;
        for (std::size_t q = 0; q < Q; ++q) row[q] += wk * crow[q];
      }
    }
  }

  std::vector<Tensor> inputs{x, w.kernel};
  if (w.has_bias()) inputs.push_back(w.bias);
  const bool has_bias = w.has_bias();
  return detail::make_result(
      {g.n, g.c_out, g.oh, g.ow}, std::move(out), inputs, "conv2d", [g, cols, has_bias](detail::Node& self) {
        const std::size_t P = g.patch();
        const std::size_t Q = g.positions();
        const std::size_t in_sample = g.c_in * g.h * g.w;
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& gy = self.grad;
        auto* gx = detail::input_grad(self, 0);
        auto* gw = detail::input_grad(self, 1);
        auto* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
        std::vector<double> dcol(gx ? P * Q : 0);
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* col = g.pointwise() ? xv.data() + n * in_sample : cols->data() + n * P * Q;
          const double* gyn = gy.data() + n * g.c_out * Q;
          if (gw) {
            for (std::size_t o = 0; o < g.c_out; ++o) {
              const double* grow = gyn + o * Q;
              for (std::size_t p = 0; p < P; ++p) {
                const double* crow = col + p * Q;
                double acc = 0.0;
                for (std::size_t q = 0; q < Q; ++q) acc += grow[q] * crow[q];
                (*gw)[o * P + p] += acc;
              }
            }
          }
          if (gb) {
            for (std::size_t o = 0; o < g.c_out; ++o) {
              double acc = 0.0;
              for (std::size_t q = 0; q < Q; ++q) acc += gyn[o * Q + q];
              (*gb)[o] += acc;
            }
          }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t o = 0; o < g.c_out; ++o) {
              const double* grow = gyn + o * Q;
              for (std::size_t p = 0; p < P; ++p) {
                const double wk = wv[o * P + p];
                double* drow = dcol.data() + p * Q;
                for (std::size_t q = 0; q < Q; ++q) drow[q] += wk * grow[q];
              }
            }
            double* gxn = gx->data() + n * in_sample;
            if (g.pointwise()) {
              for (std::size_t i = 0; i < in_sample; ++i) gxn[i] += dcol[i];
            } else {
              detail::col2im_add(dcol.data(), g, gxn);
            }
          }
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias = {}, std::size_t stride = 1,
                     std::size_t padding = 0) {
  return conv2d(x, ConvWeight{kernel, bias, stride, padding});
}

// x is [N, C] or [N, C, H, W]; statistics are per channel over every other axis.
// Train mode normalizes with biased batch statistics and folds the unbiased
// batch variance into the running estimate.
inline Tensor batchnorm(const Tensor& x, BNParams& p, Mode mode) {
  p.validate();
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batchnorm: input must be rank 2 or 4");
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  if (c != p.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(c) + " channels, parameters have " +
                     std::to_string(p.channels()));
  }
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t count = n * inner;
  if (count == 0) throw ShapeError("batchnorm: batch of size 0");

  const auto xv = x.values();
  std::vector<double> mu(c), inv_std(c);
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += xv[(b * c + ch) * inner + i];
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xv[(b * c + ch) * inner + i] - m;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + p.eps);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      auto rm = p.running_mean.mutable_values();
      auto rv = p.running_var.mutable_values();
      rm[ch] = (1.0 - p.momentum) * rm[ch] + p.momentum * m;
      rv[ch] = (1.0 - p.momentum) * rv[ch] + p.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = p.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(p.running_var[ch] + p.eps);
    }
  }
  detail::check_finite(inv_std, "batchnorm inverse std");

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double gm = p.gamma[ch], bt = p.beta[ch];
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * c + ch) * inner + i;
        (*xhat)[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
        out[idx] = gm * (*xhat)[idx] + bt;
      }
    }

  const bool batch_stats = mode == Mode::train;
  return detail::make_result(
      x.shape(), std::move(out), {x, p.gamma, p.beta}, "batchnorm",
      [n, c, inner, count, xhat, inv_std, batch_stats](detail::Node& self) {
        const auto& gamma = self.inputs[1]->value;
        const auto& gy = self.grad;
        auto* gx = detail::input_grad(self, 0);
        auto* gg = detail::input_grad(self, 1);
        auto* gbeta = detail::input_grad(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              sum_dy += gy[idx];
              sum_dy_xhat += gy[idx] * (*xhat)[idx];
            }
          if (gg) (*gg)[ch] += sum_dy_xhat;
          if (gbeta) (*gbeta)[ch] += sum_dy;
          if (!gx) continue;
          const double scale_in = gamma[ch] * inv_std[ch];
          const double mean_dy = sum_dy / static_cast<double>(count);
          const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * c + ch) * inner + i;
              if (batch_stats) {
                (*gx)[idx] += scale_in * (gy[idx] - mean_dy - (*xhat)[idx] * mean_dy_xhat);
              } else {
                (*gx)[idx] += scale_in * gy[idx];
              }
            }
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::make_result(x.shape(), std::move(out), {x}, "relu", [](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (xv[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

// y = x w^T + b with x [N, D_in], w [D_out, D_in], b [D_out] (optional).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != dout)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match D_out " + std::to_string(dout));
  }
  std::vector<double> out(n * dout);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = b.defined() ? b[o] : 0.0;
      for (std::size_t i = 0; i < din; ++i) acc += x[r * din + i] * w[o * din + i];
      out[r * dout + o] = acc;
    }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  const bool has_bias = b.defined();
  return detail::make_result({n, dout}, std::move(out), inputs, "linear", [n, din, dout, has_bias](detail::Node& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    auto* gx = detail::input_grad(self, 0);
    auto* gw = detail::input_grad(self, 1);
    auto* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t o = 0; o < dout; ++o) {
        const double gy = self.grad[r * dout + o];
        if (gb) (*gb)[o] += gy;
        for (std::size_t i = 0; i < din; ++i) {
          if (gx) (*gx)[r * din + i] += gy * wv[o * din + i];
          if (gw) (*gw)[o * din + i] += gy * xv[r * din + i];
        }
      }
  });
}

// [N, C, H, W] -> [N, C]
inline Tensor avgpool_global(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("avgpool_global: input must be [N, C, H, W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.dim(2) * x.dim(3);
  if (inner == 0) throw ShapeError("avgpool_global: empty spatial extent");
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j) s += x[i * inner + j];
    out[i] = s / static_cast<double>(inner);
  }
  return detail::make_result({n, c}, std::move(out), {x}, "avgpool_global", [n, c, inner](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      const double w = 1.0 / static_cast<double>(inner);
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t j = 0; j < inner; ++j) (*g)[i * inner + j] += self.grad[i] * w;
    }
  });
}

namespace detail {

// Row-wise log-softmax of logits / temperature.
inline std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows, std::size_t k,
                                            double temperature) {
  std::vector<double> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = logits[r * k] / temperature;
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[r * k + j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[r * k + j] / temperature - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = logits[r * k + j] / temperature - lz;
  }
  return out;
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[label].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N, K]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto logp = std::make_shared<std::vector<double>>(detail::log_softmax_rows(logits.values(), n, k, 1.0));
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) loss -= (*logp)[r * k + static_cast<std::size_t>(labels[r])];
  loss /= static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::make_result({1}, {loss}, {logits}, "softmax_cross_entropy", [n, k, logp, ys](detail::Node& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      const double scale = self.grad[0] / static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j) {
          const double p = std::exp((*logp)[r * k + j]);
          const double target = static_cast<std::size_t>(ys[r]) == j ? 1.0 : 0.0;
          (*g)[r * k + j] += scale * (p - target);
        }
    }
  });
}

// tau^2 * mean_batch KL(softmax(teacher / tau) || softmax(student / tau)).
// The teacher argument never receives gradient.
inline Tensor kd_kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("kd_kl_divergence: temperature must be positive");
  if (student_logits.rank() != 2 || student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("kd_kl_divergence: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                     shape_str(teacher_logits.shape()));
  }
  const std::size_t n = student_logits.dim(0), k = student_logits.dim(1);
  if (n == 0) throw ShapeError("kd_kl_divergence: empty batch");
  auto log_ps = std::make_shared<std::vector<double>>(detail::log_softmax_rows(student_logits.values(), n, k, temperature));
  auto log_pt = std::make_shared<std::vector<double>>(detail::log_softmax_rows(teacher_logits.values(), n, k, temperature));
  double kl = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const double pt = std::exp((*log_pt)[r * k + j]);
      if (pt > 0.0) kl += pt * ((*log_pt)[r * k + j] - (*log_ps)[r * k + j]);
    }
  const double value = temperature * temperature * kl / static_cast<double>(n);
  return detail::make_result({1}, {value}, {student_logits}, "kd_kl_divergence",
                             [n, k, temperature, log_ps, log_pt](detail::Node& self) {
                               if (auto* g = detail::input_grad(self, 0)) {
                                 const double scale = self.grad[0] * temperature / static_cast<double>(n);
                                 for (std::size_t i = 0; i < n * k; ++i) {
                                   (*g)[i] += scale * (std::exp((*log_ps)[i]) - std::exp((*log_pt)[i]));
                                 }
                               }
                             });
}

}  // namespace gpd
