#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v
inline void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
                              double lr, double momentum, double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_momentum_step: parameter/gradient/velocity sizes " + std::to_string(params.size()) + "/" +
                     std::to_string(grads.size()) + "/" + std::to_string(velocity.size()) + " differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
    params[i] -= lr * velocity[i];
  }
}

// Owns one velocity buffer per parameter tensor, in registration order.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const auto g = p.mutable_grad();
      sgd_momentum_step(p.mutable_values(), g, velocity_[i], lr, momentum_, weight_decay_);
      detail::check_finite(p.values(), "sgd update");
    }
  }

  const std::vector<std::vector<double>>& velocity() const { return velocity_; }
  std::vector<std::vector<double>>& velocity() { return velocity_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

}  // namespace gpd
