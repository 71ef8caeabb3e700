#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "openrft/common.hpp"

namespace openrft {

enum class OptimizerKind { adam, sgd };

// Adam over a contiguous slice [offset, offset + size) of a flat parameter
// vector. Gradients are descended; pass a negated gradient to ascend.
class Adam {
 public:
  Adam(std::size_t offset, std::size_t size, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : offset_(offset), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const double g = grad[offset_ + i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      params[offset_ + i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

  double learning_rate() const { return lr_; }

 private:
  std::size_t offset_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// Either Adam or plain gradient descent over a parameter slice.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::size_t offset, std::size_t size, double lr)
      : kind_(kind), offset_(offset), size_(size), lr_(lr), adam_(offset, size, lr) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  }

  void step(std::span<double> params, std::span<const double> grad) {
    if (kind_ == OptimizerKind::adam) {
      adam_.step(params, grad);
      return;
    }
    for (std::size_t i = offset_; i < offset_ + size_; ++i) params[i] -= lr_ * grad[i];
  }

 private:
  OptimizerKind kind_;
  std::size_t offset_, size_;
  double lr_;
  Adam adam_;
};

}  // namespace openrft
