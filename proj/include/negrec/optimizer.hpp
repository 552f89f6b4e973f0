// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace negrec {

// Visits (value, gradient, count) chunks in a stable order; every trainable
// container exposes its parameters through this shape.
using ParamVisitor = std::function<void(double* values, double* grads, std::size_t n)>;
using ParamWalk = std::function<void(const ParamVisitor&)>;

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Walks the parameters once to size the moment buffers, then applies one
  // update. The walk order must not change between steps.
  void step(const ParamWalk& walk) {
    if (m_.empty()) {
      std::size_t total = 0;
      walk([&](double*, double*, std::size_t n) { total += n; });
      m_.assign(total, 0.0);
      v_.assign(total, 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    std::size_t off = 0;
    walk([&](double* w, double* g, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        const double grad = g[i];
        m_[off + i] = beta1_ * m_[off + i] + (1.0 - beta1_) * grad;
        v_[off + i] = beta2_ * v_[off + i] + (1.0 - beta2_) * grad * grad;
        const double mhat = m_[off + i] / bc1;
        const double vhat = v_[off + i] / bc2;
        w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      off += n;
    });
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// Plain SGD; used where per-step drift must scale with the raw gradient.
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(const ParamWalk& walk) {
    walk([&](double* w, double* g, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) w[i] -= lr_ * g[i];
    });
  }

 private:
  double lr_;
};

}  // namespace negrec
