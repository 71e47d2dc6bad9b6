#pragma once

// Optimizers over trainable parameters. Frozen parameters are dropped at
// construction, so a step can never touch them.

#include <cmath>
#include <vector>

#include "afss/autograd.hpp"

namespace afss {

template <typename T>
ParameterRefs<T> trainable(const ParameterRefs<T>& params) {
  ParameterRefs<T> out;
  for (auto* p : params)
    if (!p->frozen) out.push_back(p);
  return out;
}

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.001;
};

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   g += wd * w;  buf = momentum * buf + g;  w -= lr * buf
template <typename T>
class Sgd {
 public:
  Sgd(const ParameterRefs<T>& params, SgdOptions opt) : params_(trainable(params)), opt_(opt) {
    for (auto* p : params_) buffers_.emplace_back(p->value().size(), T(0));
  }

  const ParameterRefs<T>& parameters() const { return params_; }
  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }

  void zero_grad() {
    for (auto* p : params_) p->var.zero_grad();
  }

  void step() {
    const T lr = static_cast<T>(opt_.lr), mom = static_cast<T>(opt_.momentum), wd = static_cast<T>(opt_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->var.has_grad()) continue;
      auto& w = p->mutable_value();
      const auto& g = p->var.grad();
      auto& buf = buffers_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = g[j] + wd * w[j];
        buf[j] = mom * buf[j] + gj;
        w[j] -= lr * buf[j];
      }
    }
  }

 private:
  ParameterRefs<T> params_;
  SgdOptions opt_;
  std::vector<std::vector<T>> buffers_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(const ParameterRefs<T>& params, AdamOptions opt) : params_(trainable(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->value().size(), 0.0);
      v_.emplace_back(p->value().size(), 0.0);
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }

  void zero_grad() {
    for (auto* p : params_) p->var.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->var.has_grad()) continue;
      auto& w = p->mutable_value();
      const auto& g = p->var.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * gj;
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * gj * gj;
        const double step = opt_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + opt_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - step);
      }
    }
  }

 private:
  ParameterRefs<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace afss
