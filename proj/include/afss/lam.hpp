#pragma once

// Bottleneck adapter and scaled residual injection.
//
//   F_hat = relu(F* . W_down) . W_up     applied per position along channels
//   F     = F_hat * beta + F

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "afss/autograd.hpp"
#include "afss/ops.hpp"

namespace afss {

template <typename T>
struct AdapterWeights {
  Parameter<T> down;  // (d, d / gamma)
  Parameter<T> up;    // (d / gamma, d)
  std::size_t gamma = 16;
  T beta = T(0.1);

  AdapterWeights() = default;

  // W_down ~ U(-1/sqrt(d), 1/sqrt(d)); W_up = 0 so a fresh adapter injects nothing.
  AdapterWeights(std::size_t d, std::size_t gamma_, T beta_, std::mt19937_64& rng, const std::string& prefix)
      : gamma(gamma_), beta(beta_) {
    if (gamma == 0 || d % gamma != 0) {
      throw std::invalid_argument("adapter: channel count " + std::to_string(d) + " not divisible by gamma " +
                                  std::to_string(gamma));
    }
    const std::size_t hidden = d / gamma;
    Tensor<T> wd({d, hidden});
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : wd.values()) v = static_cast<T>(dist(rng));
    down = Parameter<T>(prefix + ".w_down", std::move(wd));
    up = Parameter<T>(prefix + ".w_up", Tensor<T>({hidden, d}));
  }

  std::size_t d() const { return down.value().dim(0); }
  std::size_t hidden() const { return down.value().dim(1); }
  std::size_t parameter_count() const { return down.numel() + up.numel(); }
};

template <typename T>
Var<T> adapt(const Var<T>& enhanced, const Var<T>& w_down, const Var<T>& w_up) {
  if (enhanced.dim(1) != w_down.dim(0) || w_down.dim(1) != w_up.dim(0) || w_up.dim(1) != w_down.dim(0)) {
    throw ShapeError("adapt: feature " + shape_to_string(enhanced.shape()) + " vs W_down " +
                     shape_to_string(w_down.shape()) + ", W_up " + shape_to_string(w_up.shape()));
  }
  return channel_project(relu(channel_project(enhanced, w_down)), w_up);
}

template <typename T>
Var<T> adapt(const Var<T>& enhanced, const AdapterWeights<T>& w) {
  return adapt(enhanced, w.down.var, w.up.var);
}

template <typename T>
Var<T> inject(const Var<T>& features, const Var<T>& adapted, T beta) {
  return add(scale(adapted, beta), features);
}

}  // namespace afss
