#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmsd/numerics/tape.hpp"

namespace fmsd::nn {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  /// Multiplies lr after every step; 1 keeps it constant.
  double lr_decay = 1.0;
};

/// Moments for one parameter, shape-matched to it.
template <typename T>
struct Moments {
  Tensor<T> m;
  Tensor<T> v;
};

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<Moments<T>> moments;
};

/// AdamW with decoupled weight decay: p <- p - lr·wd·p - lr·m̂/(√v̂ + ε).
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) { state_.config = cfg; }

  const OptimizerState<T>& state() const noexcept { return state_; }
  OptimizerState<T>& state() noexcept { return state_; }

  double current_lr() const { return state_.config.lr * std::pow(state_.config.lr_decay, double(state_.step)); }

  void step(ParameterStore<T>& params) {
    const auto& c = state_.config;
    if (!(c.lr >= 0.0)) throw std::invalid_argument("AdamW: learning rate must be non-negative");
    if (state_.moments.empty()) {
      for (auto& p : params) state_.moments.push_back({Tensor<T>(p->value.shape()), Tensor<T>(p->value.shape())});
    }
    if (state_.moments.size() != params.size()) throw std::invalid_argument("AdamW: parameter count changed");
    const double lr = current_lr();
    ++state_.step;
    const double bc1 = 1.0 - std::pow(c.beta1, double(state_.step));
    const double bc2 = 1.0 - std::pow(c.beta2, double(state_.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      auto& mo = state_.moments[k];
      if (mo.m.shape() != p.value.shape()) {
        throw std::invalid_argument("AdamW: moment shape mismatch for " + p.name);
      }
      auto pv = p.value.data();
      auto gv = p.grad.data();
      auto mv = mo.m.data();
      auto vv = mo.v.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double g = gv[i];
        const double m = c.beta1 * double(mv[i]) + (1.0 - c.beta1) * g;
        const double v = c.beta2 * double(vv[i]) + (1.0 - c.beta2) * g * g;
        mv[i] = static_cast<T>(m);
        vv[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double x = pv[i];
        x -= lr * c.weight_decay * x;
        x -= lr * mhat / (std::sqrt(vhat) + c.eps);
        pv[i] = static_cast<T>(x);
      }
    }
  }

 private:
  OptimizerState<T> state_;
};

template <typename T>
double grad_norm(const ParameterStore<T>& params) {
  double s = 0;
  for (const auto& p : params)
    for (T g : p->grad.data()) s += double(g) * double(g);
  return std::sqrt(s);
}

/// Rescales all gradients so their global norm is at most max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  const double n = grad_norm(params);
  if (max_norm > 0 && n > max_norm) {
    const T s = static_cast<T>(max_norm / n);
    for (auto& p : params)
      for (auto& g : p->grad.data()) g *= s;
  }
  return n;
}

}  // namespace fmsd::nn
