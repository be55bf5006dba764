#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fmsd/numerics/ops.hpp"
#include "fmsd/numerics/rng.hpp"

namespace fmsd::nn {

enum class Init { kXavier, kZero, kOne, kNormal };

template <typename T>
Tensor<T> init_tensor(Shape shape, Init init, Rng& rng, double fan_in = 1.0, double fan_out = 1.0) {
  Tensor<T> t(std::move(shape));
  switch (init) {
    case Init::kZero:
      break;
    case Init::kOne:
      t.fill(T{1});
      break;
    case Init::kXavier: {
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& x : t.data()) x = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
    case Init::kNormal:
      for (auto& x : t.data()) x = static_cast<T>(rng.normal());
      break;
  }
  return t;
}

/// y = x W (+ b). W is [in × out].
template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true, Init init = Init::kXavier) {
    weight = &store.create(name + ".weight", init_tensor<T>({in, out}, init, rng, double(in), double(out)));
    if (with_bias) bias = &store.create(name + ".bias", Tensor<T>({1, out}));
  }

  std::size_t in_dim() const { return weight->value.rows(); }
  std::size_t out_dim() const { return weight->value.cols(); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    auto y = matmul(x, tape.param(*weight));
    return bias ? add_row(y, tape.param(*bias)) : y;
  }
};

/// Same-length 1-D convolution over time: rows are frames, columns are channels.
template <typename T>
struct Conv1d {
  Linear<T> proj;
  std::size_t kernel = 1;

  Conv1d() = default;
  Conv1d(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         Rng& rng, bool with_bias = true)
      : proj(store, name, in * k, out, rng, with_bias), kernel(k) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return proj(tape, kernel == 1 ? x : unfold_time(x, kernel));
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
    gain = &store.create(name + ".gain", Tensor<T>({1, dim}, T{1}));
    bias = &store.create(name + ".bias", Tensor<T>({1, dim}));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return layer_norm(x, tape.param(*gain), tape.param(*bias));
  }
};

template <typename T>
struct Embedding {
  Parameter<T>* table = nullptr;

  Embedding() = default;
  Embedding(ParameterStore<T>& store, const std::string& name, std::size_t count, std::size_t dim, Rng& rng,
            T init_scale = T{1}) {
    auto t = init_tensor<T>({count, dim}, Init::kNormal, rng);
    for (auto& x : t.data()) x *= init_scale;
    table = &store.create(name + ".table", std::move(t));
  }

  std::size_t count() const { return table->value.rows(); }
  std::size_t dim() const { return table->value.cols(); }

  Var<T> operator()(Tape<T>& tape, const std::vector<std::size_t>& ids) const {
    return gather_rows(tape.param(*table), ids);
  }
};

/// Two affine maps with a ReLU between them.
template <typename T>
struct FeedForward {
  Linear<T> up;
  Linear<T> down;

  FeedForward() = default;
  FeedForward(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng,
              bool zero_init = false) {
    const Init init = zero_init ? Init::kZero : Init::kXavier;
    up = Linear<T>(store, name + ".up", dim, hidden, rng, true, init);
    down = Linear<T>(store, name + ".down", hidden, dim, rng, true, init);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return down(tape, relu(up(tape, x))); }
};

}  // namespace fmsd::nn
