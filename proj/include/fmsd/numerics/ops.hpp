#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fmsd/numerics/tape.hpp"
#include "fmsd/numerics/tensor.hpp"

// Differentiable primitives over rank-2 tensors. Vectors are 1×n rows and scalars are 1×1.
namespace fmsd::nn {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw NumericError(msg);
}

// C[m×n] (+)= A[m×k] · B[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += A[m×n] · B[k×n]ᵀ
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  require(a.tape == b.tape, "variables recorded on different tapes");
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require_same_tape(a, b);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value(), "detach");
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  detail::require(bv.rows() == k, "matmul: inner dimensions " + shape_str(av.shape()) + " · " +
                                      shape_str(bv.shape()));
  Tensor<T> out = Tensor<T>::matrix(m, n);
  detail::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) detail::gemm_nt(g.data().data(), t.value(ib).data().data(), t.grad(ia).data().data(), m, n, k);
    if (t.requires_grad(ib)) detail::gemm_tn(t.value(ia).data().data(), g.data().data(), t.grad(ib).data().data(), m, k, n);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<T> out = Tensor<T>::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = av(i, j);
  const std::size_t ia = a.id;
  return a.tape->record("transpose", std::move(out), {ia}, [ia, r, c](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga(i, j) += g(j, i);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto d = t.grad(id).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("sub", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      auto bv = t.value(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      auto av = t.value(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= s;
  const std::size_t ia = a.id;
  return a.tape->record("scale", std::move(out), {ia}, [ia, s](Tape<T>& t, const Tensor<T>& g) {
    auto d = t.grad(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
  });
}

/// a[m×n] + row[1×n], the row broadcast over every row of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::require_same_tape(a, row);
  const auto& av = a.value();
  const auto& rv = row.value();
  const std::size_t m = av.rows(), n = av.cols();
  detail::require(rv.rows() == 1 && rv.cols() == n,
                  "add_row: row " + shape_str(rv.shape()) + " vs matrix " + shape_str(av.shape()));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += rv[j];
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->record("add_row", std::move(out), {ia, ir}, [ia, ir, m, n](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(ir)) {
      auto& d = t.grad(ir);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += g(i, j);
    }
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = x > T{0} ? x : T{0};
  const std::size_t ia = a.id;
  return a.tape->record("relu", std::move(out), {ia}, [ia](Tape<T>& t, const Tensor<T>& g) {
    auto d = t.grad(ia).data();
    auto x = t.value(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > T{0}) d[i] += g[i];
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = std::tanh(x);
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record("tanh", std::move(out), {ia}, [ia, self](Tape<T>& t, const Tensor<T>& g) {
    auto d = t.grad(ia).data();
    auto y = t.value(self).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (T{1} - y[i] * y[i]);
  });
}

/// x · sigmoid(x)
template <typename T>
Var<T> silu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = x / (T{1} + std::exp(-x));
  const std::size_t ia = a.id;
  return a.tape->record("silu", std::move(out), {ia}, [ia](Tape<T>& t, const Tensor<T>& g) {
    auto d = t.grad(ia).data();
    auto x = t.value(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-x[i]));
      d[i] += g[i] * s * (T{1} + x[i] * (T{1} - s));
    }
  });
}

/// Sum of all elements as a 1×1 tensor.
template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T x : a.value().data()) s += x;
  const std::size_t ia = a.id;
  return a.tape->record("sum", Tensor<T>::matrix(1, 1, s), {ia}, [ia](Tape<T>& t, const Tensor<T>& g) {
    const T gv = g[0];
    for (auto& d : t.grad(ia).data()) d += gv;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

/// Column means over rows: [m×n] -> [1×n].
template <typename T>
Var<T> mean_rows(Var<T> a) {
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out = Tensor<T>::matrix(1, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av(i, j);
  const T inv = T{1} / static_cast<T>(m);
  for (auto& x : out.data()) x *= inv;
  const std::size_t ia = a.id;
  return a.tape->record("mean_rows", std::move(out), {ia}, [ia, m, n, inv](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d(i, j) += g[j] * inv;
  });
}

/// Column maxima over rows: [m×n] -> [1×n]. Ties route gradient to the first maximal row.
template <typename T>
Var<T> max_rows(Var<T> a) {
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out = Tensor<T>::matrix(1, n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    T best = av(0, j);
    for (std::size_t i = 1; i < m; ++i)
      if (av(i, j) > best) {
        best = av(i, j);
        arg[j] = i;
      }
    out[j] = best;
  }
  const std::size_t ia = a.id;
  return a.tape->record("max_rows", std::move(out), {ia}, [ia, arg = std::move(arg), n](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ia);
    for (std::size_t j = 0; j < n; ++j) d(arg[j], j) += g[j];
  });
}

/// Row-wise max-subtracted softmax.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i) {
    auto r = out.row_span(i);
    T mx = r[0];
    for (T x : r) mx = std::max(mx, x);
    T s = 0;
    for (auto& x : r) {
      x = std::exp(x - mx);
      s += x;
    }
    for (auto& x : r) x /= s;
  }
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record("softmax", std::move(out), {ia}, [ia, self, m, n](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < n; ++j) d(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy_rows(Var<T> logits, const std::vector<std::size_t>& labels) {
  const auto& lv = logits.value();
  const std::size_t m = lv.rows(), n = lv.cols();
  detail::require(labels.size() == m, "cross_entropy_rows: label count mismatch");
  Tensor<T> prob = lv;
  T loss = 0;
  for (std::size_t i = 0; i < m; ++i) {
    detail::require(labels[i] < n, "cross_entropy_rows: label out of range");
    auto r = prob.row_span(i);
    T mx = r[0];
    for (T x : r) mx = std::max(mx, x);
    T s = 0;
    for (auto& x : r) {
      x = std::exp(x - mx);
      s += x;
    }
    for (auto& x : r) x /= s;
    loss -= (lv(i, labels[i]) - mx) - std::log(s);
  }
  loss /= static_cast<T>(m);
  const std::size_t il = logits.id;
  return logits.tape->record(
      "cross_entropy", Tensor<T>::matrix(1, 1, loss), {il},
      [il, prob = std::move(prob), labels, m, n](Tape<T>& t, const Tensor<T>& g) {
        auto& d = t.grad(il);
        const T s = g[0] / static_cast<T>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) d(i, j) += s * (prob(i, j) - (j == labels[i] ? T{1} : T{0}));
      });
}

/// Mean squared difference between two same-shaped tensors.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mse");
  auto av = a.value().data();
  auto bv = b.value().data();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    s += d * d;
  }
  const T inv = T{1} / static_cast<T>(av.size());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mse", Tensor<T>::matrix(1, 1, s * inv), {ia, ib}, [ia, ib, inv](Tape<T>& t, const Tensor<T>& g) {
    auto av = t.value(ia).data();
    auto bv = t.value(ib).data();
    const T k = T{2} * inv * g[0];
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += k * (av[i] - bv[i]);
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= k * (av[i] - bv[i]);
    }
  });
}

/// Mean absolute difference. Zero differences contribute zero subgradient.
template <typename T>
Var<T> l1(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "l1");
  auto av = a.value().data();
  auto bv = b.value().data();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  const T inv = T{1} / static_cast<T>(av.size());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("l1", Tensor<T>::matrix(1, 1, s * inv), {ia, ib}, [ia, ib, inv](Tape<T>& t, const Tensor<T>& g) {
    auto av = t.value(ia).data();
    auto bv = t.value(ib).data();
    const T k = inv * g[0];
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T diff = av[i] - bv[i];
      const T sgn = diff > 0 ? T{1} : (diff < 0 ? T{-1} : T{0});
      if (t.requires_grad(ia)) t.grad(ia)[i] += k * sgn;
      if (t.requires_grad(ib)) t.grad(ib)[i] -= k * sgn;
    }
  });
}

/// Row-wise layer normalization with learned gain and bias rows.
template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  detail::require(gv.size() == n && bv.size() == n, "layer_norm: gain/bias width mismatch");
  Tensor<T> xhat = Tensor<T>::matrix(m, n);
  std::vector<T> inv_std(m);
  Tensor<T> out = Tensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += av(i, j);
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (av(i, j) - mu) * (av(i, j) - mu);
    var /= static_cast<T>(n);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (av(i, j) - mu) * inv_std[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  const std::size_t ia = a.id, ig = gain.id, ib = bias.id;
  return a.tape->record(
      "layer_norm", std::move(out), {ia, ig, ib},
      [ia, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
        const auto& gv = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              if (t.requires_grad(ig)) t.grad(ig)[j] += g(i, j) * xhat(i, j);
              if (t.requires_grad(ib)) t.grad(ib)[j] += g(i, j);
            }
        }
        if (!t.requires_grad(ia)) return;
        auto& d = t.grad(ia);
        for (std::size_t i = 0; i < m; ++i) {
          T sum_dy = 0, sum_dy_x = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T dy = g(i, j) * gv[j];
            sum_dy += dy;
            sum_dy_x += dy * xhat(i, j);
          }
          const T invn = T{1} / static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T dy = g(i, j) * gv[j];
            d(i, j) += inv_std[i] * (dy - invn * sum_dy - xhat(i, j) * invn * sum_dy_x);
          }
        }
      });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths, ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    detail::require(p.rows() == m, "concat_cols: row count mismatch");
    widths.push_back(p.cols());
    ids.push_back(p.id);
    n += p.cols();
  }
  Tensor<T> out = Tensor<T>::matrix(m, n);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, off + j) = pv(i, j);
    off += widths[k];
  }
  return parts[0].tape->record("concat_cols", std::move(out), ids, [ids, widths, m](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto& d = t.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) d(i, j) += g(i, off + j);
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> heights, ids;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    detail::require(p.cols() == n, "concat_rows: column count mismatch");
    heights.push_back(p.rows());
    ids.push_back(p.id);
    m += p.rows();
  }
  Tensor<T> out = Tensor<T>::matrix(m, n);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t i = 0; i < heights[k]; ++i)
      for (std::size_t j = 0; j < n; ++j) out(off + i, j) = pv(i, j);
    off += heights[k];
  }
  return parts[0].tape->record("concat_rows", std::move(out), ids, [ids, heights, n](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto& d = t.grad(ids[k]);
        for (std::size_t i = 0; i < heights[k]; ++i)
          for (std::size_t j = 0; j < n; ++j) d(i, j) += g(off + i, j);
      }
      off += heights[k];
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t len) {
  const auto& av = a.value();
  const std::size_t m = av.rows();
  detail::require(len > 0 && start + len <= av.cols(), "slice_cols: range out of bounds");
  Tensor<T> out = Tensor<T>::matrix(m, len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out(i, j) = av(i, start + j);
  const std::size_t ia = a.id;
  return a.tape->record("slice_cols", std::move(out), {ia}, [ia, m, start, len](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) d(i, start + j) += g(i, j);
  });
}

/// Gathers rows by index; repeated indices broadcast (embedding lookup, length regulation).
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
  const auto& av = a.value();
  const std::size_t n = av.cols();
  detail::require(!index.empty(), "gather_rows: empty index");
  Tensor<T> out = Tensor<T>::matrix(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < av.rows(), "gather_rows: index " + std::to_string(index[i]) + " out of range");
    for (std::size_t j = 0; j < n; ++j) out(i, j) = av(index[i], j);
  }
  const std::size_t ia = a.id;
  return a.tape->record("gather_rows", std::move(out), {ia}, [ia, index = std::move(index), n](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) d(index[i], j) += g(i, j);
  });
}

/// [T×C] -> [T×(k·C)] sliding windows centred on each row, zero-padded at both ends (odd k).
template <typename T>
Var<T> unfold_time(Var<T> a, std::size_t k) {
  detail::require(k % 2 == 1, "unfold_time: kernel size must be odd");
  const auto& av = a.value();
  const std::size_t rows = av.rows(), c = av.cols();
  const long half = static_cast<long>(k / 2);
  Tensor<T> out = Tensor<T>::matrix(rows, k * c);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t w = 0; w < k; ++w) {
      const long src = static_cast<long>(i) + static_cast<long>(w) - half;
      if (src < 0 || src >= static_cast<long>(rows)) continue;
      for (std::size_t j = 0; j < c; ++j) out(i, w * c + j) = av(static_cast<std::size_t>(src), j);
    }
  const std::size_t ia = a.id;
  return a.tape->record("unfold_time", std::move(out), {ia}, [ia, rows, c, k, half](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t w = 0; w < k; ++w) {
        const long src = static_cast<long>(i) + static_cast<long>(w) - half;
        if (src < 0 || src >= static_cast<long>(rows)) continue;
        for (std::size_t j = 0; j < c; ++j) d(static_cast<std::size_t>(src), j) += g(i, w * c + j);
      }
  });
}

/// Row-wise L2 normalization; a zero row is an error, never NaN.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out = av;
  std::vector<T> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    T sq = 0;
    for (std::size_t j = 0; j < n; ++j) sq += av(i, j) * av(i, j);
    if (!(sq > T{0})) throw NumericError("l2_normalize: zero vector has no direction");
    norms[i] = std::sqrt(sq);
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= norms[i];
  }
  const std::size_t ia = a.id;
  const std::size_t self = a.tape->size();
  return a.tape->record("l2_normalize", std::move(out), {ia}, [ia, self, m, n, norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(self);
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < n; ++j) d(i, j) += (g(i, j) - y(i, j) * dot) / norms[i];
    }
  });
}

/// Per-head Softmax(Q Kᵀ / √d_k) V with heads concatenated along columns.
/// The output projection belongs to the caller.
template <typename T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
  const std::size_t dq = q.cols();
  detail::require(heads > 0 && dq % heads == 0, "attention: width " + std::to_string(dq) +
                                                      " not divisible by " + std::to_string(heads) + " heads");
  detail::require(k.cols() == dq, "attention: Q/K width mismatch");
  detail::require(k.rows() == v.rows(), "attention: K/V length mismatch");
  detail::require(v.cols() % heads == 0, "attention: V width not divisible by heads");
  const std::size_t dk = dq / heads, dv = v.cols() / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dk));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice_cols(q, h * dk, dk);
    auto kh = heads == 1 ? k : slice_cols(k, h * dk, dk);
    auto vh = heads == 1 ? v : slice_cols(v, h * dv, dv);
    auto weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    outs.push_back(matmul(weights, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

}  // namespace fmsd::nn
