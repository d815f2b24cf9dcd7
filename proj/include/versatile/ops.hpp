// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each op computes its forward value eagerly and,
// when a tape is active and some input requires a gradient, records a
// closure that accumulates into the inputs' gradients. Accumulation always
// walks rows and inner indices in ascending order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "versatile/kernels.hpp"
#include "versatile/rng.hpp"
#include "versatile/tensor.hpp"

namespace versatile {

namespace detail {

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename Real>
void require_row_scalars(const Tensor<Real>& x, const Tensor<Real>& s, const char* op) {
  if (s.last_dim() != 1 || s.numel() != x.rows()) {
    throw DimensionError(std::string(op) + ": per-row scalar shape " + to_string(s.shape()) +
                         " does not match rows of " + to_string(x.shape()));
  }
}

template <typename Real, typename Fn>
void record(Tensor<Real>& out, std::initializer_list<const Tensor<Real>*> inputs, Fn&& fn) {
  if (Tape<Real>::should_record(inputs)) Tape<Real>::active()->record(out, std::forward<Fn>(fn));
}

}  // namespace detail

/// Tensor that never receives gradients.
template <typename Real>
Tensor<Real> constant(Shape shape, std::vector<Real> values) {
  return Tensor<Real>(std::move(shape), std::move(values));
}

// ---------------------------------------------------------------- matmul

/// a[.., m, k] x b[k, n] -> [.., m, n].
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (b.rank() != 2 || a.last_dim() != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const std::size_t M = a.rows(), K = a.last_dim(), N = b.dim(1);
  Shape shape = a.shape();
  shape.back() = N;
  Tensor<Real> out(shape);
  kernels::gemm(M, K, N, a.values().data(), K, b.values().data(), N, out.mutable_values().data(), N);
  detail::record(out, {&a, &b}, [an = a.node(), bn = b.node(), on = out.node(), M, K, N] {
    if (an->requires_grad) {
      kernels::gemm_a_bt(M, K, N, on->grad.data(), N, bn->value.data(), N, an->ensure_grad().data(), K);
    }
    if (bn->requires_grad) {
      kernels::gemm_at_b(M, K, N, an->value.data(), K, on->grad.data(), N, bn->ensure_grad().data(), N);
    }
  });
  return out;
}

/// a[.., k] x w[:, begin:begin+count] without copying the column block.
template <typename Real>
Tensor<Real> matmul_cols(const Tensor<Real>& a, const Tensor<Real>& w, std::size_t begin, std::size_t count) {
  if (w.rank() != 2 || a.last_dim() != w.dim(0) || count == 0 || begin + count > w.dim(1)) {
    throw DimensionError("matmul_cols: " + to_string(a.shape()) + " x " + to_string(w.shape()) + "[:, " +
                         std::to_string(begin) + ":" + std::to_string(begin + count) + "]");
  }
  const std::size_t M = a.rows(), K = a.last_dim(), ld = w.dim(1);
  Shape shape = a.shape();
  shape.back() = count;
  Tensor<Real> out(shape);
  kernels::gemm(M, K, count, a.values().data(), K, w.values().data() + begin, ld, out.mutable_values().data(),
                count);
  detail::record(out, {&a, &w}, [an = a.node(), wn = w.node(), on = out.node(), M, K, ld, begin, count] {
    if (an->requires_grad) {
      kernels::gemm_a_bt(M, K, count, on->grad.data(), count, wn->value.data() + begin, ld,
                         an->ensure_grad().data(), K);
    }
    if (wn->requires_grad) {
      kernels::gemm_at_b(M, K, count, an->value.data(), K, on->grad.data(), count,
                         wn->ensure_grad().data() + begin, ld);
    }
  });
  return out;
}

/// a[.., count] x w[begin:begin+count, :] without copying the row block.
template <typename Real>
Tensor<Real> matmul_rows(const Tensor<Real>& a, const Tensor<Real>& w, std::size_t begin, std::size_t count) {
  if (w.rank() != 2 || a.last_dim() != count || begin + count > w.dim(0)) {
    throw DimensionError("matmul_rows: " + to_string(a.shape()) + " x " + to_string(w.shape()) + "[" +
                         std::to_string(begin) + ":" + std::to_string(begin + count) + ", :]");
  }
  const std::size_t M = a.rows(), N = w.dim(1);
  Shape shape = a.shape();
  shape.back() = N;
  Tensor<Real> out(shape);
  const std::size_t offset = begin * N;
  kernels::gemm(M, count, N, a.values().data(), count, w.values().data() + offset, N,
                out.mutable_values().data(), N);
  detail::record(out, {&a, &w}, [an = a.node(), wn = w.node(), on = out.node(), M, N, offset, count] {
    if (an->requires_grad) {
      kernels::gemm_a_bt(M, count, N, on->grad.data(), N, wn->value.data() + offset, N,
                         an->ensure_grad().data(), count);
    }
    if (wn->requires_grad) {
      kernels::gemm_at_b(M, count, N, an->value.data(), count, on->grad.data(), N,
                         wn->ensure_grad().data() + offset, N);
    }
  });
  return out;
}

/// Materialized copy of w[:, begin:begin+count].
template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& w, std::size_t begin, std::size_t count) {
  if (w.rank() != 2 || count == 0 || begin + count > w.dim(1)) {
    throw DimensionError("slice_cols out of range on " + to_string(w.shape()));
  }
  const std::size_t R = w.dim(0), C = w.dim(1);
  Tensor<Real> out({R, count});
  auto o = out.mutable_values();
  auto v = w.values();
  for (std::size_t r = 0; r < R; ++r) std::copy_n(v.data() + r * C + begin, count, o.data() + r * count);
  detail::record(out, {&w}, [wn = w.node(), on = out.node(), R, C, begin, count] {
    auto& g = wn->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < count; ++c) g[r * C + begin + c] += on->grad[r * count + c];
    }
  });
  return out;
}

/// Materialized copy of w[begin:begin+count, :].
template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& w, std::size_t begin, std::size_t count) {
  if (w.rank() != 2 || count == 0 || begin + count > w.dim(0)) {
    throw DimensionError("slice_rows out of range on " + to_string(w.shape()));
  }
  const std::size_t C = w.dim(1);
  Tensor<Real> out({count, C});
  auto v = w.values();
  std::copy_n(v.data() + begin * C, count * C, out.mutable_values().data());
  detail::record(out, {&w}, [wn = w.node(), on = out.node(), C, begin, count] {
    auto& g = wn->ensure_grad();
    for (std::size_t i = 0; i < count * C; ++i) g[begin * C + i] += on->grad[i];
  });
  return out;
}

// ----------------------------------------------------------- elementwise

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Real> out(a.shape());
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  detail::record(out, {&a, &b}, [an = a.node(), bn = b.node(), on = out.node()] {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Real> out(a.shape());
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  detail::record(out, {&a, &b}, [an = a.node(), bn = b.node(), on = out.node()] {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
    }
  });
  return out;
}

/// Hadamard product.
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<Real> out(a.shape());
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  detail::record(out, {&a, &b}, [an = a.node(), bn = b.node(), on = out.node()] {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

/// Elementwise y = f(x) with derivative df(x, y).
template <typename Real, typename F, typename DF>
Tensor<Real> unary(const Tensor<Real>& x, F f, DF df) {
  Tensor<Real> out(x.shape());
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(xv[i]);
  detail::record(out, {&x}, [xn = x.node(), on = out.node(), df] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * df(xn->value[i], on->value[i]);
  });
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real s) {
  return unary(x, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

template <typename Real>
Tensor<Real> silu(const Tensor<Real>& x) {
  return unary(
      x, [](Real v) { return v / (Real{1} + std::exp(-v)); },
      [](Real v, Real) {
        const Real s = Real{1} / (Real{1} + std::exp(-v));
        return s * (Real{1} + v * (Real{1} - s));
      });
}

/// x[r, :] * s[r] for every row r.
template <typename Real>
Tensor<Real> mul_rows(const Tensor<Real>& x, const Tensor<Real>& s) {
  detail::require_row_scalars(x, s, "mul_rows");
  const std::size_t R = x.rows(), D = x.last_dim();
  Tensor<Real> out(x.shape());
  auto o = out.mutable_values();
  auto xv = x.values(), sv = s.values();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < D; ++j) o[r * D + j] = xv[r * D + j] * sv[r];
  }
  detail::record(out, {&x, &s}, [xn = x.node(), sn = s.node(), on = out.node(), R, D] {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < D; ++j) g[r * D + j] += on->grad[r * D + j] * sn->value[r];
      }
    }
    if (sn->requires_grad) {
      auto& g = sn->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        Real acc = 0;
        for (std::size_t j = 0; j < D; ++j) acc += on->grad[r * D + j] * xn->value[r * D + j];
        g[r] += acc;
      }
    }
  });
  return out;
}

/// Per-row convex combination lam[r] * a[r, :] + (1 - lam[r]) * b[r, :].
template <typename Real>
Tensor<Real> blend_rows(const Tensor<Real>& lam, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "blend_rows");
  detail::require_row_scalars(a, lam, "blend_rows");
  const std::size_t R = a.rows(), D = a.last_dim();
  Tensor<Real> out(a.shape());
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values(), lv = lam.values();
  for (std::size_t r = 0; r < R; ++r) {
    const Real l = lv[r], m = Real{1} - l;
    for (std::size_t j = 0; j < D; ++j) o[r * D + j] = l * av[r * D + j] + m * bv[r * D + j];
  }
  detail::record(out, {&lam, &a, &b}, [ln = lam.node(), an = a.node(), bn = b.node(), on = out.node(), R, D] {
    const auto& go = on->grad;
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < D; ++j) g[r * D + j] += ln->value[r] * go[r * D + j];
      }
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        const Real m = Real{1} - ln->value[r];
        for (std::size_t j = 0; j < D; ++j) g[r * D + j] += m * go[r * D + j];
      }
    }
    if (ln->requires_grad) {
      auto& g = ln->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        Real acc = 0;
        for (std::size_t j = 0; j < D; ++j) acc += go[r * D + j] * (an->value[r * D + j] - bn->value[r * D + j]);
        g[r] += acc;
      }
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<Real> out(std::move(shape), std::vector<Real>(x.values().begin(), x.values().end()));
  detail::record(out, {&x}, [xn = x.node(), on = out.node()] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
  });
  return out;
}

// ------------------------------------------------------------ reductions

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  Tensor<Real> out({1}, acc);
  detail::record(out, {&x}, [xn = x.node(), on = out.node()] {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += on->grad[0];
  });
  return out;
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  return scale(sum(x), Real{1} / static_cast<Real>(x.numel()));
}

/// Mean over rows of x[M, N] -> [N].
template <typename Real>
Tensor<Real> column_mean(const Tensor<Real>& x) {
  const std::size_t R = x.rows(), C = x.last_dim();
  Tensor<Real> out({C});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) o[c] += xv[r * C + c];
  }
  const Real inv = Real{1} / static_cast<Real>(R);
  for (auto& v : o) v *= inv;
  detail::record(out, {&x}, [xn = x.node(), on = out.node(), R, C, inv] {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += on->grad[c] * inv;
    }
  });
  return out;
}

/// sum_i x[i] * weights[i] with constant weights.
template <typename Real>
Tensor<Real> dot_constant(const Tensor<Real>& x, std::vector<Real> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("dot_constant: " + std::to_string(weights.size()) + " weights for " +
                         to_string(x.shape()));
  }
  Real acc = 0;
  auto xv = x.values();
  for (std::size_t i = 0; i < weights.size(); ++i) acc += xv[i] * weights[i];
  Tensor<Real> out({1}, acc);
  detail::record(out, {&x}, [xn = x.node(), on = out.node(), w = std::move(weights)] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += on->grad[0] * w[i];
  });
  return out;
}

// -------------------------------------------------------- normalizations

/// Softmax along `axis` with max subtraction.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor<Real> out(s);
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      Real total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const Real e = std::exp(xv[base + i * inner] - mx);
        o[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= total;
    }
  }
  detail::record(out, {&x}, [xn = x.node(), on = out.node(), outer, inner, len] {
    auto& g = xn->ensure_grad();
    const auto& y = on->value;
    const auto& gy = on->grad;
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t b = 0; b < inner; ++b) {
        const std::size_t base = a * len * inner + b;
        Real dot = 0;
        for (std::size_t i = 0; i < len; ++i) dot += gy[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = base + i * inner;
          g[k] += y[k] * (gy[k] - dot);
        }
      }
    }
  });
  return out;
}

/// x / sqrt(mean(x^2) + eps) * gain over the last axis.
template <typename Real>
Tensor<Real> rms_norm(const Tensor<Real>& x, const Tensor<Real>& gain, Real eps = Real(1e-5)) {
  if (gain.rank() != 1 || gain.numel() != x.last_dim()) {
    throw DimensionError("rms_norm: gain " + to_string(gain.shape()) + " for input " + to_string(x.shape()));
  }
  if (!(eps > 0)) throw ContractError("rms_norm: eps must be positive");
  const std::size_t R = x.rows(), D = x.last_dim();
  Tensor<Real> out(x.shape());
  std::vector<Real> inv_rms(R);
  auto o = out.mutable_values();
  auto xv = x.values(), gv = gain.values();
  for (std::size_t r = 0; r < R; ++r) {
    Real ss = 0;
    for (std::size_t j = 0; j < D; ++j) ss += xv[r * D + j] * xv[r * D + j];
    inv_rms[r] = Real{1} / std::sqrt(ss / static_cast<Real>(D) + eps);
    for (std::size_t j = 0; j < D; ++j) o[r * D + j] = xv[r * D + j] * inv_rms[r] * gv[j];
  }
  detail::record(out, {&x, &gain},
                 [xn = x.node(), gn = gain.node(), on = out.node(), R, D, inv = std::move(inv_rms)] {
                   const auto& gy = on->grad;
                   const auto& xv = xn->value;
                   const auto& gv = gn->value;
                   if (xn->requires_grad) {
                     auto& gx = xn->ensure_grad();
                     for (std::size_t r = 0; r < R; ++r) {
                       Real dot = 0;
                       for (std::size_t j = 0; j < D; ++j) dot += gy[r * D + j] * gv[j] * xv[r * D + j];
                       const Real r3 = inv[r] * inv[r] * inv[r] / static_cast<Real>(D);
                       for (std::size_t j = 0; j < D; ++j) {
                         gx[r * D + j] += inv[r] * gv[j] * gy[r * D + j] - xv[r * D + j] * r3 * dot;
                       }
                     }
                   }
                   if (gn->requires_grad) {
                     auto& gg = gn->ensure_grad();
                     for (std::size_t r = 0; r < R; ++r) {
                       for (std::size_t j = 0; j < D; ++j) gg[j] += gy[r * D + j] * xv[r * D + j] * inv[r];
                     }
                   }
                 });
  return out;
}

// ----------------------------------------------------------- row routing

/// Rows idx[i] of x viewed as [rows, last_dim] -> [idx.size(), last_dim].
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::vector<std::size_t> idx) {
  const std::size_t D = x.last_dim(), R = x.rows();
  for (std::size_t i : idx) {
    if (i >= R) throw DimensionError("gather_rows: row " + std::to_string(i) + " of " + to_string(x.shape()));
  }
  if (idx.empty()) throw DimensionError("gather_rows: empty index set");
  Tensor<Real> out({idx.size(), D});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(xv.data() + idx[i] * D, D, o.data() + i * D);
  detail::record(out, {&x}, [xn = x.node(), on = out.node(), D, idx = std::move(idx)] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < D; ++j) g[idx[i] * D + j] += on->grad[i * D + j];
    }
  });
  return out;
}

/// Copy of `base` with src[i, :] added onto row idx[i].
template <typename Real>
Tensor<Real> scatter_add_rows(const Tensor<Real>& base, const Tensor<Real>& src, std::vector<std::size_t> idx) {
  const std::size_t D = base.last_dim(), R = base.rows();
  if (src.last_dim() != D || src.rows() != idx.size()) {
    throw DimensionError("scatter_add_rows: source " + to_string(src.shape()) + " into " +
                         to_string(base.shape()));
  }
  for (std::size_t i : idx) {
    if (i >= R) throw DimensionError("scatter_add_rows: row " + std::to_string(i) + " out of range");
  }
  Tensor<Real> out(base.shape(), std::vector<Real>(base.values().begin(), base.values().end()));
  auto o = out.mutable_values();
  auto sv = src.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < D; ++j) o[idx[i] * D + j] += sv[i * D + j];
  }
  detail::record(out, {&base, &src}, [bn = base.node(), sn = src.node(), on = out.node(), D, idx = std::move(idx)] {
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
    if (sn->requires_grad) {
      auto& g = sn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < D; ++j) g[i * D + j] += on->grad[idx[i] * D + j];
      }
    }
  });
  return out;
}

/// Entries x[rows[i], col] -> [rows.size(), 1].
template <typename Real>
Tensor<Real> select_column(const Tensor<Real>& x, std::vector<std::size_t> rows, std::size_t col) {
  const std::size_t C = x.last_dim();
  if (col >= C) throw DimensionError("select_column: column out of range");
  Tensor<Real> out({rows.size(), 1});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) o[i] = xv[rows[i] * C + col];
  detail::record(out, {&x}, [xn = x.node(), on = out.node(), C, col, rows = std::move(rows)] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i) g[rows[i] * C + col] += on->grad[i];
  });
  return out;
}

/// Renormalizes the masked entries of each probability row to sum to one;
/// unmasked entries become zero.
template <typename Real>
Tensor<Real> renormalize_selected(const Tensor<Real>& probs, std::vector<std::uint8_t> mask) {
  if (mask.size() != probs.numel()) throw DimensionError("renormalize_selected: mask size mismatch");
  const std::size_t R = probs.rows(), C = probs.last_dim();
  Tensor<Real> out(probs.shape());
  std::vector<Real> totals(R);
  auto o = out.mutable_values();
  auto pv = probs.values();
  for (std::size_t r = 0; r < R; ++r) {
    Real total = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (mask[r * C + c]) total += pv[r * C + c];
    }
    totals[r] = total;
    for (std::size_t c = 0; c < C; ++c) o[r * C + c] = mask[r * C + c] ? pv[r * C + c] / total : Real{0};
  }
  detail::record(out, {&probs},
                 [pn = probs.node(), on = out.node(), R, C, mask = std::move(mask), totals = std::move(totals)] {
                   auto& g = pn->ensure_grad();
                   for (std::size_t r = 0; r < R; ++r) {
                     Real dot = 0;
                     for (std::size_t c = 0; c < C; ++c) dot += on->grad[r * C + c] * on->value[r * C + c];
                     for (std::size_t c = 0; c < C; ++c) {
                       if (mask[r * C + c]) g[r * C + c] += (on->grad[r * C + c] - dot) / totals[r];
                     }
                   }
                 });
  return out;
}

// ------------------------------------------------- state aggregation (depth)

/// sum_l p[r, l] * states[l][r, :].
template <typename Real>
Tensor<Real> soft_mix(const Tensor<Real>& p, const std::vector<Tensor<Real>>& states);

/// Straight-through selection: forward copies states[choice[r]][r, :]
/// exactly; backward is that of soft_mix at the same p.
template <typename Real>
Tensor<Real> straight_through_select(const Tensor<Real>& p, const std::vector<Tensor<Real>>& states,
                                     std::vector<std::size_t> choice);

namespace detail {

template <typename Real>
void check_states(const Tensor<Real>& p, const std::vector<Tensor<Real>>& states, const char* op) {
  if (states.empty() || p.last_dim() != states.size()) {
    throw DimensionError(std::string(op) + ": " + std::to_string(states.size()) + " states for weights " +
                         to_string(p.shape()));
  }
  for (const auto& s : states) {
    detail::require_same_shape(states.front(), s, op);
    if (s.rows() != p.rows()) throw DimensionError(std::string(op) + ": row count mismatch");
  }
}

template <typename Real>
void record_mix_backward(Tensor<Real>& out, const Tensor<Real>& p, const std::vector<Tensor<Real>>& states) {
  if (Tape<Real>::active() == nullptr) return;
  bool any = p.requires_grad();
  for (const auto& s : states) any = any || s.requires_grad();
  if (!any) return;
  std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
  for (const auto& s : states) nodes.push_back(s.node());
  const std::size_t R = p.rows(), L = states.size(), D = states.front().last_dim();
  Tape<Real>::active()->record(out, [pn = p.node(), on = out.node(), nodes = std::move(nodes), R, L, D] {
    const auto& go = on->grad;
    if (pn->requires_grad) {
      auto& gp = pn->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t l = 0; l < L; ++l) {
          Real acc = 0;
          for (std::size_t j = 0; j < D; ++j) acc += go[r * D + j] * nodes[l]->value[r * D + j];
          gp[r * L + l] += acc;
        }
      }
    }
    for (std::size_t l = 0; l < L; ++l) {
      if (!nodes[l]->requires_grad) continue;
      auto& gs = nodes[l]->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        const Real w = pn->value[r * L + l];
        for (std::size_t j = 0; j < D; ++j) gs[r * D + j] += w * go[r * D + j];
      }
    }
  });
}

}  // namespace detail

template <typename Real>
Tensor<Real> soft_mix(const Tensor<Real>& p, const std::vector<Tensor<Real>>& states) {
  detail::check_states(p, states, "soft_mix");
  const std::size_t R = p.rows(), L = states.size(), D = states.front().last_dim();
  Tensor<Real> out(states.front().shape());
  auto o = out.mutable_values();
  auto pv = p.values();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t l = 0; l < L; ++l) {
      const Real w = pv[r * L + l];
      auto sv = states[l].values();
      for (std::size_t j = 0; j < D; ++j) o[r * D + j] += w * sv[r * D + j];
    }
  }
  detail::record_mix_backward(out, p, states);
  return out;
}

template <typename Real>
Tensor<Real> straight_through_select(const Tensor<Real>& p, const std::vector<Tensor<Real>>& states,
                                     std::vector<std::size_t> choice) {
  detail::check_states(p, states, "straight_through_select");
  const std::size_t R = p.rows(), D = states.front().last_dim();
  if (choice.size() != R) throw DimensionError("straight_through_select: one choice per row required");
  Tensor<Real> out(states.front().shape());
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < R; ++r) {
    if (choice[r] >= states.size()) throw ContractError("straight_through_select: choice out of range");
    auto sv = states[choice[r]].values();
    std::copy_n(sv.data() + r * D, D, o.data() + r * D);
  }
  detail::record_mix_backward(out, p, states);
  return out;
}

/// sum_l (l + 1) * p[r, l] -> [R, 1], clamped into [1, L] against rounding.
template <typename Real>
Tensor<Real> expected_count(const Tensor<Real>& p) {
  const std::size_t R = p.rows(), L = p.last_dim();
  Tensor<Real> out({R, 1});
  auto o = out.mutable_values();
  auto pv = p.values();
  for (std::size_t r = 0; r < R; ++r) {
    Real acc = 0;
    for (std::size_t l = 0; l < L; ++l) acc += static_cast<Real>(l + 1) * pv[r * L + l];
    o[r] = std::clamp(acc, Real{1}, static_cast<Real>(L));
  }
  detail::record(out, {&p}, [pn = p.node(), on = out.node(), R, L] {
    auto& g = pn->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t l = 0; l < L; ++l) g[r * L + l] += static_cast<Real>(l + 1) * on->grad[r];
    }
  });
  return out;
}

// ----------------------------------------------------- sequence modeling

/// table[ids[i], :] -> reshaped to `shape` + [d].
template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const std::int32_t> ids, Shape shape) {
  const std::size_t V = table.dim(0), D = table.dim(1);
  if (numel(shape) != ids.size()) throw DimensionError("embedding: id count does not match shape");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw ContractError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(V));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  shape.push_back(D);
  return reshape(gather_rows(table, std::move(rows)), std::move(shape));
}

/// x[b, t, :] + pos[t, :].
template <typename Real>
Tensor<Real> add_positions(const Tensor<Real>& x, const Tensor<Real>& pos) {
  if (x.rank() != 3 || pos.rank() != 2 || pos.dim(1) != x.dim(2) || x.dim(1) > pos.dim(0)) {
    throw DimensionError("add_positions: " + to_string(x.shape()) + " with table " + to_string(pos.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  Tensor<Real> out(x.shape());
  auto o = out.mutable_values();
  auto xv = x.values(), pv = pos.values();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < T * D; ++i) o[b * T * D + i] = xv[b * T * D + i] + pv[i];
  }
  detail::record(out, {&x, &pos}, [xn = x.node(), pn = pos.node(), on = out.node(), B, T, D] {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
    if (pn->requires_grad) {
      auto& g = pn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < T * D; ++i) g[i] += on->grad[b * T * D + i];
      }
    }
  });
  return out;
}

/// Multi-head causal attention core softmax(q k^T / sqrt(dh) + mask) v on
/// [B, T, d] projections; heads split the feature axis.
template <typename Real>
Tensor<Real> causal_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                              std::size_t heads) {
  detail::require_same_shape(q, k, "causal_attention");
  detail::require_same_shape(q, v, "causal_attention");
  if (q.rank() != 3) throw DimensionError("causal_attention expects [B,T,d], got " + to_string(q.shape()));
  const std::size_t B = q.dim(0), T = q.dim(1), D = q.dim(2);
  if (heads == 0 || D % heads != 0) throw DimensionError("causal_attention: heads must divide d");
  const std::size_t hd = D / heads;
  const Real inv_sqrt = Real{1} / std::sqrt(static_cast<Real>(hd));
  std::vector<Real> probs(B * heads * T * T, Real{0});
  Tensor<Real> out(q.shape());
  auto o = out.mutable_values();
  auto qv = q.values(), kv = k.values(), vv = v.values();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Real* P = probs.data() + (b * heads + h) * T * T;
      for (std::size_t t = 0; t < T; ++t) {
        const Real* qt = qv.data() + (b * T + t) * D + h * hd;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          const Real* ks = kv.data() + (b * T + s) * D + h * hd;
          Real dot = 0;
          for (std::size_t j = 0; j < hd; ++j) dot += qt[j] * ks[j];
          P[t * T + s] = dot * inv_sqrt;
          mx = std::max(mx, P[t * T + s]);
        }
        Real total = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          P[t * T + s] = std::exp(P[t * T + s] - mx);
          total += P[t * T + s];
        }
        Real* ot = o.data() + (b * T + t) * D + h * hd;
        for (std::size_t s = 0; s <= t; ++s) {
          P[t * T + s] /= total;
          const Real* vs = vv.data() + (b * T + s) * D + h * hd;
          for (std::size_t j = 0; j < hd; ++j) ot[j] += P[t * T + s] * vs[j];
        }
      }
    }
  }
  detail::record(out, {&q, &k, &v},
                 [qn = q.node(), kn = k.node(), vn = v.node(), on = out.node(), probs = std::move(probs), B, T, D,
                  heads, hd, inv_sqrt] {
                   const auto& go = on->grad;
                   auto& gq = qn->ensure_grad();
                   auto& gk = kn->ensure_grad();
                   auto& gv = vn->ensure_grad();
                   std::vector<Real> dP(T);
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t h = 0; h < heads; ++h) {
                       const Real* P = probs.data() + (b * heads + h) * T * T;
                       for (std::size_t t = 0; t < T; ++t) {
                         const std::size_t ro = (b * T + t) * D + h * hd;
                         Real dot = 0;
                         for (std::size_t s = 0; s <= t; ++s) {
                           const std::size_t cs = (b * T + s) * D + h * hd;
                           Real acc = 0;
                           for (std::size_t j = 0; j < hd; ++j) {
                             acc += go[ro + j] * vn->value[cs + j];
                             gv[cs + j] += P[t * T + s] * go[ro + j];
                           }
                           dP[s] = acc;
                           dot += P[t * T + s] * acc;
                         }
                         for (std::size_t s = 0; s <= t; ++s) {
                           const std::size_t cs = (b * T + s) * D + h * hd;
                           const Real dS = P[t * T + s] * (dP[s] - dot) * inv_sqrt;
                           for (std::size_t j = 0; j < hd; ++j) {
                             gq[ro + j] += dS * kn->value[cs + j];
                             gk[cs + j] += dS * qn->value[ro + j];
                           }
                         }
                       }
                     }
                   }
                 });
  return out;
}

/// Mean cross entropy of logits[b, t, :] against tokens[b, t + 1] over all
/// t < T - 1.
template <typename Real>
Tensor<Real> next_token_cross_entropy(const Tensor<Real>& logits, std::span<const std::int32_t> tokens) {
  if (logits.rank() != 3) throw DimensionError("next_token_cross_entropy expects [B,T,V] logits");
  const std::size_t B = logits.dim(0), T = logits.dim(1), V = logits.dim(2);
  if (tokens.size() != B * T) throw DimensionError("next_token_cross_entropy: token count mismatch");
  if (T < 2) throw ContractError("next_token_cross_entropy needs at least two positions");
  for (auto id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw ContractError("target id " + std::to_string(id) + " outside [0, " + std::to_string(V) + ")");
    }
  }
  const std::size_t count = B * (T - 1);
  auto lv = logits.values();
  Real total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const Real* row = lv.data() + (b * T + t) * V;
      const Real mx = *std::max_element(row, row + V);
      Real se = 0;
      for (std::size_t c = 0; c < V; ++c) se += std::exp(row[c] - mx);
      total += mx + std::log(se) - row[tokens[b * T + t + 1]];
    }
  }
  Tensor<Real> out({1}, total / static_cast<Real>(count));
  detail::record(out, {&logits},
                 [ln = logits.node(), on = out.node(), tgt = std::vector<std::int32_t>(tokens.begin(), tokens.end()),
                  B, T, V, count] {
                   auto& g = ln->ensure_grad();
                   const Real w = on->grad[0] / static_cast<Real>(count);
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t t = 0; t + 1 < T; ++t) {
                       const std::size_t base = (b * T + t) * V;
                       const Real* row = ln->value.data() + base;
                       const Real mx = *std::max_element(row, row + V);
                       Real se = 0;
                       for (std::size_t c = 0; c < V; ++c) se += std::exp(row[c] - mx);
                       for (std::size_t c = 0; c < V; ++c) g[base + c] += w * std::exp(row[c] - mx) / se;
                       g[base + tgt[b * T + t + 1]] -= w;
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------- noise

/// Gumbel(0, 1) samples, one draw per element in row-major order.
template <typename Real>
Tensor<Real> gumbel_noise(Rng& rng, Shape shape) {
  Tensor<Real> out(std::move(shape));
  for (auto& v : out.mutable_values()) v = static_cast<Real>(rng.gumbel());
  return out;
}

}  // namespace versatile
