#pragma once

// Differentiable primitives. Every op takes the tape as its first
// argument (nullptr = forward-only), validates shapes, computes the
// result, verifies it is finite, and records an adjoint that adds into
// the parents' gradient accumulators. conv2d / conv_transpose2d are
// im2col + GEMM; their backward passes recompute the im2col buffer
// instead of keeping it alive, trading FLOPs for memory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "jl1/gemm.hpp"
#include "jl1/scratch.hpp"
#include "jl1/tape.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

namespace detail {

template <typename T>
inline void check_finite(const char* op, const TensorT<T>& t) {
  if (!all_finite(t))
    throw numeric_error(std::string(op) + ": non-finite value in output");
}

// Node id of `x` on `tape`; off-tape tensors (including tensors stamped
// by some *other* tape) are registered as constants.
template <typename T>
inline int ensure_node(TapeT<T>& tape, const TensorT<T>& x) {
  if (x.node >= 0 && x.stamp == tape.stamp()) return x.node;
  TensorT<T> copy = x;
  copy.node = -1;
  return tape.watch(copy, /*requires_grad=*/false);
}

// Stores `out` on the tape (when there is one) and returns it with its
// node id attached.
template <typename T>
inline TensorT<T> emit(TapeT<T>* tape, TensorT<T> out, std::vector<int> parents,
                       typename TapeT<T>::BackwardFn back) {
  if (!tape) return out;
  int id = tape->record(out, std::move(parents), std::move(back));
  out.node = id;
  out.stamp = tape->stamp();
  return out;
}

template <typename T>
inline void check_same_shape(const char* op, const TensorT<T>& a,
                             const TensorT<T>& b) {
  if (a.shape != b.shape)
    throw dimension_error(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape).

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("add", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  detail::check_finite("add", out);
  if (!tape) return out;
  int ia = detail::ensure_node(*tape, a), ib = detail::ensure_node(*tape, b);
  return detail::emit(tape, std::move(out), {ia, ib},
                      [ia, ib](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        if (tp.requires_grad(ia)) {
                          auto da = tp.grad_accum(ia);
                          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                        }
                        if (tp.requires_grad(ib)) {
                          auto db = tp.grad_accum(ib);
                          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
                        }
                      });
}

template <typename T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("sub", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  detail::check_finite("sub", out);
  if (!tape) return out;
  int ia = detail::ensure_node(*tape, a), ib = detail::ensure_node(*tape, b);
  return detail::emit(tape, std::move(out), {ia, ib},
                      [ia, ib](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        if (tp.requires_grad(ia)) {
                          auto da = tp.grad_accum(ia);
                          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                        }
                        if (tp.requires_grad(ib)) {
                          auto db = tp.grad_accum(ib);
                          for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
                        }
                      });
}

template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("mul", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  detail::check_finite("mul", out);
  if (!tape) return out;
  int ia = detail::ensure_node(*tape, a), ib = detail::ensure_node(*tape, b);
  return detail::emit(
      tape, std::move(out), {ia, ib}, [ia, ib](TapeT<T>& tp, int self) {
        auto dy = tp.grad_view(self);
        if (tp.requires_grad(ia)) {
          auto da = tp.grad_accum(ia);
          const auto& bv = tp.value(ib);
          for (std::size_t i = 0; i < dy.size(); ++i)
            da[i] += dy[i] * bv[static_cast<std::int64_t>(i)];
        }
        if (tp.requires_grad(ib)) {
          auto db = tp.grad_accum(ib);
          const auto& av = tp.value(ia);
          for (std::size_t i = 0; i < dy.size(); ++i)
            db[i] += dy[i] * av[static_cast<std::int64_t>(i)];
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T c) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = c * x[i];
  detail::check_finite("scale", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix, c](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          dx[i] += c * dy[i];
                      });
}

template <typename T>
TensorT<T> add_scalar(TapeT<T>* tape, const TensorT<T>& x, T c) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + c;
  detail::check_finite("add_scalar", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                      });
}

template <typename T>
TensorT<T> exp(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::exp(x[i]);
  detail::check_finite("exp", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        const auto& y = tp.value(self);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          dx[i] += dy[i] * y[static_cast<std::int64_t>(i)];
                      });
}

template <typename T>
TensorT<T> log(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::log(x[i]);
  detail::check_finite("log", out);  // rejects x <= 0 inputs
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        const auto& xv = tp.value(ix);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          dx[i] += dy[i] / xv[static_cast<std::int64_t>(i)];
                      });
}

template <typename T>
TensorT<T> abs(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::abs(x[i]);
  detail::check_finite("abs", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        const auto& xv = tp.value(ix);
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                          T v = xv[static_cast<std::int64_t>(i)];
                          // subgradient 0 at the kink
                          dx[i] += dy[i] * (v > T(0) ? T(1) : v < T(0) ? T(-1) : T(0));
                        }
                      });
}

// Clamps to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T>
TensorT<T> clamp(TapeT<T>* tape, const TensorT<T>& x, T lo, T hi) {
  if (!(lo < hi)) throw contract_error("clamp: requires lo < hi");
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out[i] = std::min(std::max(x[i], lo), hi);
  detail::check_finite("clamp", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix, lo, hi](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        const auto& xv = tp.value(ix);
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                          T v = xv[static_cast<std::int64_t>(i)];
                          if (v > lo && v < hi) dx[i] += dy[i];
                        }
                      });
}

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = std::max(x[i], T(0));
  detail::check_finite("relu", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        const auto& y = tp.value(self);
                        for (std::size_t i = 0; i < dy.size(); ++i)
                          if (y[static_cast<std::int64_t>(i)] > T(0)) dx[i] += dy[i];
                      });
}

template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    T v = x[i];
    // overflow-stable in both tails
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  detail::check_finite("sigmoid", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        const auto& y = tp.value(self);
                        for (std::size_t i = 0; i < dy.size(); ++i) {
                          T s = y[static_cast<std::int64_t>(i)];
                          dx[i] += dy[i] * s * (T(1) - s);
                        }
                      });
}

// ---------------------------------------------------------------------------
// Shape ops and reductions.

template <typename T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw dimension_error("reshape: " + shape_str(x.shape) + " has " +
                          std::to_string(x.numel()) + " elements, target " +
                          shape_str(new_shape) + " has " +
                          std::to_string(shape_numel(new_shape)));
  TensorT<T> out(std::move(new_shape), x.data);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                      });
}

// Sum of all elements -> shape [1].
template <typename T>
TensorT<T> reduce_sum(TapeT<T>* tape, const TensorT<T>& x) {
  T s = T(0);
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
  TensorT<T> out = TensorT<T>::scalar(s);
  detail::check_finite("reduce_sum", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix](TapeT<T>& tp, int self) {
                        T g = tp.grad_view(self)[0];
                        auto dx = tp.grad_accum(ix);
                        for (auto& v : dx) v += g;
                      });
}

// Sums over all dimensions except the first: [N, ...] -> [N].
template <typename T>
TensorT<T> reduce_sum_rows(TapeT<T>* tape, const TensorT<T>& x) {
  if (x.rank() < 1)
    throw dimension_error("reduce_sum_rows: needs rank >= 1");
  std::int64_t n = x.shape[0];
  std::int64_t cols = n > 0 ? x.numel() / n : 0;
  TensorT<T> out = TensorT<T>::zeros({n});
  for (std::int64_t r = 0; r < n; ++r) {
    T s = T(0);
    for (std::int64_t j = 0; j < cols; ++j) s += x[r * cols + j];
    out[r] = s;
  }
  detail::check_finite("reduce_sum_rows", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix, n, cols](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        for (std::int64_t r = 0; r < n; ++r)
                          for (std::int64_t j = 0; j < cols; ++j)
                            dx[static_cast<std::size_t>(r * cols + j)] += dy[static_cast<std::size_t>(r)];
                      });
}

// x: [N, D], bias: [D]; broadcasts the bias over rows.
template <typename T>
TensorT<T> add_row_bias(TapeT<T>* tape, const TensorT<T>& x,
                        const TensorT<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.shape[1] != b.shape[0])
    throw dimension_error("add_row_bias: expects [N,D] + [D], got " +
                          shape_str(x.shape) + " + " + shape_str(b.shape));
  std::int64_t n = x.shape[0], d = x.shape[1];
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + b[j];
  detail::check_finite("add_row_bias", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x), ib = detail::ensure_node(*tape, b);
  return detail::emit(tape, std::move(out), {ix, ib},
                      [ix, ib, n, d](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        if (tp.requires_grad(ix)) {
                          auto dx = tp.grad_accum(ix);
                          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                        }
                        if (tp.requires_grad(ib)) {
                          auto db = tp.grad_accum(ib);
                          for (std::int64_t r = 0; r < n; ++r)
                            for (std::int64_t j = 0; j < d; ++j)
                              db[static_cast<std::size_t>(j)] +=
                                  dy[static_cast<std::size_t>(r * d + j)];
                        }
                      });
}

// x: [N, C, H, W], bias: [C]; broadcasts over batch and spatial dims.
template <typename T>
TensorT<T> add_channel_bias(TapeT<T>* tape, const TensorT<T>& x,
                            const TensorT<T>& b) {
  if (x.rank() != 4 || b.rank() != 1 || x.shape[1] != b.shape[0])
    throw dimension_error("add_channel_bias: expects [N,C,H,W] + [C], got " +
                          shape_str(x.shape) + " + " + shape_str(b.shape));
  std::int64_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      std::int64_t base = (i * c + ch) * hw;
      T bias = b[ch];
      for (std::int64_t q = 0; q < hw; ++q) out[base + q] = x[base + q] + bias;
    }
  detail::check_finite("add_channel_bias", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x), ib = detail::ensure_node(*tape, b);
  return detail::emit(tape, std::move(out), {ix, ib},
                      [ix, ib, n, c, hw](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        if (tp.requires_grad(ix)) {
                          auto dx = tp.grad_accum(ix);
                          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                        }
                        if (tp.requires_grad(ib)) {
                          auto db = tp.grad_accum(ib);
                          for (std::int64_t i = 0; i < n; ++i)
                            for (std::int64_t ch = 0; ch < c; ++ch) {
                              std::int64_t base = (i * c + ch) * hw;
                              T s = T(0);
                              for (std::int64_t q = 0; q < hw; ++q)
                                s += dy[static_cast<std::size_t>(base + q)];
                              db[static_cast<std::size_t>(ch)] += s;
                            }
                        }
                      });
}

// Repeats each row of x [N, D] `times` times consecutively -> [N*times, D].
// Used to build the z, z+eps*e_0, ..., z+eps*e_{L-1} decode batch while
// keeping the result differentiable w.r.t. z.
template <typename T>
TensorT<T> repeat_rows(TapeT<T>* tape, const TensorT<T>& x, std::int64_t times) {
  if (x.rank() != 2)
    throw dimension_error("repeat_rows: expects [N,D], got " + shape_str(x.shape));
  if (times < 1) throw contract_error("repeat_rows: times must be >= 1");
  const std::int64_t n = x.shape[0], d = x.shape[1];
  TensorT<T> out = TensorT<T>::zeros({n * times, d});
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t t = 0; t < times; ++t)
      std::copy(x.ptr() + r * d, x.ptr() + (r + 1) * d,
                out.ptr() + (r * times + t) * d);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(tape, std::move(out), {ix},
                      [ix, n, d, times](TapeT<T>& tp, int self) {
                        auto dy = tp.grad_view(self);
                        auto dx = tp.grad_accum(ix);
                        for (std::int64_t r = 0; r < n; ++r)
                          for (std::int64_t t = 0; t < times; ++t) {
                            const T* g = dy.data() + (r * times + t) * d;
                            T* acc = dx.data() + r * d;
                            for (std::int64_t j = 0; j < d; ++j) acc[j] += g[j];
                          }
                      });
}

// ---------------------------------------------------------------------------
// matmul: [M, K] x [K, N] -> [M, N].

template <typename T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw dimension_error("matmul: incompatible shapes " + shape_str(a.shape) +
                          " x " + shape_str(b.shape));
  std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  TensorT<T> out = TensorT<T>::zeros({m, n});
  gemm<T>(false, false, m, n, k, a.ptr(), b.ptr(), T(0), out.ptr());
  detail::check_finite("matmul", out);
  if (!tape) return out;
  int ia = detail::ensure_node(*tape, a), ib = detail::ensure_node(*tape, b);
  return detail::emit(
      tape, std::move(out), {ia, ib}, [ia, ib, m, k, n](TapeT<T>& tp, int self) {
        auto dy = tp.grad_view(self);
        if (tp.requires_grad(ia)) {
          auto da = tp.grad_accum(ia);
          // dA += dY * B^T
          gemm<T>(false, true, m, k, n, dy.data(), tp.value(ib).ptr(), T(1),
                  da.data());
        }
        if (tp.requires_grad(ib)) {
          auto db = tp.grad_accum(ib);
          // dB += A^T * dY
          gemm<T>(true, false, k, n, m, tp.value(ia).ptr(), dy.data(), T(1),
                  db.data());
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW). conv2d kernel layout: [C_out, C_in, kH, kW];
// conv_transpose2d kernel layout: [C_in, C_out, kH, kW].

struct ConvDims {
  std::int64_t n, c_in, h, w;      // input
  std::int64_t c_out, kh, kw;      // kernel
  std::int64_t stride, pad;
  std::int64_t ho, wo;             // output
};

namespace detail {

// Indices i in [0, lim_i) whose tap i*stride - pad + kpos lands inside
// [0, lim_o). The in-range test is loop-invariant per kernel tap, so the
// inner loops below run branch-free over [lo, hi]. Empty when lo > hi.
inline std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t kpos,
                                                       std::int64_t stride,
                                                       std::int64_t pad,
                                                       std::int64_t lim_i,
                                                       std::int64_t lim_o) {
  const std::int64_t shift = pad - kpos;
  std::int64_t lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  lo = std::min(lo, lim_i);
  const std::int64_t top = lim_o - 1 + shift;
  const std::int64_t hi = top < 0 ? -1 : std::min(lim_i - 1, top / stride);
  return {lo, hi};
}

// col is (c_in*kh*kw) x (n*ho*wo), row-major. Zero-padded taps become 0.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::int64_t q = d.ho * d.wo, nq = d.n * q;
  for (std::int64_t ci = 0; ci < d.c_in; ++ci)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        T* row = col + ((ci * d.kh + ky) * d.kw + kx) * nq;
        const auto [oy_lo, oy_hi] = tap_range(ky, d.stride, d.pad, d.ho, d.h);
        const auto [ox_lo, ox_hi] = tap_range(kx, d.stride, d.pad, d.wo, d.w);
        for (std::int64_t b = 0; b < d.n; ++b) {
          const T* xc = x + (b * d.c_in + ci) * d.h * d.w;
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            T* out = row + b * q + oy * d.wo;
            if (oy < oy_lo || oy > oy_hi || ox_lo > ox_hi) {
              std::fill(out, out + d.wo, T(0));
              continue;
            }
            const T* xr = xc + (oy * d.stride - d.pad + ky) * d.w;
            std::fill(out, out + ox_lo, T(0));
            for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
              out[ox] = xr[ox * d.stride - d.pad + kx];
            std::fill(out + ox_hi + 1, out + d.wo, T(0));
          }
        }
      }
}

// Adjoint of im2col: scatter-adds col entries back onto the image grid.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* x) {
  const std::int64_t q = d.ho * d.wo, nq = d.n * q;
  for (std::int64_t ci = 0; ci < d.c_in; ++ci)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        const T* row = col + ((ci * d.kh + ky) * d.kw + kx) * nq;
        const auto [oy_lo, oy_hi] = tap_range(ky, d.stride, d.pad, d.ho, d.h);
        const auto [ox_lo, ox_hi] = tap_range(kx, d.stride, d.pad, d.wo, d.w);
        if (ox_lo > ox_hi) continue;
        for (std::int64_t b = 0; b < d.n; ++b) {
          T* xc = x + (b * d.c_in + ci) * d.h * d.w;
          for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
            const T* in = row + b * q + oy * d.wo;
            T* xr = xc + (oy * d.stride - d.pad + ky) * d.w;
            for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
              xr[ox * d.stride - d.pad + kx] += in[ox];
          }
        }
      }
}

// coly is (c_out*kh*kw) x (n*h*w); scatter-adds every kernel tap onto the
// upsampled (ho x wo) grid. `out` must arrive zeroed.
template <typename T>
void scatter_taps_add(const T* coly, std::int64_t n, std::int64_t c_out,
                      std::int64_t h, std::int64_t w, std::int64_t ho,
                      std::int64_t wo, std::int64_t kh, std::int64_t kw,
                      std::int64_t stride, std::int64_t pad, T* out) {
  const std::int64_t hw = h * w, nhw = n * hw;
  for (std::int64_t co = 0; co < c_out; ++co)
    for (std::int64_t ky = 0; ky < kh; ++ky)
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        const T* row = coly + ((co * kh + ky) * kw + kx) * nhw;
        const auto [iy_lo, iy_hi] = tap_range(ky, stride, pad, h, ho);
        const auto [ix_lo, ix_hi] = tap_range(kx, stride, pad, w, wo);
        if (ix_lo > ix_hi) continue;
        for (std::int64_t b = 0; b < n; ++b) {
          T* yc = out + (b * c_out + co) * ho * wo;
          for (std::int64_t iy = iy_lo; iy <= iy_hi; ++iy) {
            const T* in = row + b * hw + iy * w;
            T* yr = yc + (iy * stride - pad + ky) * wo;
            for (std::int64_t ix2 = ix_lo; ix2 <= ix_hi; ++ix2)
              yr[ix2 * stride - pad + kx] += in[ix2];
          }
        }
      }
}

// Adjoint gather: dcoly[(co,ky,kx), (b,iy,ix)] = dy[b, co, iy*s-p+ky,
// ix*s-p+kx], zero where the tap misses the output. Overwrites dcoly.
template <typename T>
void gather_taps(const T* dy, std::int64_t n, std::int64_t c_out,
                 std::int64_t h, std::int64_t w, std::int64_t ho,
                 std::int64_t wo, std::int64_t kh, std::int64_t kw,
                 std::int64_t stride, std::int64_t pad, T* dcoly) {
  const std::int64_t hw = h * w, nhw = n * hw;
  for (std::int64_t co = 0; co < c_out; ++co)
    for (std::int64_t ky = 0; ky < kh; ++ky)
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        T* row = dcoly + ((co * kh + ky) * kw + kx) * nhw;
        const auto [iy_lo, iy_hi] = tap_range(ky, stride, pad, h, ho);
        const auto [ix_lo, ix_hi] = tap_range(kx, stride, pad, w, wo);
        for (std::int64_t b = 0; b < n; ++b) {
          const T* dyc = dy + (b * c_out + co) * ho * wo;
          for (std::int64_t iy = 0; iy < h; ++iy) {
            T* out_row = row + b * hw + iy * w;
            if (iy < iy_lo || iy > iy_hi || ix_lo > ix_hi) {
              std::fill(out_row, out_row + w, T(0));
              continue;
            }
            const T* dyr = dyc + (iy * stride - pad + ky) * wo;
            std::fill(out_row, out_row + ix_lo, T(0));
            for (std::int64_t ix2 = ix_lo; ix2 <= ix_hi; ++ix2)
              out_row[ix2] = dyr[ix2 * stride - pad + kx];
            std::fill(out_row + ix_hi + 1, out_row + w, T(0));
          }
        }
      }
}

// k [Ci, Co, kh, kw] -> k2 [(co*kh + ky)*kw + kx, ci].
template <typename T>
void pack_convt_kernel(const T* k, std::int64_t c_in, std::int64_t c_out,
                       std::int64_t khw, T* k2) {
  for (std::int64_t ci = 0; ci < c_in; ++ci)
    for (std::int64_t co = 0; co < c_out; ++co)
      for (std::int64_t t = 0; t < khw; ++t)
        k2[(co * khw + t) * c_in + ci] = k[(ci * c_out + co) * khw + t];
}

// [c_out, n*q] (GEMM result) -> [n, c_out, q] (NCHW batch layout).
template <typename T>
void split_batch_cols(const T* y0, std::int64_t n, std::int64_t c_out,
                      std::int64_t q, T* y) {
  for (std::int64_t co = 0; co < c_out; ++co)
    for (std::int64_t b = 0; b < n; ++b)
      std::copy(y0 + co * n * q + b * q, y0 + co * n * q + (b + 1) * q,
                y + (b * c_out + co) * q);
}

// Inverse of split_batch_cols.
template <typename T>
void merge_batch_cols(const T* y, std::int64_t n, std::int64_t c_out,
                      std::int64_t q, T* y0) {
  for (std::int64_t co = 0; co < c_out; ++co)
    for (std::int64_t b = 0; b < n; ++b)
      std::copy(y + (b * c_out + co) * q, y + (b * c_out + co + 1) * q,
                y0 + co * n * q + b * q);
}

inline ConvDims conv2d_dims(const Shape& xs, const Shape& ks,
                            std::int64_t stride, std::int64_t pad) {
  if (xs.size() != 4 || ks.size() != 4)
    throw dimension_error("conv2d: expects x [N,C,H,W], kernel [Co,Ci,kh,kw]");
  if (ks[1] != xs[1])
    throw dimension_error("conv2d: kernel expects " + std::to_string(ks[1]) +
                          " input channels, input has " + std::to_string(xs[1]));
  if (stride < 1 || pad < 0)
    throw contract_error("conv2d: stride must be >= 1 and pad >= 0");
  ConvDims d{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, pad, 0, 0};
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw dimension_error("conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& k,
                  std::int64_t stride, std::int64_t pad) {
  ConvDims d = detail::conv2d_dims(x.shape, k.shape, stride, pad);
  const std::int64_t rows = d.c_in * d.kh * d.kw, nq = d.n * d.ho * d.wo;
  auto col = detail::scratch<T>(0, static_cast<std::size_t>(rows * nq));
  detail::im2col(x.ptr(), d, col.data());
  auto y0 = detail::scratch<T>(1, static_cast<std::size_t>(d.c_out * nq));
  gemm<T>(false, false, d.c_out, nq, rows, k.ptr(), col.data(), T(0), y0.data());
  TensorT<T> out = TensorT<T>::zeros({d.n, d.c_out, d.ho, d.wo});
  detail::split_batch_cols(y0.data(), d.n, d.c_out, d.ho * d.wo, out.ptr());
  detail::check_finite("conv2d", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x), ik = detail::ensure_node(*tape, k);
  return detail::emit(
      tape, std::move(out), {ix, ik}, [ix, ik, d](TapeT<T>& tp, int self) {
        const std::int64_t rows = d.c_in * d.kh * d.kw;
        const std::int64_t q = d.ho * d.wo, nq = d.n * q;
        auto dy = tp.grad_view(self);
        auto dy0 = detail::scratch<T>(1, static_cast<std::size_t>(d.c_out * nq));
        detail::merge_batch_cols(dy.data(), d.n, d.c_out, q, dy0.data());
        if (tp.requires_grad(ik)) {
          // dK += dY0 * col^T  (im2col recomputed from the saved input)
          auto col = detail::scratch<T>(0, static_cast<std::size_t>(rows * nq));
          detail::im2col(tp.value(ix).ptr(), d, col.data());
          auto dk = tp.grad_accum(ik);
          gemm<T>(false, true, d.c_out, rows, nq, dy0.data(), col.data(), T(1),
                  dk.data());
        }
        if (tp.requires_grad(ix)) {
          // dcol = K^T * dY0, then scatter back onto the image grid
          auto dcol = detail::scratch<T>(2, static_cast<std::size_t>(rows * nq));
          gemm<T>(true, false, rows, nq, d.c_out, tp.value(ik).ptr(),
                  dy0.data(), T(0), dcol.data());
          auto dx = tp.grad_accum(ix);
          detail::col2im_add(dcol.data(), d, dx.data());
        }
      });
}

// Transposed convolution; the adjoint of conv2d's spatial mapping.
// Output size: (H-1)*stride - 2*pad + kH + out_pad.
template <typename T>
TensorT<T> conv_transpose2d(TapeT<T>* tape, const TensorT<T>& x,
                            const TensorT<T>& k, std::int64_t stride,
                            std::int64_t pad, std::int64_t out_pad = 0) {
  const Shape& xs = x.shape;
  const Shape& ks = k.shape;
  if (xs.size() != 4 || ks.size() != 4)
    throw dimension_error(
        "conv_transpose2d: expects x [N,C,H,W], kernel [Ci,Co,kh,kw]");
  if (ks[0] != xs[1])
    throw dimension_error("conv_transpose2d: kernel expects " +
                          std::to_string(ks[0]) + " input channels, input has " +
                          std::to_string(xs[1]));
  if (stride < 1 || pad < 0 || out_pad < 0 || out_pad >= stride)
    throw contract_error(
        "conv_transpose2d: needs stride >= 1, pad >= 0, 0 <= out_pad < stride");
  const std::int64_t n = xs[0], c_in = xs[1], h = xs[2], w = xs[3];
  const std::int64_t c_out = ks[1], kh = ks[2], kw = ks[3];
  const std::int64_t ho = (h - 1) * stride - 2 * pad + kh + out_pad;
  const std::int64_t wo = (w - 1) * stride - 2 * pad + kw + out_pad;
  if (ho < 1 || wo < 1)
    throw dimension_error("conv_transpose2d: empty output");

  const std::int64_t hw = h * w, nhw = n * hw, rows = c_out * kh * kw;

  // xf[ci, b*hw + q] = x[b, ci, q]
  auto xf = detail::scratch<T>(0, static_cast<std::size_t>(c_in * nhw));
  detail::merge_batch_cols(x.ptr(), n, c_in, hw, xf.data());
  // K2[(co*kh+ky)*kw+kx, ci] = k[ci, co, ky, kx]
  auto k2 = detail::scratch<T>(1, static_cast<std::size_t>(rows * c_in));
  detail::pack_convt_kernel(k.ptr(), c_in, c_out, kh * kw, k2.data());

  auto coly = detail::scratch<T>(2, static_cast<std::size_t>(rows * nhw));
  gemm<T>(false, false, rows, nhw, c_in, k2.data(), xf.data(), T(0),
          coly.data());

  TensorT<T> out = TensorT<T>::zeros({n, c_out, ho, wo});
  detail::scatter_taps_add(coly.data(), n, c_out, h, w, ho, wo, kh, kw, stride,
                           pad, out.ptr());
  detail::check_finite("conv_transpose2d", out);
  if (!tape) return out;
  int ixn = detail::ensure_node(*tape, x), ik = detail::ensure_node(*tape, k);
  return detail::emit(
      tape, std::move(out), {ixn, ik},
      [ixn, ik, n, c_in, c_out, h, w, ho, wo, kh, kw, stride,
       pad](TapeT<T>& tp, int self) {
        const std::int64_t hw = h * w, nhw = n * hw, rows = c_out * kh * kw;
        auto dy = tp.grad_view(self);
        // dcoly[(co,ky,kx), (b,iy,ix)] = dy[b, co, iy*s-p+ky, ix*s-p+kx]
        auto dcoly = detail::scratch<T>(4, static_cast<std::size_t>(rows * nhw));
        detail::gather_taps(dy.data(), n, c_out, h, w, ho, wo, kh, kw, stride,
                            pad, dcoly.data());
        if (tp.requires_grad(ik)) {
          // dK2 = dcoly * xf^T, permuted back to [Ci,Co,kh,kw]
          auto xf = detail::scratch<T>(0, static_cast<std::size_t>(c_in * nhw));
          detail::merge_batch_cols(tp.value(ixn).ptr(), n, c_in, hw, xf.data());
          auto dk2 = detail::scratch<T>(5, static_cast<std::size_t>(rows * c_in));
          gemm<T>(false, true, rows, c_in, nhw, dcoly.data(), xf.data(), T(0),
                  dk2.data());
          auto dk = tp.grad_accum(ik);
          for (std::int64_t ci = 0; ci < c_in; ++ci)
            for (std::int64_t co = 0; co < c_out; ++co)
              for (std::int64_t t = 0; t < kh * kw; ++t)
                dk[static_cast<std::size_t>((ci * c_out + co) * kh * kw + t)] +=
                    dk2[static_cast<std::size_t>((co * kh * kw + t) * c_in + ci)];
        }
        if (tp.requires_grad(ixn)) {
          // dxf = K2^T * dcoly, accumulated back in NCHW order
          auto k2 = detail::scratch<T>(1, static_cast<std::size_t>(rows * c_in));
          detail::pack_convt_kernel(tp.value(ik).ptr(), c_in, c_out, kh * kw,
                                    k2.data());
          auto dxf = detail::scratch<T>(0, static_cast<std::size_t>(c_in * nhw));
          gemm<T>(true, false, c_in, nhw, rows, k2.data(), dcoly.data(), T(0),
                  dxf.data());
          auto dx = tp.grad_accum(ixn);
          for (std::int64_t ci = 0; ci < c_in; ++ci)
            for (std::int64_t b = 0; b < n; ++b) {
              const T* src = dxf.data() + ci * nhw + b * hw;
              T* dst = dx.data() + (b * c_in + ci) * hw;
              for (std::int64_t q = 0; q < hw; ++q) dst[q] += src[q];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Fused convolution blocks: conv (or transposed conv) + channel bias +
// activation as a single tape node. Arithmetic per element is identical
// to the unfused chain; fusing exists purely so the multi-megabyte
// activations on the decode path stop being allocated, scanned, and
// copied three times per layer.

enum class Act { none, relu, sigmoid };

namespace detail {

template <typename T>
void bias_act_inplace(T* y, std::int64_t n, std::int64_t c, std::int64_t hw,
                      const T* bias, Act act) {
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T* yc = y + (b * c + ch) * hw;
      const T bv = bias[ch];
      switch (act) {
        case Act::none:
          for (std::int64_t q = 0; q < hw; ++q) yc[q] += bv;
          break;
        case Act::relu:
          for (std::int64_t q = 0; q < hw; ++q)
            yc[q] = std::max(yc[q] + bv, T(0));
          break;
        case Act::sigmoid:
          for (std::int64_t q = 0; q < hw; ++q) {
            T v = yc[q] + bv;
            if (v >= T(0)) {
              yc[q] = T(1) / (T(1) + std::exp(-v));
            } else {
              T e = std::exp(v);
              yc[q] = e / (T(1) + e);
            }
          }
          break;
      }
    }
}

// dpre = dy * act'(pre), recoverable from the recorded output alone.
template <typename T>
void act_backward(const T* dy, const T* y, std::size_t sz, Act act, T* dpre) {
  switch (act) {
    case Act::none:
      std::copy(dy, dy + sz, dpre);
      break;
    case Act::relu:
      for (std::size_t i = 0; i < sz; ++i) dpre[i] = y[i] > T(0) ? dy[i] : T(0);
      break;
    case Act::sigmoid:
      for (std::size_t i = 0; i < sz; ++i)
        dpre[i] = dy[i] * y[i] * (T(1) - y[i]);
      break;
  }
}

template <typename T>
void bias_grad_add(const T* dpre, std::int64_t n, std::int64_t c,
                   std::int64_t hw, std::span<T> db) {
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* g = dpre + (b * c + ch) * hw;
      T s = T(0);
      for (std::int64_t q = 0; q < hw; ++q) s += g[q];
      db[static_cast<std::size_t>(ch)] += s;
    }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d_block(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& k,
                        const TensorT<T>& b, std::int64_t stride,
                        std::int64_t pad, Act act) {
  ConvDims d = detail::conv2d_dims(x.shape, k.shape, stride, pad);
  if (b.rank() != 1 || b.shape[0] != d.c_out)
    throw dimension_error("conv2d_block: bias expects [" +
                          std::to_string(d.c_out) + "], got " +
                          shape_str(b.shape));
  const std::int64_t rows = d.c_in * d.kh * d.kw, q = d.ho * d.wo, nq = d.n * q;
  auto col = detail::scratch<T>(0, static_cast<std::size_t>(rows * nq));
  detail::im2col(x.ptr(), d, col.data());
  auto y0 = detail::scratch<T>(1, static_cast<std::size_t>(d.c_out * nq));
  gemm<T>(false, false, d.c_out, nq, rows, k.ptr(), col.data(), T(0), y0.data());
  TensorT<T> out = TensorT<T>::zeros({d.n, d.c_out, d.ho, d.wo});
  detail::split_batch_cols(y0.data(), d.n, d.c_out, q, out.ptr());
  detail::bias_act_inplace(out.ptr(), d.n, d.c_out, q, b.ptr(), act);
  detail::check_finite("conv2d_block", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x), ik = detail::ensure_node(*tape, k),
      ib = detail::ensure_node(*tape, b);
  return detail::emit(
      tape, std::move(out), {ix, ik, ib},
      [ix, ik, ib, d, act](TapeT<T>& tp, int self) {
        const std::int64_t rows = d.c_in * d.kh * d.kw;
        const std::int64_t q = d.ho * d.wo, nq = d.n * q;
        auto dy = tp.grad_view(self);
        auto dpre = detail::scratch<T>(3, dy.size());
        detail::act_backward(dy.data(), tp.value(self).ptr(), dy.size(), act,
                             dpre.data());
        if (tp.requires_grad(ib))
          detail::bias_grad_add(dpre.data(), d.n, d.c_out, q,
                                tp.grad_accum(ib));
        auto dy0 = detail::scratch<T>(1, static_cast<std::size_t>(d.c_out * nq));
        detail::merge_batch_cols(dpre.data(), d.n, d.c_out, q, dy0.data());
        if (tp.requires_grad(ik)) {
          auto col = detail::scratch<T>(0, static_cast<std::size_t>(rows * nq));
          detail::im2col(tp.value(ix).ptr(), d, col.data());
          gemm<T>(false, true, d.c_out, rows, nq, dy0.data(), col.data(), T(1),
                  tp.grad_accum(ik).data());
        }
        if (tp.requires_grad(ix)) {
          auto dcol = detail::scratch<T>(2, static_cast<std::size_t>(rows * nq));
          gemm<T>(true, false, rows, nq, d.c_out, tp.value(ik).ptr(),
                  dy0.data(), T(0), dcol.data());
          auto dx = tp.grad_accum(ix);
          detail::col2im_add(dcol.data(), d, dx.data());
        }
      });
}

template <typename T>
TensorT<T> conv_transpose2d_block(TapeT<T>* tape, const TensorT<T>& x,
                                  const TensorT<T>& k, const TensorT<T>& b,
                                  std::int64_t stride, std::int64_t pad,
                                  std::int64_t out_pad, Act act) {
  const Shape& xs = x.shape;
  const Shape& ks = k.shape;
  if (xs.size() != 4 || ks.size() != 4)
    throw dimension_error(
        "conv_transpose2d_block: expects x [N,C,H,W], kernel [Ci,Co,kh,kw]");
  if (ks[0] != xs[1])
    throw dimension_error("conv_transpose2d_block: kernel expects " +
                          std::to_string(ks[0]) + " input channels, input has " +
                          std::to_string(xs[1]));
  if (stride < 1 || pad < 0 || out_pad < 0 || out_pad >= stride)
    throw contract_error(
        "conv_transpose2d_block: needs stride >= 1, pad >= 0, 0 <= out_pad < "
        "stride");
  const std::int64_t n = xs[0], c_in = xs[1], h = xs[2], w = xs[3];
  const std::int64_t c_out = ks[1], kh = ks[2], kw = ks[3];
  if (b.rank() != 1 || b.shape[0] != c_out)
    throw dimension_error("conv_transpose2d_block: bias expects [" +
                          std::to_string(c_out) + "], got " +
                          shape_str(b.shape));
  const std::int64_t ho = (h - 1) * stride - 2 * pad + kh + out_pad;
  const std::int64_t wo = (w - 1) * stride - 2 * pad + kw + out_pad;
  if (ho < 1 || wo < 1)
    throw dimension_error("conv_transpose2d_block: empty output");
  const std::int64_t hw = h * w, nhw = n * hw, rows = c_out * kh * kw;

  auto xf = detail::scratch<T>(0, static_cast<std::size_t>(c_in * nhw));
  detail::merge_batch_cols(x.ptr(), n, c_in, hw, xf.data());
  auto k2 = detail::scratch<T>(1, static_cast<std::size_t>(rows * c_in));
  detail::pack_convt_kernel(k.ptr(), c_in, c_out, kh * kw, k2.data());
  auto coly = detail::scratch<T>(2, static_cast<std::size_t>(rows * nhw));
  gemm<T>(false, false, rows, nhw, c_in, k2.data(), xf.data(), T(0),
          coly.data());
  TensorT<T> out = TensorT<T>::zeros({n, c_out, ho, wo});
  detail::scatter_taps_add(coly.data(), n, c_out, h, w, ho, wo, kh, kw, stride,
                           pad, out.ptr());
  detail::bias_act_inplace(out.ptr(), n, c_out, ho * wo, b.ptr(), act);
  detail::check_finite("conv_transpose2d_block", out);
  if (!tape) return out;
  int ixn = detail::ensure_node(*tape, x), ik = detail::ensure_node(*tape, k),
      ib = detail::ensure_node(*tape, b);
  return detail::emit(
      tape, std::move(out), {ixn, ik, ib},
      [ixn, ik, ib, n, c_in, c_out, h, w, ho, wo, kh, kw, stride, pad,
       act](TapeT<T>& tp, int self) {
        const std::int64_t hw = h * w, nhw = n * hw, rows = c_out * kh * kw;
        auto dy = tp.grad_view(self);
        auto dpre = detail::scratch<T>(3, dy.size());
        detail::act_backward(dy.data(), tp.value(self).ptr(), dy.size(), act,
                             dpre.data());
        if (tp.requires_grad(ib))
          detail::bias_grad_add(dpre.data(), n, c_out, ho * wo,
                                tp.grad_accum(ib));
        auto dcoly = detail::scratch<T>(4, static_cast<std::size_t>(rows * nhw));
        detail::gather_taps(dpre.data(), n, c_out, h, w, ho, wo, kh, kw, stride,
                            pad, dcoly.data());
        if (tp.requires_grad(ik)) {
          auto xf = detail::scratch<T>(0, static_cast<std::size_t>(c_in * nhw));
          detail::merge_batch_cols(tp.value(ixn).ptr(), n, c_in, hw, xf.data());
          auto dk2 = detail::scratch<T>(5, static_cast<std::size_t>(rows * c_in));
          gemm<T>(false, true, rows, c_in, nhw, dcoly.data(), xf.data(), T(0),
                  dk2.data());
          auto dk = tp.grad_accum(ik);
          for (std::int64_t ci = 0; ci < c_in; ++ci)
            for (std::int64_t co = 0; co < c_out; ++co)
              for (std::int64_t t = 0; t < kh * kw; ++t)
                dk[static_cast<std::size_t>((ci * c_out + co) * kh * kw + t)] +=
                    dk2[static_cast<std::size_t>((co * kh * kw + t) * c_in + ci)];
        }
        if (tp.requires_grad(ixn)) {
          auto k2 = detail::scratch<T>(1, static_cast<std::size_t>(rows * c_in));
          detail::pack_convt_kernel(tp.value(ik).ptr(), c_in, c_out, kh * kw,
                                    k2.data());
          auto dxf = detail::scratch<T>(0, static_cast<std::size_t>(c_in * nhw));
          gemm<T>(true, false, c_in, nhw, rows, k2.data(), dcoly.data(), T(0),
                  dxf.data());
          auto dx = tp.grad_accum(ixn);
          for (std::int64_t ci = 0; ci < c_in; ++ci)
            for (std::int64_t b2 = 0; b2 < n; ++b2) {
              const T* src = dxf.data() + ci * nhw + b2 * hw;
              T* dst = dx.data() + (b2 * c_in + ci) * hw;
              for (std::int64_t q = 0; q < hw; ++q) dst[q] += src[q];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference Jacobian columns.
//
// x holds decoder outputs flattened to [N*(L+1), P]: for each of N base
// latents, the decode of z followed by the decodes of z + eps*e_i for
// i = 0..L-1. Returns [N, L*P] with column i of sample n at
// out[n, i*P : (i+1)*P] = (x[base+1+i] - x[base]) / eps. Differentiable:
// gradient flows to both the perturbed and the base rows.

template <typename T>
TensorT<T> fd_columns(TapeT<T>* tape, const TensorT<T>& x, std::int64_t latents,
                      T eps) {
  if (x.rank() != 2)
    throw dimension_error("fd_columns: expects [N*(L+1), P], got " +
                          shape_str(x.shape));
  if (latents < 1) throw contract_error("fd_columns: latents must be >= 1");
  if (!(eps > T(0))) throw contract_error("fd_columns: eps must be positive");
  const std::int64_t group = latents + 1;
  if (x.shape[0] % group != 0)
    throw dimension_error("fd_columns: row count " + std::to_string(x.shape[0]) +
                          " not divisible by latents+1 = " +
                          std::to_string(group));
  const std::int64_t n = x.shape[0] / group, p = x.shape[1];
  const T inv_eps = T(1) / eps;
  TensorT<T> out = TensorT<T>::zeros({n, latents * p});
  for (std::int64_t b = 0; b < n; ++b) {
    const T* base = x.ptr() + b * group * p;
    for (std::int64_t i = 0; i < latents; ++i) {
      const T* pert = base + (1 + i) * p;
      T* o = out.ptr() + b * latents * p + i * p;
      for (std::int64_t j = 0; j < p; ++j) o[j] = (pert[j] - base[j]) * inv_eps;
    }
  }
  detail::check_finite("fd_columns", out);
  if (!tape) return out;
  int ix = detail::ensure_node(*tape, x);
  return detail::emit(
      tape, std::move(out), {ix},
      [ix, n, latents, p, inv_eps](TapeT<T>& tp, int self) {
        auto dy = tp.grad_view(self);
        auto dx = tp.grad_accum(ix);
        const std::int64_t group = latents + 1;
        for (std::int64_t b = 0; b < n; ++b) {
          T* dbase = dx.data() + b * group * p;
          for (std::int64_t i = 0; i < latents; ++i) {
            T* dpert = dbase + (1 + i) * p;
            const T* g = dy.data() + b * latents * p + i * p;
            for (std::int64_t j = 0; j < p; ++j) {
              T v = g[j] * inv_eps;
              dpert[j] += v;
              dbase[j] -= v;
            }
          }
        }
      });
}

// Same columns with the base decode supplied separately: base [N, P]
// holds g(z) (typically shared with the reconstruction term, saving one
// decode in L+1) and pert [N*L, P] holds the decodes of z + eps*e_i,
// grouped per sample. Gradient flows into both tensors.
template <typename T>
TensorT<T> fd_columns_from_base(TapeT<T>* tape, const TensorT<T>& base,
                                const TensorT<T>& pert, T eps) {
  if (base.rank() != 2 || pert.rank() != 2)
    throw dimension_error("fd_columns_from_base: expects base [N,P] and pert "
                          "[N*L,P], got " +
                          shape_str(base.shape) + " and " +
                          shape_str(pert.shape));
  if (base.shape[1] != pert.shape[1])
    throw dimension_error("fd_columns_from_base: width mismatch, base " +
                          shape_str(base.shape) + " vs pert " +
                          shape_str(pert.shape));
  if (!(eps > T(0)))
    throw contract_error("fd_columns_from_base: eps must be positive");
  const std::int64_t n = base.shape[0], p = base.shape[1];
  if (n < 1 || pert.shape[0] < 1 || pert.shape[0] % n != 0)
    throw dimension_error(
        "fd_columns_from_base: pert rows must be a positive multiple of base "
        "rows");
  const std::int64_t latents = pert.shape[0] / n;
  const T inv_eps = T(1) / eps;
  TensorT<T> out = TensorT<T>::zeros({n, latents * p});
  for (std::int64_t b = 0; b < n; ++b) {
    const T* base_row = base.ptr() + b * p;
    for (std::int64_t i = 0; i < latents; ++i) {
      const T* pert_row = pert.ptr() + (b * latents + i) * p;
      T* o = out.ptr() + b * latents * p + i * p;
      for (std::int64_t j = 0; j < p; ++j)
        o[j] = (pert_row[j] - base_row[j]) * inv_eps;
    }
  }
  detail::check_finite("fd_columns_from_base", out);
  if (!tape) return out;
  int ibase = detail::ensure_node(*tape, base),
      ipert = detail::ensure_node(*tape, pert);
  return detail::emit(
      tape, std::move(out), {ibase, ipert},
      [ibase, ipert, n, latents, p, inv_eps](TapeT<T>& tp, int self) {
        auto dy = tp.grad_view(self);
        const bool want_base = tp.requires_grad(ibase);
        const bool want_pert = tp.requires_grad(ipert);
        auto dbase_all = want_base ? tp.grad_accum(ibase) : std::span<T>();
        auto dpert_all = want_pert ? tp.grad_accum(ipert) : std::span<T>();
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t i = 0; i < latents; ++i) {
            const T* g = dy.data() + b * latents * p + i * p;
            if (want_pert) {
              T* dpert = dpert_all.data() + (b * latents + i) * p;
              for (std::int64_t j = 0; j < p; ++j) dpert[j] += g[j] * inv_eps;
            }
            if (want_base) {
              T* dbase = dbase_all.data() + b * p;
              for (std::int64_t j = 0; j < p; ++j) dbase[j] -= g[j] * inv_eps;
            }
          }
        }
      });
}

}  // namespace jl1
