#pragma once

// Differentiable primitives over BasicTape. Every forward records exactly one
// node whose backward rule accumulates into the inputs' gradient buffers.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "maskflow/blas.hpp"
#include "maskflow/tape.hpp"

namespace maskflow {

namespace detail {

template <typename T>
BasicTape<T>& same_tape(const BasicVar<T>& a, const BasicVar<T>& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return a.tape();
}

inline int norm_axis(int axis, std::size_t ndim) {
  const int n = static_cast<int>(ndim);
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return axis;
}

// Accumulates `g` (shaped like `out`) into `dst` (shaped like `in`), summing
// over broadcast dimensions.
template <typename T>
void reduce_broadcast(const BasicTensor<T>& g, const Shape& in, BasicTensor<T>& dst, T sign = T{1}) {
  const Shape& out = g.shape();
  T* d = dst.ptr();
  const T* gp = g.ptr();
  if (in == out) {
    for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += sign * gp[i];
    return;
  }
  const std::int64_t nin = shape_numel(in);
  if (nin == 1) {
    T s{0};
    for (std::int64_t i = 0; i < g.numel(); ++i) s += gp[i];
    d[0] += sign * s;
    return;
  }
  const auto si = broadcast_strides(in, out);
  const std::vector<std::int64_t> zero(out.size(), 0);
  for_each_broadcast(out, si, zero, [&](std::int64_t o, std::int64_t i, std::int64_t) { d[i] += sign * gp[o]; });
}

enum class BinOp { add, sub, mul };

template <typename T>
BasicVar<T> binary(const BasicVar<T>& a, const BasicVar<T>& b, BinOp op, const char* name) {
  auto& tape = same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  const Shape out_shape = A.shape() == B.shape() ? A.shape() : broadcast_shapes(A.shape(), B.shape(), name);
  BasicTensor<T> out(out_shape);
  T* o = out.ptr();
  auto apply = [op](T x, T y) {
    switch (op) {
      case BinOp::add: return x + y;
      case BinOp::sub: return x - y;
      default: return x * y;
    }
  };
  const T* pa = A.ptr();
  const T* pb = B.ptr();
  const std::int64_t n = out.numel();
  if (A.shape() == out_shape && B.shape() == out_shape) {
    for (std::int64_t i = 0; i < n; ++i) o[i] = apply(pa[i], pb[i]);
  } else if (A.shape() == out_shape && B.numel() == 1) {
    for (std::int64_t i = 0; i < n; ++i) o[i] = apply(pa[i], pb[0]);
  } else if (A.shape() == out_shape && B.shape().size() <= out_shape.size() &&
             std::equal(B.shape().begin(), B.shape().end(), out_shape.end() - B.shape().size())) {
    const std::int64_t nb = B.numel();
    for (std::int64_t i = 0; i < n; i += nb)
      for (std::int64_t j = 0; j < nb; ++j) o[i + j] = apply(pa[i + j], pb[j]);
  } else {
    const auto sa = broadcast_strides(A.shape(), out_shape);
    const auto sb = broadcast_strides(B.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { o[i] = apply(pa[ia], pb[ib]); });
  }
  return tape.record(std::move(out), {a.id(), b.id()}, [op](BasicTape<T>& tp, int self) {
    const auto& g = tp.grad(self);
    const int ia = tp.inputs(self)[0];
    const int ib = tp.inputs(self)[1];
    const Shape& sa = tp.value(ia).shape();
    const Shape& sb = tp.value(ib).shape();
    if (op != BinOp::mul) {
      if (auto* ga = tp.grad_buffer(ia)) reduce_broadcast(g, sa, *ga);
      if (auto* gb = tp.grad_buffer(ib)) reduce_broadcast(g, sb, *gb, op == BinOp::sub ? T{-1} : T{1});
      return;
    }
    const Shape& out_shape = g.shape();
    const auto stra = broadcast_strides(sa, out_shape);
    const auto strb = broadcast_strides(sb, out_shape);
    const T* gp = g.ptr();
    const T* va = tp.value(ia).ptr();
    const T* vb = tp.value(ib).ptr();
    if (auto* ga = tp.grad_buffer(ia)) {
      T* d = ga->ptr();
      if (sa == out_shape && sb == out_shape) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += gp[i] * vb[i];
      } else {
        for_each_broadcast(out_shape, stra, strb,
                           [&](std::int64_t o, std::int64_t i, std::int64_t j) { d[i] += gp[o] * vb[j]; });
      }
    }
    if (auto* gb = tp.grad_buffer(ib)) {
      T* d = gb->ptr();
      if (sa == out_shape && sb == out_shape) {
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += gp[i] * va[i];
      } else {
        for_each_broadcast(out_shape, stra, strb,
                           [&](std::int64_t o, std::int64_t i, std::int64_t j) { d[j] += gp[o] * va[i]; });
      }
    }
  });
}

// Elementwise map with derivative dy/dx expressed through (x, y).
template <typename T, typename F, typename D>
BasicVar<T> unary(const BasicVar<T>& a, F f, D dfdx) {
  const auto& A = a.value();
  BasicTensor<T> out(A.shape());
  const T* pa = A.ptr();
  T* o = out.ptr();
  for (std::int64_t i = 0; i < A.numel(); ++i) o[i] = f(pa[i]);
  return a.tape().record(std::move(out), {a.id()}, [dfdx](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    auto* ga = tp.grad_buffer(ia);
    if (!ga) return;
    const T* g = tp.grad(self).ptr();
    const T* x = tp.value(ia).ptr();
    const T* y = tp.value(self).ptr();
    T* d = ga->ptr();
    for (std::int64_t i = 0; i < ga->numel(); ++i) d[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace detail

template <typename T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  return detail::binary(a, b, detail::BinOp::add, "add");
}
template <typename T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
  return detail::binary(a, b, detail::BinOp::sub, "sub");
}
template <typename T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  return detail::binary(a, b, detail::BinOp::mul, "mul");
}
template <typename T>
BasicVar<T> operator+(const BasicVar<T>& a, const BasicVar<T>& b) { return add(a, b); }
template <typename T>
BasicVar<T> operator-(const BasicVar<T>& a, const BasicVar<T>& b) { return sub(a, b); }
template <typename T>
BasicVar<T> operator*(const BasicVar<T>& a, const BasicVar<T>& b) { return mul(a, b); }

template <typename T>
BasicVar<T> scale(const BasicVar<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}
template <typename T>
BasicVar<T> add_scalar(const BasicVar<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}
template <typename T>
BasicVar<T> neg(const BasicVar<T>& a) { return scale(a, T{-1}); }

template <typename T>
BasicVar<T> sigmoid(const BasicVar<T>& a) {
  return detail::unary(
      a, [](T x) { return x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x)); },
      [](T, T y) { return y * (T{1} - y); });
}
template <typename T>
BasicVar<T> silu(const BasicVar<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        const T s = x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
        return x * s;
      },
      [](T x, T) {
        const T s = x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
        return s * (T{1} + x * (T{1} - s));
      });
}
template <typename T>
BasicVar<T> tanh(const BasicVar<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}
template <typename T>
BasicVar<T> exp(const BasicVar<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <typename T>
BasicVar<T> log(const BasicVar<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}
template <typename T>
BasicVar<T> square(const BasicVar<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

template <typename T>
BasicVar<T> broadcast_to(const BasicVar<T>& a, const Shape& shape) {
  const Shape out_shape = broadcast_shapes(a.shape(), shape, "broadcast_to");
  if (out_shape != shape) shape_mismatch("broadcast_to", a.shape(), shape);
  BasicTensor<T> out(shape);
  const T* pa = a.value().ptr();
  T* o = out.ptr();
  const auto sa = broadcast_strides(a.shape(), shape);
  const std::vector<std::int64_t> zero(shape.size(), 0);
  for_each_broadcast(shape, sa, zero, [&](std::int64_t i, std::int64_t j, std::int64_t) { o[i] = pa[j]; });
  return a.tape().record(std::move(out), {a.id()}, [](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    if (auto* ga = tp.grad_buffer(ia)) detail::reduce_broadcast(tp.grad(self), tp.value(ia).shape(), *ga);
  });
}

// a [..., K] x b [K, N] -> [..., N]
template <typename T>
BasicVar<T> matmul(const BasicVar<T>& a, const BasicVar<T>& b) {
  auto& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (B.ndim() != 2 || A.dim(-1) != B.dim(0)) shape_mismatch("matmul", A.shape(), B.shape());
  const std::int64_t k = B.dim(0), n = B.dim(1), m = A.numel() / k;
  Shape out_shape = A.shape();
  out_shape.back() = n;
  BasicTensor<T> out(out_shape);
  blas::gemm<T>(false, false, m, n, k, T{1}, A.ptr(), B.ptr(), T{0}, out.ptr());
  return tape.record(std::move(out), {a.id(), b.id()}, [m, n, k](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    const int ib = tp.inputs(self)[1];
    const T* g = tp.grad(self).ptr();
    if (auto* ga = tp.grad_buffer(ia)) blas::gemm<T>(false, true, m, k, n, T{1}, g, tp.value(ib).ptr(), T{1}, ga->ptr());
    if (auto* gb = tp.grad_buffer(ib)) blas::gemm<T>(true, false, k, n, m, T{1}, tp.value(ia).ptr(), g, T{1}, gb->ptr());
  });
}

// Batched product over identical leading dimensions: op(a) [..., M, K] x op(b) [..., K, N].
template <typename T>
BasicVar<T> bmm(const BasicVar<T>& a, const BasicVar<T>& b, bool trans_a = false, bool trans_b = false) {
  auto& tape = detail::same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.ndim() < 2 || A.ndim() != B.ndim() ||
      !std::equal(A.shape().begin(), A.shape().end() - 2, B.shape().begin()))
    shape_mismatch("bmm", A.shape(), B.shape());
  const std::int64_t m = trans_a ? A.dim(-1) : A.dim(-2);
  const std::int64_t k = trans_a ? A.dim(-2) : A.dim(-1);
  const std::int64_t kb = trans_b ? B.dim(-1) : B.dim(-2);
  const std::int64_t n = trans_b ? B.dim(-2) : B.dim(-1);
  if (k != kb) shape_mismatch("bmm", A.shape(), B.shape());
  const std::int64_t batch = A.numel() / (m * k);
  Shape out_shape = A.shape();
  out_shape[out_shape.size() - 2] = m;
  out_shape.back() = n;
  BasicTensor<T> out(out_shape);
  for (std::int64_t i = 0; i < batch; ++i)
    blas::gemm<T>(trans_a, trans_b, m, n, k, T{1}, A.ptr() + i * m * k, B.ptr() + i * k * n, T{0},
                  out.ptr() + i * m * n);
  return tape.record(std::move(out), {a.id(), b.id()}, [=](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    const int ib = tp.inputs(self)[1];
    const T* g = tp.grad(self).ptr();
    const T* pa = tp.value(ia).ptr();
    const T* pb = tp.value(ib).ptr();
    if (auto* ga = tp.grad_buffer(ia)) {
      for (std::int64_t i = 0; i < batch; ++i) {
        const T* gi = g + i * m * n;
        const T* bi = pb + i * k * n;
        T* di = ga->ptr() + i * m * k;
        if (!trans_a) {
          blas::gemm<T>(false, !trans_b, m, k, n, T{1}, gi, bi, T{1}, di);  // dC op(B)^T
        } else {
          blas::gemm<T>(trans_b, true, k, m, n, T{1}, bi, gi, T{1}, di);  // op(B) dC^T
        }
      }
    }
    if (auto* gb = tp.grad_buffer(ib)) {
      for (std::int64_t i = 0; i < batch; ++i) {
        const T* gi = g + i * m * n;
        const T* ai = pa + i * m * k;
        T* di = gb->ptr() + i * k * n;
        if (!trans_b) {
          blas::gemm<T>(!trans_a, false, k, n, m, T{1}, ai, gi, T{1}, di);  // op(A)^T dC
        } else {
          blas::gemm<T>(true, trans_a, n, k, m, T{1}, gi, ai, T{1}, di);  // dC^T op(A)
        }
      }
    }
  });
}

template <typename T>
BasicVar<T> reshape(const BasicVar<T>& a, Shape shape) {
  auto out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a.id()}, [](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    if (auto* ga = tp.grad_buffer(ia)) {
      const auto& g = tp.grad(self);
      T* d = ga->ptr();
      for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
  });
}

namespace detail {

// Copies `src` into `dst` with dims rearranged: dst dim i = src dim perm[i].
// With accumulate, adds `src` laid out as the permuted tensor back into `dst`
// laid out as the original (inverse direction).
template <typename T>
void permute_copy(const T* src, const Shape& src_shape, const std::vector<int>& perm, T* dst) {
  const std::size_t n = src_shape.size();
  std::vector<std::int64_t> src_strides(n);
  std::int64_t s = 1;
  for (std::size_t i = n; i-- > 0;) {
    src_strides[i] = s;
    s *= src_shape[i];
  }
  Shape out_shape(n);
  std::vector<std::int64_t> strides(n);
  for (std::size_t i = 0; i < n; ++i) {
    out_shape[i] = src_shape[static_cast<std::size_t>(perm[i])];
    strides[i] = src_strides[static_cast<std::size_t>(perm[i])];
  }
  const std::vector<std::int64_t> zero(n, 0);
  for_each_broadcast(out_shape, strides, zero, [&](std::int64_t o, std::int64_t i, std::int64_t) { dst[o] = src[i]; });
}

}  // namespace detail

template <typename T>
BasicVar<T> permute(const BasicVar<T>& a, std::vector<int> perm) {
  const auto& A = a.value();
  if (perm.size() != A.ndim()) throw ShapeError("permute: rank mismatch for shape " + to_string(A.shape()));
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const int p = perm[i];
    if (p < 0 || p >= static_cast<int>(perm.size()) || seen[static_cast<std::size_t>(p)])
      throw ShapeError("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
    out_shape[i] = A.shape()[static_cast<std::size_t>(p)];
  }
  BasicTensor<T> out(out_shape);
  detail::permute_copy(A.ptr(), A.shape(), perm, out.ptr());
  return a.tape().record(std::move(out), {a.id()}, [perm](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    auto* ga = tp.grad_buffer(ia);
    if (!ga) return;
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    const auto& g = tp.grad(self);
    BasicTensor<T> back(ga->shape());
    detail::permute_copy(g.ptr(), g.shape(), inv, back.ptr());
    T* d = ga->ptr();
    for (std::int64_t i = 0; i < back.numel(); ++i) d[i] += back[i];
  });
}

template <typename T>
BasicVar<T> slice(const BasicVar<T>& a, int axis, std::int64_t start, std::int64_t length) {
  const auto& A = a.value();
  axis = detail::norm_axis(axis, A.ndim());
  const auto ax = static_cast<std::size_t>(axis);
  if (start < 0 || length <= 0 || start + length > A.shape()[ax])
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for shape " + to_string(A.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= A.shape()[i];
  for (std::size_t i = ax + 1; i < A.ndim(); ++i) inner *= A.shape()[i];
  const std::int64_t full = A.shape()[ax];
  Shape out_shape = A.shape();
  out_shape[ax] = length;
  BasicTensor<T> out(out_shape);
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(A.ptr() + (o * full + start) * inner, length * inner, out.ptr() + o * length * inner);
  return a.tape().record(std::move(out), {a.id()}, [=](BasicTape<T>& tp, int self) {
    const int ia = tp.inputs(self)[0];
    auto* ga = tp.grad_buffer(ia);
    if (!ga) return;
    const T* g = tp.grad(self).ptr();
    T* d = ga->ptr();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < length * inner; ++i) d[(o * full + start) * inner + i] += g[o * length * inner + i];
  });
}

template <typename T>
BasicVar<T> concat(const std::vector<BasicVar<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  auto& tape = parts[0].tape();
  const Shape& first = parts[0].shape();
  axis = detail::norm_axis(axis, first.size());
  const auto ax = static_cast<std::size_t>(axis);
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<int> ids;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw std::invalid_argument("concat: operands on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) shape_mismatch("concat", first, s);
    out_shape[ax] += s[ax];
    ids.push_back(p.id());
    widths.push_back(s[ax]);
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  const std::int64_t total = out_shape[ax];
  BasicTensor<T> out(out_shape);
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().ptr();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k] * inner, widths[k] * inner, out.ptr() + (o * total + offset) * inner);
    offset += widths[k];
  }
  return tape.record(std::move(out), ids, [=](BasicTape<T>& tp, int self) {
    const T* g = tp.grad(self).ptr();
    std::int64_t off = 0;
    const auto& in = tp.inputs(self);
    for (std::size_t k = 0; k < in.size(); ++k) {
      if (auto* gk = tp.grad_buffer(in[k])) {
        T* d = gk->ptr();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < widths[k] * inner; ++i) d[o * widths[k] * inner + i] += g[(o * total + off) * inner + i];
      }
      off += widths[k];
    }
  });
}

// Rows of `table` [V, ...] selected by `rows`; result [rows.size(), ...].
template <typename T>
BasicVar<T> gather_rows(const BasicVar<T>& table, std::vector<std::int64_t> rows) {
  const auto& A = table.value();
  const std::int64_t v = A.dim(0);
  const std::int64_t width = A.numel() / v;
  Shape out_shape = A.shape();
  out_shape[0] = static_cast<std::int64_t>(rows.size());
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  BasicTensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= v)
      throw std::out_of_range("gather_rows: index " + std::to_string(rows[r]) + " outside [0, " + std::to_string(v) + ")");
    std::copy_n(A.ptr() + rows[r] * width, width, out.ptr() + static_cast<std::int64_t>(r) * width);
  }
  return table.tape().record(std::move(out), {table.id()}, [rows, width](BasicTape<T>& tp, int self) {
    auto* ga = tp.grad_buffer(tp.inputs(self)[0]);
    if (!ga) return;
    const T* g = tp.grad(self).ptr();
    T* d = ga->ptr();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::int64_t i = 0; i < width; ++i) d[rows[r] * width + i] += g[static_cast<std::int64_t>(r) * width + i];
  });
}

template <typename T>
BasicVar<T> sum(const BasicVar<T>& a) {
  T s{0};
  for (T x : a.value().data()) s += x;
  return a.tape().record(BasicTensor<T>::scalar(s), {a.id()}, [](BasicTape<T>& tp, int self) {
    if (auto* ga = tp.grad_buffer(tp.inputs(self)[0])) {
      const T g = tp.grad(self)[0];
      for (auto& d : ga->data()) d += g;
    }
  });
}

template <typename T>
BasicVar<T> mean(const BasicVar<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().numel()));
}

// Sum over the last axis: [..., n] -> [..., 1].
template <typename T>
BasicVar<T> sum_last(const BasicVar<T>& a) {
  const auto& A = a.value();
  const std::int64_t n = A.dim(-1), rows = A.numel() / n;
  Shape out_shape = A.shape();
  out_shape.back() = 1;
  BasicTensor<T> out(out_shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::int64_t j = 0; j < n; ++j) s += A[static_cast<std::size_t>(r * n + j)];
    out[static_cast<std::size_t>(r)] = s;
  }
  return a.tape().record(std::move(out), {a.id()}, [n, rows](BasicTape<T>& tp, int self) {
    auto* ga = tp.grad_buffer(tp.inputs(self)[0]);
    if (!ga) return;
    const auto& g = tp.grad(self);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < n; ++j) (*ga)[static_cast<std::size_t>(r * n + j)] += g[static_cast<std::size_t>(r)];
  });
}

template <typename T>
BasicVar<T> mean_last(const BasicVar<T>& a) {
  return scale(sum_last(a), T{1} / static_cast<T>(a.value().dim(-1)));
}

template <typename T>
BasicVar<T> softmax_last(const BasicVar<T>& a) {
  const auto& A = a.value();
  const std::int64_t n = A.dim(-1), rows = A.numel() / n;
  BasicTensor<T> out(A.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = A.ptr() + r * n;
    T* y = out.ptr() + r * n;
    const T mx = *std::max_element(x, x + n);
    T z{0};
    for (std::int64_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) y[j] /= z;
  }
  return a.tape().record(std::move(out), {a.id()}, [n, rows](BasicTape<T>& tp, int self) {
    auto* ga = tp.grad_buffer(tp.inputs(self)[0]);
    if (!ga) return;
    const T* g = tp.grad(self).ptr();
    const T* y = tp.value(self).ptr();
    T* d = ga->ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::int64_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::int64_t j = 0; j < n; ++j) d[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

// Normalizes the last axis to zero mean and unit variance (no affine terms).
template <typename T>
BasicVar<T> layer_norm(const BasicVar<T>& a, T eps = T(1e-6)) {
  const auto& A = a.value();
  const std::int64_t n = A.dim(-1), rows = A.numel() / n;
  BasicTensor<T> out(A.shape());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = A.ptr() + r * n;
    T mu{0};
    for (std::int64_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::int64_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = (x[j] - mu) * rs;
  }
  return a.tape().record(std::move(out), {a.id()}, [n, rows, rstd](BasicTape<T>& tp, int self) {
    auto* ga = tp.grad_buffer(tp.inputs(self)[0]);
    if (!ga) return;
    const T* g = tp.grad(self).ptr();
    const T* y = tp.value(self).ptr();
    T* d = ga->ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
      T mg{0}, mgy{0};
      for (std::int64_t j = 0; j < n; ++j) {
        mg += g[r * n + j];
        mgy += g[r * n + j] * y[r * n + j];
      }
      mg /= static_cast<T>(n);
      mgy /= static_cast<T>(n);
      const T rs = (*rstd)[static_cast<std::size_t>(r)];
      for (std::int64_t j = 0; j < n; ++j) d[r * n + j] += rs * (g[r * n + j] - mg - y[r * n + j] * mgy);
    }
  });
}

// 2-D convolution over NHWC input with an HWIO kernel [k, k, Cin, Cout];
// zero padding of k/2 on each side.
template <typename T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& w, int stride = 1) {
  auto& tape = detail::same_tape(x, w);
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.ndim() != 4 || W.ndim() != 4 || W.dim(0) != W.dim(1) || W.dim(2) != X.dim(3) || (stride != 1 && stride != 2))
    shape_mismatch("conv2d", X.shape(), W.shape());
  const std::int64_t b = X.dim(0), h = X.dim(1), wd = X.dim(2), c = X.dim(3);
  const std::int64_t k = W.dim(0), co = W.dim(3), pad = k / 2;
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const std::int64_t rows = b * ho * wo, cols_w = k * k * c;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * cols_w), T{0});
  T* cp = cols->data();
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        T* row = cp + ((n * ho + oy) * wo + ox) * cols_w;
        for (std::int64_t ky = 0; ky < k; ++ky) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t kx = 0; kx < k; ++kx) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            std::copy_n(X.ptr() + ((n * h + iy) * wd + ix) * c, c, row + (ky * k + kx) * c);
          }
        }
      }
  BasicTensor<T> out(Shape{b, ho, wo, co});
  blas::gemm<T>(false, false, rows, co, cols_w, T{1}, cp, W.ptr(), T{0}, out.ptr());
  return tape.record(std::move(out), {x.id(), w.id()}, [=](BasicTape<T>& tp, int self) {
    const int ix_id = tp.inputs(self)[0];
    const int iw_id = tp.inputs(self)[1];
    const T* g = tp.grad(self).ptr();
    if (auto* gw = tp.grad_buffer(iw_id)) blas::gemm<T>(true, false, cols_w, co, rows, T{1}, cols->data(), g, T{1}, gw->ptr());
    if (auto* gx = tp.grad_buffer(ix_id)) {
      std::vector<T> dcols(static_cast<std::size_t>(rows * cols_w));
      blas::gemm<T>(false, true, rows, cols_w, co, T{1}, g, tp.value(iw_id).ptr(), T{0}, dcols.data());
      T* d = gx->ptr();
      for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t oy = 0; oy < ho; ++oy)
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const T* row = dcols.data() + ((n * ho + oy) * wo + ox) * cols_w;
            for (std::int64_t ky = 0; ky < k; ++ky) {
              const std::int64_t iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t ixx = ox * stride - pad + kx;
                if (ixx < 0 || ixx >= wd) continue;
                T* dst = d + ((n * h + iy) * wd + ixx) * c;
                const T* src = row + (ky * k + kx) * c;
                for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
              }
            }
          }
    }
  });
}

// Nearest-neighbour 2x upsampling of NHWC input.
template <typename T>
BasicVar<T> upsample2x(const BasicVar<T>& x) {
  const auto& X = x.value();
  if (X.ndim() != 4) throw ShapeError("upsample2x expects NHWC, got " + to_string(X.shape()));
  const std::int64_t b = X.dim(0), h = X.dim(1), w = X.dim(2), c = X.dim(3);
  BasicTensor<T> out(Shape{b, 2 * h, 2 * w, c});
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t xx = 0; xx < 2 * w; ++xx)
        std::copy_n(X.ptr() + ((n * h + y / 2) * w + xx / 2) * c, c, out.ptr() + ((n * 2 * h + y) * 2 * w + xx) * c);
  return x.tape().record(std::move(out), {x.id()}, [=](BasicTape<T>& tp, int self) {
    auto* gx = tp.grad_buffer(tp.inputs(self)[0]);
    if (!gx) return;
    const T* g = tp.grad(self).ptr();
    T* d = gx->ptr();
    for (std::int64_t n = 0; n < b; ++n)
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
          T* dst = d + ((n * h + y / 2) * w + xx / 2) * c;
          const T* src = g + ((n * 2 * h + y) * 2 * w + xx) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
  });
}

// Mean squared error over all elements.
template <typename T>
BasicVar<T> mse_loss(const BasicVar<T>& pred, const BasicVar<T>& target) {
  auto& tape = detail::same_tape(pred, target);
  const auto& P = pred.value();
  const auto& Q = target.value();
  if (P.shape() != Q.shape()) shape_mismatch("mse_loss", P.shape(), Q.shape());
  T s{0};
  for (std::int64_t i = 0; i < P.numel(); ++i) {
    const T d = P[static_cast<std::size_t>(i)] - Q[static_cast<std::size_t>(i)];
    s += d * d;
  }
  const std::int64_t n = P.numel();
  return tape.record(BasicTensor<T>::scalar(s / static_cast<T>(n)), {pred.id(), target.id()}, [n](BasicTape<T>& tp, int self) {
    const int ip = tp.inputs(self)[0];
    const int iq = tp.inputs(self)[1];
    const T g = tp.grad(self)[0] * T{2} / static_cast<T>(n);
    const T* p = tp.value(ip).ptr();
    const T* q = tp.value(iq).ptr();
    if (auto* gp = tp.grad_buffer(ip))
      for (std::int64_t i = 0; i < n; ++i) (*gp)[static_cast<std::size_t>(i)] += g * (p[i] - q[i]);
    if (auto* gq = tp.grad_buffer(iq))
      for (std::int64_t i = 0; i < n; ++i) (*gq)[static_cast<std::size_t>(i)] -= g * (p[i] - q[i]);
  });
}

// Mean binary cross-entropy of logits against {0,1} targets, numerically stable.
template <typename T>
BasicVar<T> bce_with_logits(const BasicVar<T>& logits, const BasicTensor<T>& targets) {
  const auto& Z = logits.value();
  if (Z.shape() != targets.shape()) shape_mismatch("bce_with_logits", Z.shape(), targets.shape());
  const std::int64_t n = Z.numel();
  T s{0};
  for (std::int64_t i = 0; i < n; ++i) {
    const T z = Z[static_cast<std::size_t>(i)];
    const T y = targets[static_cast<std::size_t>(i)];
    s += std::max(z, T{0}) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return logits.tape().record(BasicTensor<T>::scalar(s / static_cast<T>(n)), {logits.id()},
                              [n, targets](BasicTape<T>& tp, int self) {
                                auto* gz = tp.grad_buffer(tp.inputs(self)[0]);
                                if (!gz) return;
                                const T g = tp.grad(self)[0] / static_cast<T>(n);
                                const T* z = tp.value(tp.inputs(self)[0]).ptr();
                                for (std::int64_t i = 0; i < n; ++i) {
                                  const T sg = z[i] >= 0 ? T{1} / (T{1} + std::exp(-z[i])) : std::exp(z[i]) / (T{1} + std::exp(z[i]));
                                  (*gz)[static_cast<std::size_t>(i)] += g * (sg - targets[static_cast<std::size_t>(i)]);
                                }
                              });
}

// NHWC pixel unshuffle: [B, H, W, C] -> [B, H/r, W/r, r*r*C].
template <typename T>
BasicVar<T> space_to_depth(const BasicVar<T>& x, int r) {
  const auto& s = x.shape();
  if (s.size() != 4 || r < 1 || s[1] % r != 0 || s[2] % r != 0)
    throw ShapeError("space_to_depth: " + to_string(s) + " not divisible by " + std::to_string(r));
  const std::int64_t b = s[0], h = s[1] / r, w = s[2] / r, c = s[3];
  const auto v = reshape(x, {b, h, r, w, r, c});
  return reshape(permute(v, {0, 1, 3, 2, 4, 5}), {b, h, w, r * r * c});
}

// Inverse of space_to_depth: [B, h, w, r*r*C] -> [B, h*r, w*r, C].
template <typename T>
BasicVar<T> depth_to_space(const BasicVar<T>& x, int r) {
  const auto& s = x.shape();
  if (s.size() != 4 || r < 1 || s[3] % (r * r) != 0)
    throw ShapeError("depth_to_space: channels of " + to_string(s) + " not divisible by " + std::to_string(r * r));
  const std::int64_t b = s[0], h = s[1], w = s[2], c = s[3] / (r * r);
  const auto v = reshape(x, {b, h, w, r, r, c});
  return reshape(permute(v, {0, 1, 3, 2, 4, 5}), {b, h * r, w * r, c});
}

}  // namespace maskflow
