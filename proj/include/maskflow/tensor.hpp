#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "maskflow/rng.hpp"

namespace maskflow {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ", ";
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + to_string(shape));
  }
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// Dense row-major array. Value semantics: copies own their storage.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T{0}); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T{1}); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    BasicTensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    BasicTensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return !shape_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  std::int64_t dim(int axis) const {
    const int n = static_cast<int>(shape_.size());
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) throw ShapeError("axis out of range for shape " + to_string(shape_));
    return shape_[static_cast<std::size_t>(axis)];
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  BasicTensor reshaped(Shape shape) const {
    check_shape(shape);
    if (shape_numel(shape) != numel()) shape_mismatch("reshape", shape_, shape);
    BasicTensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> d(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(d));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) shape_mismatch("max_abs_diff", a.shape(), b.shape());
  T m{0};
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Trailing-dimension broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op = "broadcast") {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) shape_mismatch(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed over the dimensions of `out`, zero where `in` broadcasts.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + off] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

// Visits every output element with the matching flat offsets into both inputs.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::size_t n = out.size();
  const std::int64_t total = shape_numel(out);
  if (n == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(n, 0);
  std::int64_t ia = 0, ib = 0;
  const std::int64_t inner = out[n - 1];
  const std::int64_t ia_step = sa[n - 1], ib_step = sb[n - 1];
  for (std::int64_t o = 0; o < total; o += inner) {
    std::int64_t a = ia, b = ib;
    for (std::int64_t k = 0; k < inner; ++k, a += ia_step, b += ib_step) f(o + k, a, b);
    for (std::size_t d = n - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace maskflow
