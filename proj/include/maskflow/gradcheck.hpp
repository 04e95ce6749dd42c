#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "maskflow/ops.hpp"

namespace maskflow {

// Max over coordinates of |autodiff - central difference| / (|central difference| + 1e-8).
// Instantiate with double for meaningful tolerances below 1e-4.
template <typename T>
double grad_check(const std::function<BasicVar<T>(const BasicVar<T>&)>& f, const BasicTensor<T>& x, double step) {
  if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");
  auto eval = [&](const BasicTensor<T>& at) {
    BasicTape<T> tape;
    auto y = f(tape.leaf(at, false));
    if (y.value().numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    return static_cast<double>(y.value()[0]);
  };
  BasicTape<T> tape;
  auto xv = tape.leaf(x, true);
  auto y = f(xv);
  if (y.value().numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  tape.backward(y);
  const BasicTensor<T> analytic = tape.grad(xv);
  double worst = 0.0;
  BasicTensor<T> probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    probe[idx] = static_cast<T>(x[idx] + step);
    const double up = eval(probe);
    probe[idx] = static_cast<T>(x[idx] - step);
    const double down = eval(probe);
    probe[idx] = x[idx];
    const double fd = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(static_cast<double>(analytic[idx]) - fd) / (std::abs(fd) + 1e-8));
  }
  return worst;
}

// Same check over every coordinate of every trainable parameter in a store.
// `loss` builds the scalar on the given tape from the store's current values.
// `floor` replaces 1e-8 in the denominator; raise it for losses whose
// magnitude makes central-difference roundoff exceed 1e-10.
template <typename T>
double grad_check_params(const std::function<BasicVar<T>(BasicTape<T>&)>& loss, BasicParamStore<T>& store,
                         double step, double floor = 1e-8) {
  store.zero_grad();
  {
    BasicTape<T> tape;
    auto y = loss(tape);
    if (y.value().numel() != 1) throw ShapeError("grad_check_params: loss is not scalar");
    tape.backward(y);
  }
  auto eval = [&] {
    BasicTape<T> tape;
    return static_cast<double>(loss(tape).value()[0]);
  };
  double worst = 0.0;
  for (auto& [name, p] : store) {
    if (!p.requires_grad) continue;
    for (std::int64_t i = 0; i < p.value.numel(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      const T orig = p.value[idx];
      p.value[idx] = static_cast<T>(orig + step);
      const double up = eval();
      p.value[idx] = static_cast<T>(orig - step);
      const double down = eval();
      p.value[idx] = orig;
      const double fd = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(static_cast<double>(p.grad[idx]) - fd) / (std::abs(fd) + floor));
    }
  }
  return worst;
}

// One differentiable primitive wrapped into a scalar function of x and an
// auxiliary constant c.
struct PrimitiveCase {
  const char* name;
  Shape shape;
  Shape aux;
  std::function<BasicVar<double>(const BasicVar<double>&, const BasicVar<double>&)> fn;
};

inline const std::vector<PrimitiveCase>& primitive_cases() {
  using DVar = BasicVar<double>;
  using DTensor = BasicTensor<double>;
  static const std::vector<PrimitiveCase> cases = {
      {"add", {3, 4}, {3, 4}, [](const DVar& x, const DVar& c) { return sum(mul(add(x, c), x)); }},
      {"sub_bcast", {3, 4}, {3, 4}, [](const DVar& x, const DVar& c) { return sum(square(sub(x, slice(x, 0, 1, 1)) + c)); }},
      {"mul_bcast", {3, 4}, {3, 4}, [](const DVar& x, const DVar& c) { return sum(mul(x, slice(x, 1, 0, 1)) * c); }},
      {"scale", {5}, {5}, [](const DVar& x, const DVar& c) { return sum(mul(scale(x, 2.5), c)); }},
      {"matmul", {3, 4}, {4, 3}, [](const DVar& x, const DVar& c) { return sum(square(matmul(x, c))); }},
      {"bmm", {2, 3, 4}, {1}, [](const DVar& x, const DVar&) { return sum(square(bmm(x, x, false, true))); }},
      {"bmm_ta", {2, 3, 4}, {1}, [](const DVar& x, const DVar&) { return sum(square(bmm(x, x, true, false))); }},
      {"conv_s1", {1, 4, 4, 2}, {3, 3, 2, 2}, [](const DVar& x, const DVar& c) { return sum(square(conv2d(x, c, 1))); }},
      {"conv_s2", {1, 4, 4, 2}, {3, 3, 2, 2}, [](const DVar& x, const DVar& c) { return sum(square(conv2d(x, c, 2))); }},
      {"conv_weight", {3, 3, 2, 2}, {1, 4, 4, 2}, [](const DVar& w, const DVar& c) { return sum(square(conv2d(c, w, 2))); }},
      {"upsample", {1, 2, 2, 3}, {1, 4, 4, 3}, [](const DVar& x, const DVar& c) { return sum(mul(upsample2x(x), c)); }},
      {"permute", {2, 3, 4}, {4, 2, 3}, [](const DVar& x, const DVar& c) { return sum(mul(permute(x, {2, 0, 1}), c)); }},
      {"concat", {2, 3}, {2, 6}, [](const DVar& x, const DVar& c) { return sum(mul(concat<double>({x, square(x)}, 1), c)); }},
      {"gather", {4, 3}, {3, 3}, [](const DVar& x, const DVar& c) { return sum(mul(gather_rows(x, {3, 0, 3}), c)); }},
      {"sum_last", {3, 4}, {3, 1}, [](const DVar& x, const DVar& c) { return sum(mul(sum_last(square(x)), c)); }},
      {"mean", {3, 4}, {1}, [](const DVar& x, const DVar& c) { return mul(mean(square(x)), c); }},
      {"softmax", {3, 4}, {3, 4}, [](const DVar& x, const DVar& c) { return sum(mul(softmax_last(x), c)); }},
      {"layer_norm", {3, 4}, {3, 4}, [](const DVar& x, const DVar& c) { return sum(mul(layer_norm(x), c)); }},
      {"silu", {6}, {6}, [](const DVar& x, const DVar& c) { return sum(mul(silu(x), c)); }},
      {"sigmoid", {6}, {6}, [](const DVar& x, const DVar& c) { return sum(mul(sigmoid(x), c)); }},
      {"tanh", {6}, {6}, [](const DVar& x, const DVar& c) { return sum(mul(tanh(x), c)); }},
      {"exp_log", {6}, {6}, [](const DVar& x, const DVar& c) { return sum(mul(log(add_scalar(exp(x), 1.0)), c)); }},
      {"space_to_depth", {1, 4, 4, 2}, {1, 2, 2, 8}, [](const DVar& x, const DVar& c) { return sum(mul(space_to_depth(x, 2), c)); }},
      {"depth_to_space", {1, 2, 2, 8}, {1, 4, 4, 2}, [](const DVar& x, const DVar& c) { return sum(mul(depth_to_space(x, 2), c)); }},
      {"reshape_slice", {2, 6}, {3, 3}, [](const DVar& x, const DVar& c) { return sum(mul(slice(reshape(x, {4, 3}), 0, 1, 3), c)); }},
      {"neg_add_scalar", {5}, {5}, [](const DVar& x, const DVar& c) { return sum(mul(neg(add_scalar(x, 0.5)), c)); }},
      {"mean_last", {3, 4}, {3, 1}, [](const DVar& x, const DVar& c) { return sum(mul(mean_last(square(x)), c)); }},
      {"broadcast_to", {1, 3}, {4, 3}, [](const DVar& x, const DVar& c) { return sum(mul(broadcast_to(x, {4, 3}), c)); }},
      {"mse", {6}, {6}, [](const DVar& x, const DVar& c) { return mse_loss(x, c); }},
      {"bce", {6}, {6}, [](const DVar& x, const DVar& c) {
         DTensor y(c.shape());
         for (std::int64_t i = 0; i < y.numel(); ++i) y[static_cast<std::size_t>(i)] = c.value()[static_cast<std::size_t>(i)] > 0 ? 1.0 : 0.0;
         return bce_with_logits(x, y);
       }},
  };
  return cases;
}

// Worst relative error per primitive over `trials` random inputs (double precision).
inline std::vector<std::pair<std::string, double>> check_primitives(int trials, Rng& rng, double step = 1e-4) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& cs : primitive_cases()) {
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
      const auto x = BasicTensor<double>::randn(cs.shape, rng);
      const auto c = BasicTensor<double>::randn(cs.aux, rng);
      const std::function<BasicVar<double>(const BasicVar<double>&)> f = [&](const BasicVar<double>& v) {
        return cs.fn(v, v.tape().constant(c));
      };
      worst = std::max(worst, grad_check<double>(f, x, step));
    }
    out.emplace_back(cs.name, worst);
  }
  return out;
}

}  // namespace maskflow
