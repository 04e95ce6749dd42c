#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "maskflow/tape.hpp"

namespace maskflow {

template <typename T>
struct BasicAdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  std::int64_t step = 0;
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
};

using AdamState = BasicAdamState<float>;

// Bias-corrected Adam update. Moment buffers are created on the first call.
template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads,
               BasicAdamState<T>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(BasicTensor<T>::zeros(p->shape()));
      state.v.push_back(BasicTensor<T>::zeros(p->shape()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape()) shape_mismatch("adam_step", params[i]->shape(), grads[i]->shape());
    if (state.m[i].shape() != params[i]->shape()) shape_mismatch("adam_step", state.m[i].shape(), params[i]->shape());
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double b1 = state.beta1, b2 = state.beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->ptr();
    const T* g = grads[i]->ptr();
    T* m = state.m[i].ptr();
    T* v = state.v[i].ptr();
    for (std::int64_t j = 0; j < params[i]->numel(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mh = mj / c1;
      const double vh = vj / c2;
      p[j] = static_cast<T>(p[j] - state.lr * mh / (std::sqrt(vh) + state.eps));
    }
  }
}

// Steps every parameter of the store that requires grad, in name order.
template <typename T>
void adam_step(BasicParamStore<T>& store, BasicAdamState<T>& state) {
  std::vector<BasicTensor<T>*> params;
  std::vector<const BasicTensor<T>*> grads;
  for (auto& [_, p] : store) {
    if (!p.requires_grad) continue;
    if (!p.grad.defined()) p.zero_grad();
    params.push_back(&p.value);
    grads.push_back(&p.grad);
  }
  adam_step<T>(params, grads, state);
}

}  // namespace maskflow
