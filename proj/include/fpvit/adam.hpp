#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fpvit/tensor.hpp"

namespace fpvit {

template <typename T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t t = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
AdamState<T> make_adam_state(std::span<const Tensor<T>> params, double lr = 3e-4) {
  AdamState<T> state;
  state.lr = lr;
  for (const auto& p : params) {
    state.m.push_back(Matrix<T>::Zero(p.value().rows(), p.value().cols()));
    state.v.push_back(Matrix<T>::Zero(p.value().rows(), p.value().cols()));
  }
  return state;
}

/// Bias-corrected Adam update on raw buffers. An empty gradient counts as zero.
template <typename T>
void adam_step(std::span<Matrix<T>* const> params, std::span<const Matrix<T>* const> grads, AdamState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw Error(ErrorKind::ShapeMismatch, "adam_step: parameter, gradient and state counts differ");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step = static_cast<T>(state.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix<T>& p = *params[i];
    if (state.m[i].rows() != p.rows() || state.m[i].cols() != p.cols())
      throw Error(ErrorKind::ShapeMismatch, "adam_step: state shape does not match parameter " + std::to_string(i));
    const Matrix<T>* g = grads[i];
    if (g && g->size() != 0) {
      if (g->rows() != p.rows() || g->cols() != p.cols())
        throw Error(ErrorKind::ShapeMismatch, "adam_step: gradient shape does not match parameter " + std::to_string(i));
      state.m[i] = b1 * state.m[i] + (T(1) - b1) * *g;
      state.v[i] = b2 * state.v[i] + (T(1) - b2) * g->cwiseProduct(*g);
    } else {
      state.m[i] *= b1;
      state.v[i] *= b2;
    }
    // p -= lr * m_hat / (sqrt(v_hat) + eps)
    p.array() -= step * state.m[i].array() / ((state.v[i].array() * inv_c2).sqrt() + eps);
  }
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  std::vector<Matrix<T>*> ps;
  std::vector<const Matrix<T>*> gs;
  for (auto& p : params) {
    ps.push_back(&p.mutable_value());
    gs.push_back(p.has_grad() ? &p.grad() : nullptr);
  }
  adam_step<T>(std::span<Matrix<T>* const>(ps), std::span<const Matrix<T>* const>(gs), state);
}

}  // namespace fpvit
