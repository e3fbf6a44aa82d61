#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Values are stored as an Eigen
// row-major matrix whose column count is the last dimension, so every kernel
// that acts on the innermost axis works directly on matrix rows. Operations
// whose inputs need no gradient produce plain constants and record nothing.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fpvit/error.hpp"

namespace fpvit {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

inline Index inner_dim(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }
inline Index outer_dim(const Shape& shape) {
  const Index inner = inner_dim(shape);
  return inner == 0 ? 0 : numel(shape) / inner;
}

template <typename T>
struct Node {
  Shape shape;
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix<T>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using NodeType = detail::Node<T>;

  Tensor() = default;

  /// Tensor with the given shape and row-major data of matching length.
  static Tensor from_data(Shape shape, std::span<const T> data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != numel(shape))
      throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(data.size()) +
                                                " does not match shape " + shape_str(shape));
    Matrix<T> m(detail::outer_dim(shape), detail::inner_dim(shape));
    std::copy(data.begin(), data.end(), m.data());
    return make(std::move(shape), std::move(m), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Matrix<T> m = Matrix<T>::Zero(detail::outer_dim(shape), detail::inner_dim(shape));
    return make(std::move(shape), std::move(m), requires_grad);
  }

  static Tensor constant(Shape shape, T fill) {
    Matrix<T> m = Matrix<T>::Constant(detail::outer_dim(shape), detail::inner_dim(shape), fill);
    return make(std::move(shape), std::move(m), false);
  }

  /// Wraps a matrix; shape must have value.cols() as its last dimension.
  static Tensor from_matrix(Shape shape, Matrix<T> value, bool requires_grad = false) {
    if (value.size() != numel(shape) || value.cols() != detail::inner_dim(shape))
      throw Error(ErrorKind::ShapeMismatch, "matrix " + std::to_string(value.rows()) + "x" +
                                                std::to_string(value.cols()) + " does not fit shape " +
                                                shape_str(shape));
    return make(std::move(shape), std::move(value), requires_grad);
  }

  static Tensor make(Shape shape, Matrix<T> value, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<NodeType>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const { return node_->shape[static_cast<std::size_t>(axis < 0 ? axis + rank() : axis)]; }
  Index size() const { return node_->value.size(); }

  const Matrix<T>& value() const { return node_->value; }
  /// Mutable access for optimizers and initializers. Backward rules read
  /// input values, so do not modify between forward and backward.
  Matrix<T>& mutable_value() const { return node_->value; }
  std::span<const T> data() const { return {node_->value.data(), static_cast<std::size_t>(node_->value.size())}; }
  T item() const {
    if (size() != 1) throw Error(ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_str(shape()));
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix<T>& grad() const { return node_->grad; }
  void zero_grad() {
    node_->grad = Matrix<T>::Zero(node_->value.rows(), node_->value.cols());
  }
  void clear_grad() const { node_->grad.resize(0, 0); }

  NodeType& node() const { return *node_; }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
using MapR = Eigen::Map<Matrix<T>>;
template <typename T>
using CMapR = Eigen::Map<const Matrix<T>>;

/// Result node; records the backward rule only when some input needs grad.
template <typename T>
Tensor<T> record(Shape shape, Matrix<T> value, std::vector<Tensor<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
  bool needs = false;
  if (grad_mode_flag())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  Tensor<T> out = Tensor<T>::make(std::move(shape), std::move(value), needs);
  if (needs) {
    auto& node = out.node();
    for (auto& in : inputs) node.parents.push_back(in.node_ptr());
    node.backward = std::move(backward);
  }
  return out;
}

inline void require(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok) throw Error(ErrorKind::ShapeMismatch, op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename T>
Matrix<T> relayout(const Matrix<T>& m, const Shape& shape) {
  return CMapR<T>(m.data(), outer_dim(shape), inner_dim(shape));
}

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(), "reshape", x.shape(), shape);
  Shape in_shape = x.shape();
  return detail::record<T>(shape, detail::relayout(x.value(), shape), {x}, [in_shape](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.grad_buffer() += detail::relayout(self.grad, in_shape);
  });
}

/// Swaps the last two axes (batched over leading axes).
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw Error(ErrorKind::ShapeMismatch, "transpose: rank < 2 for shape " + shape_str(x.shape()));
  const Index m = x.dim(-2), n = x.dim(-1), batch = x.size() / (m * n);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Matrix<T> out(batch * n, m);
  for (Index b = 0; b < batch; ++b) out.middleRows(b * n, n) = x.value().middleRows(b * m, m).transpose();
  return detail::record<T>(shape, std::move(out), {x}, [m, n, batch](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (Index b = 0; b < batch; ++b) g.middleRows(b * m, m) += self.grad.middleRows(b * n, n).transpose();
  });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const std::size_t r = x.shape().size();
  std::vector<int> check = perm;
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < r; ++i)
    if (check.size() != r || check[i] != static_cast<int>(i))
      throw Error(ErrorKind::InvalidArgument, "permute: invalid permutation for shape " + shape_str(x.shape()));

  Shape out_shape(r);
  std::vector<Index> in_stride(r, 1), src_stride(r);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[static_cast<std::size_t>(perm[i])];
    src_stride[i] = in_stride[static_cast<std::size_t>(perm[i])];
  }
  // gather[k] = source offset of output element k
  const Index total = x.size();
  auto gather = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(total));
  std::vector<Index> idx(r, 0);
  for (Index k = 0; k < total; ++k) {
    Index off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * src_stride[i];
    (*gather)[static_cast<std::size_t>(k)] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Matrix<T> out(detail::outer_dim(out_shape), detail::inner_dim(out_shape));
  const T* src = x.value().data();
  T* dst = out.data();
  for (Index k = 0; k < total; ++k) dst[k] = src[(*gather)[static_cast<std::size_t>(k)]];
  return detail::record<T>(out_shape, std::move(out), {x}, [gather, total](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer().data();
    const T* go = self.grad.data();
    for (Index k = 0; k < total; ++k) g[(*gather)[static_cast<std::size_t>(k)]] += go[k];
  });
}

/// Removes `axis` by taking position `index` along it.
template <typename T>
Tensor<T> select(const Tensor<T>& x, Index axis, Index index) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank() || index < 0 || index >= x.dim(axis))
    throw Error(ErrorKind::InvalidArgument, "select: axis/index out of range for shape " + shape_str(x.shape()));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.dim(i);
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index n = x.dim(axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  Matrix<T> out(detail::outer_dim(shape), detail::inner_dim(shape));
  for (Index o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + (o * n + index) * inner, inner, out.data() + o * inner);
  return detail::record<T>(shape, std::move(out), {x}, [outer, inner, n, index](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer().data();
    for (Index o = 0; o < outer; ++o)
      for (Index k = 0; k < inner; ++k) g[(o * n + index) * inner + k] += self.grad.data()[o * inner + k];
  });
}

/// [B, T, D] with a shared [D] token prepended to every sequence -> [B, T+1, D].
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  detail::require(x.rank() == 3 && token.size() == x.dim(2), "prepend_token", x.shape(), token.shape());
  const Index b = x.dim(0), t = x.dim(1), d = x.dim(2);
  Matrix<T> out(b * (t + 1), d);
  const auto tok = detail::CMapR<T>(token.value().data(), 1, d);
  for (Index i = 0; i < b; ++i) {
    out.row(i * (t + 1)) = tok;
    out.middleRows(i * (t + 1) + 1, t) = x.value().middleRows(i * t, t);
  }
  return detail::record<T>({b, t + 1, d}, std::move(out), {x, token}, [b, t, d](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pt = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (Index i = 0; i < b; ++i) g.middleRows(i * t, t) += self.grad.middleRows(i * (t + 1) + 1, t);
    }
    if (pt.requires_grad) {
      auto g = detail::MapR<T>(pt.grad_buffer().data(), 1, d);
      for (Index i = 0; i < b; ++i) g += self.grad.row(i * (t + 1));
    }
  });
}

// ---------------------------------------------------------------------------
// Arithmetic

/// a + b where b's shape equals a's shape or a trailing suffix of it.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  detail::require(suffix, "add", sa, sb);
  const Index nb = b.size(), reps = nb == 0 ? 0 : a.size() / nb;
  Matrix<T> out = a.value();
  {
    auto o = detail::MapR<T>(out.data(), reps, nb);
    const auto bv = detail::CMapR<T>(b.value().data(), 1, nb);
    o.rowwise() += bv.row(0);
  }
  return detail::record<T>(sa, std::move(out), {a, b}, [reps, nb](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.grad_buffer() += self.grad;
    if (pb.requires_grad) {
      const auto g = detail::CMapR<T>(self.grad.data(), reps, nb);
      auto gb = detail::MapR<T>(pb.grad_buffer().data(), 1, nb);
      gb += g.colwise().sum();
    }
  });
}

/// Elementwise product of equal shapes.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return detail::record<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.grad_buffer() += self.grad.cwiseProduct(pb.value);
    if (pb.requires_grad) pb.grad_buffer() += self.grad.cwiseProduct(pa.value);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Matrix<T> out = x.value() * factor;
  return detail::record<T>(x.shape(), std::move(out), {x}, [factor](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.grad_buffer() += self.grad * factor;
  });
}

/// Sum of all entries, as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Matrix<T> out(1, 1);
  out(0, 0) = x.value().sum();
  return detail::record<T>({}, std::move(out), {x}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) p.grad_buffer().array() += self.grad(0, 0);
  });
}

/// Matrix product over the last two axes. b is either rank 2 (shared by all
/// leading positions of a) or has a's leading axes (batched).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() < 2) detail::require(false, "matmul", a.shape(), b.shape());
  const Index k = a.dim(-1);
  detail::require(b.dim(-2) == k, "matmul", a.shape(), b.shape());
  const Index n = b.dim(-1);
  Shape shape = a.shape();
  shape.back() = n;

  if (b.rank() == 2) {
    Matrix<T> out(a.value().rows(), n);
    out.noalias() = a.value() * b.value();
    return detail::record<T>(shape, std::move(out), {a, b}, [](detail::Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) pa.grad_buffer().noalias() += self.grad * pb.value.transpose();
      if (pb.requires_grad) pb.grad_buffer().noalias() += pa.value.transpose() * self.grad;
    });
  }

  detail::require(a.rank() == b.rank() && a.rank() >= 3 &&
                      std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
                  "matmul", a.shape(), b.shape());
  const Index m = a.dim(-2);
  const Index batch = a.size() / (m * k);
  Matrix<T> out(batch * m, n);
  for (Index i = 0; i < batch; ++i)
    out.middleRows(i * m, m).noalias() = a.value().middleRows(i * m, m) * b.value().middleRows(i * k, k);
  return detail::record<T>(shape, std::move(out), {a, b}, [batch, m, k](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (Index i = 0; i < batch; ++i)
        g.middleRows(i * m, m).noalias() += self.grad.middleRows(i * m, m) * pb.value.middleRows(i * k, k).transpose();
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (Index i = 0; i < batch; ++i)
        g.middleRows(i * k, k).noalias() += pa.value.middleRows(i * m, m).transpose() * self.grad.middleRows(i * m, m);
    }
  });
}

/// x W + b with W of shape [in, out] and b of shape [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalisation (all act on the last axis)

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  Matrix<T> out(x.value().rows(), x.value().cols());
  for (Index r = 0; r < out.rows(); ++r) {
    const T mx = x.value().row(r).maxCoeff();
    out.row(r) = (x.value().row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return detail::record<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const auto& y = self.value;
    const Eigen::Matrix<T, Eigen::Dynamic, 1> dots = self.grad.cwiseProduct(y).rowwise().sum();
    p.grad_buffer().array() += y.array() * (self.grad.colwise() - dots).array();
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Matrix<T> out = x.value().unaryExpr([inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
  return detail::record<T>(x.shape(), std::move(out), {x}, [inv_sqrt2](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    const Matrix<T> d = p.value.unaryExpr([&](T v) {
      return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
    });
    p.grad_buffer() += self.grad.cwiseProduct(d);
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const Index d = x.dim(-1), rows = x.value().rows();
  detail::require(gain.size() == d && bias.size() == d, "layer_norm", x.shape(), gain.shape());
  Matrix<T> xhat(rows, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(rows);
  for (Index r = 0; r < rows; ++r) {
    const T mean = x.value().row(r).mean();
    const auto centred = (x.value().row(r).array() - mean).eval();
    const T var = centred.square().mean();
    rstd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (centred * rstd(r)).matrix();
  }
  const auto g = detail::CMapR<T>(gain.value().data(), 1, d);
  const auto bb = detail::CMapR<T>(bias.value().data(), 1, d);
  Matrix<T> out = xhat.array().rowwise() * g.row(0).array();
  out.rowwise() += bb.row(0);
  return detail::record<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), rstd = std::move(rstd), d](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad)
          detail::MapR<T>(pg.grad_buffer().data(), 1, d) += self.grad.cwiseProduct(xhat).colwise().sum();
        if (pb.requires_grad) detail::MapR<T>(pb.grad_buffer().data(), 1, d) += self.grad.colwise().sum();
        if (px.requires_grad) {
          const auto gvec = detail::CMapR<T>(pg.value.data(), 1, d);
          const Matrix<T> dxhat = self.grad.array().rowwise() * gvec.row(0).array();
          auto& gx = px.grad_buffer();
          for (Index r = 0; r < dxhat.rows(); ++r) {
            const T m1 = dxhat.row(r).mean();
            const T m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            gx.row(r).array() += rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
        }
      });
}

/// Class-weighted mean cross-entropy over rows of logits [B, C]:
/// sum_i w[y_i] * (-log softmax(logits_i)[y_i]) / sum_i w[y_i].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const T> class_weights) {
  if (logits.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "cross_entropy: logits must be [B, C], got " + shape_str(logits.shape()));
  const Index b = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(targets.size()) != b)
    throw Error(ErrorKind::ShapeMismatch, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                              std::to_string(b) + " rows");
  if (static_cast<Index>(class_weights.size()) != c)
    throw Error(ErrorKind::ShapeMismatch, "cross_entropy: " + std::to_string(class_weights.size()) +
                                              " class weights for " + std::to_string(c) + " classes");
  Matrix<T> probs(b, c);
  T total = 0, wsum = 0;
  std::vector<T> w(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw Error(ErrorKind::InvalidArgument, "cross_entropy: target out of range");
    const T mx = logits.value().row(i).maxCoeff();
    const auto e = (logits.value().row(i).array() - mx).exp().eval();
    const T s = e.sum();
    probs.row(i) = (e / s).matrix();
    w[static_cast<std::size_t>(i)] = class_weights[static_cast<std::size_t>(y)];
    total += w[static_cast<std::size_t>(i)] * (mx + std::log(s) - logits.value()(i, y));
    wsum += w[static_cast<std::size_t>(i)];
  }
  if (!(wsum > 0)) throw Error(ErrorKind::InvalidArgument, "cross_entropy: total weight must be positive");
  Matrix<T> out(1, 1);
  out(0, 0) = total / wsum;
  std::vector<int> ys(targets.begin(), targets.end());
  return detail::record<T>(
      {}, std::move(out), {logits},
      [probs = std::move(probs), ys = std::move(ys), w = std::move(w), wsum](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        const T go = self.grad(0, 0);
        for (Index i = 0; i < probs.rows(); ++i) {
          const T f = go * w[static_cast<std::size_t>(i)] / wsum;
          g.row(i) += f * probs.row(i);
          g(i, ys[static_cast<std::size_t>(i)]) -= f;
        }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(loss)/d(x) into the grad buffer of every reachable tensor
/// that requires grad. Gradients add up across calls on different losses;
/// reset parameters with zero_grad() between optimizer steps. Calling
/// backward twice on the same loss is an error.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw Error(ErrorKind::ShapeMismatch, "backward: loss must be a scalar");
  auto& root = loss.node();
  if (root.backward_done) throw Error(ErrorKind::State, "backward: already called on this graph");
  if (!root.requires_grad) throw Error(ErrorKind::State, "backward: loss does not depend on any parameter");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad_buffer().array() += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
  // Interior buffers are no longer needed; leaves keep their gradients.
  for (detail::Node<T>* node : order)
    if (node != &root && !node->parents.empty()) node->grad.resize(0, 0);
  root.backward_done = true;
}

}  // namespace fpvit
