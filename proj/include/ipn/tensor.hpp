// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// Every primitive returns a new tensor. When at least one input requires a
// gradient, the result records a tape node (its parents plus a closure that
// pushes the result's gradient back into them). backward() walks the tape in
// reverse topological order, populates the gradients of tracked leaves and
// then discards the tape. Tensors that do not require gradients never own a
// gradient buffer, but gradients still flow *through* ops that consume them.
//
// The element type is a template parameter: float for training, double for
// finite-difference gradient checking.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ipn/errors.hpp"

namespace ipn {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool enabled();

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T value);
  /// Gaussian initialisation with the given standard deviation.
  static BasicTensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                           bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const;
  /// Leading extent for a rank-2 tensor, 1 for rank 0/1.
  std::size_t rows() const;
  /// Trailing extent (1 for scalars).
  std::size_t cols() const;

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T item() const;
  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  /// Leaf-only. Allocates a zeroed gradient buffer when enabling, frees it when disabling.
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  /// Deep copy of the values with no tape and no gradient.
  BasicTensor detach() const;
  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return BasicTensor<U>::from_data(shape(), std::move(out), requires_grad());
  }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Runs reverse-mode accumulation from a scalar loss into every tracked leaf.
template <typename T>
void backward(const BasicTensor<T>& loss);

// ---- primitives ---------------------------------------------------------
// Rank conventions: "matrix" means rank 2 [rows, cols]; vectors are rank 1.

/// [m,k] x [k,n] -> [m,n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);
/// Elementwise sum. `b` may also match only the trailing axis of `a` (row broadcast).
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
/// Identity in the forward pass; multiplies the gradient by `factor` on the
/// way back. Only used to inject faults into the gradient checker.
template <typename T>
BasicTensor<T> grad_scale(const BasicTensor<T>& a, T factor);
template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a);
/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a);
/// Softmax over the last axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a);
/// Sets entries above the diagonal of a square score matrix to -inf.
template <typename T>
BasicTensor<T> causal_mask(const BasicTensor<T>& scores);
/// Normalises the last axis, then applies gamma/beta. Zero variance yields beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));
/// Gathers rows of `table` -> [ids.size(), table.cols()].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const TokenId> ids);
/// Concatenates along axis 0 (the sequence axis). Rank-1 inputs count as single rows.
template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);
template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts);
/// Rows [begin, end) of a matrix.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end);
/// Columns [begin, end) of a matrix.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t begin, std::size_t end);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a);
/// Column-wise sum over rows: [r,c] -> [1,c].
template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& a);
/// Column-wise mean over rows: [r,c] -> [1,c].
template <typename T>
BasicTensor<T> mean_rows(const BasicTensor<T>& a);
/// Divides every row by its L2 norm (plus eps).
template <typename T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& a, T eps = T(1e-8));
/// Mean over rows of -log softmax(logits[r])[targets[r]]. Returns a scalar.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const TokenId> targets);
/// sum_r weights[r] * -log softmax(logits[r])[targets[r]]. Returns a scalar.
template <typename T>
BasicTensor<T> weighted_cross_entropy(const BasicTensor<T>& logits,
                                      std::span<const TokenId> targets,
                                      std::span<const T> weights);

/// Multi-head scaled dot-product attention over packed sequences.
/// `qkv` is [rows, 3*d] holding the query, key and value projections side by
/// side; rows are split into consecutive segments of the given lengths and
/// attention never crosses a segment boundary. With `causal`, row i of a
/// segment only sees rows <= i of that segment. Returns [rows, d].
/// Equivalent to slicing per head and composing matmul/causal_mask/softmax,
/// but with one tape node.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& qkv, std::span<const std::size_t> segments,
                         std::size_t heads, bool causal);

}  // namespace ipn
