// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace ipn {

namespace {

thread_local bool g_no_grad = false;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const std::string& why) {
  throw DimensionError(std::string(op) + ": shape " + shape_str(a) + " " + why);
}

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

// Builds an op result. The tape is only recorded when some parent is tracked
// and recording is enabled.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::vector<NodePtr<T>> parents,
                           std::function<void(detail::Node<T>&)> backward_fn) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool tracked = false;
  if (!g_no_grad) {
    for (const auto& p : parents) tracked = tracked || p->requires_grad;
  }
  if (tracked) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

template <typename T>
std::size_t rows_of(const detail::Node<T>& n) {
  if (n.shape.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < n.shape.size(); ++i) r *= n.shape[i];
  return r;
}

template <typename T>
std::size_t cols_of(const detail::Node<T>& n) {
  return n.shape.empty() ? 1 : n.shape.back();
}

template <typename T>
void require_matrix(const char* op, const BasicTensor<T>& a) {
  if (!a.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (a.rank() != 2) dim_error(op, a.shape(), "is not a matrix");
}

template <typename T>
void require_defined(const char* op, const BasicTensor<T>& a) {
  if (!a.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::enabled() { return g_no_grad; }

// ---- BasicTensor --------------------------------------------------------

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("from_data: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  BasicTensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return from_data({}, {value});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::randn(Shape shape, std::mt19937_64& rng, double stddev,
                                     bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  return rows_of(*node_);
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  return cols_of(*node_);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
  if (node_->backward) throw ContractError("set_requires_grad: only leaves can be (un)tracked");
  node_->requires_grad = on;
  if (on) {
    node_->grad.assign(node_->data.size(), T(0));
  } else {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(shape(), node_->data, false);
}

// ---- backward -----------------------------------------------------------

template <typename T>
void backward(const BasicTensor<T>& loss) {
  require_defined("backward", loss);
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not reachable from any tracked parameter");
  }
  using N = detail::Node<T>;
  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<N*> order;
  std::unordered_set<N*> seen;
  std::vector<std::pair<N*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      N* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& root = loss.node()->ensure_grad();
  root[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* node = *it;
    if (node->backward) {
      node->ensure_grad();
      node->backward(*node);
    }
  }
  // Discard the tape: intermediate gradients and closures are released, the
  // gradients of leaves persist.
  for (N* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->requires_grad = false;
    }
  }
}

// ---- primitives ---------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) dim_error("matmul", a.shape(), b.shape());
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() =
      CMapMat<T>(a.data().data(), m, k) * CMapMat<T>(b.data().data(), k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                        [m, k, n](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          CMapMat<T> g(self.grad.data(), m, n);
                          if (pa.requires_grad) {
                            MapMat<T>(pa.ensure_grad().data(), m, k).noalias() +=
                                g * CMapMat<T>(pb.data.data(), k, n).transpose();
                          }
                          if (pb.requires_grad) {
                            MapMat<T>(pb.ensure_grad().data(), k, n).noalias() +=
                                CMapMat<T>(pa.data.data(), m, k).transpose() * g;
                          }
                        });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_matrix("transpose", a);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  MapMat<T>(out.data(), c, r) = CMapMat<T>(a.data().data(), r, c).transpose();
  return make_result<T>("transpose", {c, r}, std::move(out), {a.node()},
                        [r, c](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          MapMat<T>(p.ensure_grad().data(), r, c) +=
                              CMapMat<T>(self.grad.data(), c, r).transpose();
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_defined("add", a);
  require_defined("add", b);
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                          [](detail::Node<T>& self) {
                            for (auto& p : self.parents) {
                              if (!p->requires_grad) continue;
                              auto& g = p->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                            }
                          });
  }
  // Trailing-axis broadcast: b is [c] or [1,c] and a is [..., c].
  const std::size_t c = a.cols();
  const bool broadcastable =
      b.numel() == c && (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1)) && a.rank() >= 1;
  if (!broadcastable) dim_error("add", a.shape(), b.shape());
  const std::size_t r = a.numel() / c;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + b.data()[j];
  }
  return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                        [r, c](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = pa.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = pb.ensure_grad();
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_defined("sub", a);
  require_defined("sub", b);
  if (a.shape() != b.shape()) dim_error("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                        [](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = pa.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = pb.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_defined("mul", a);
  require_defined("mul", b);
  if (a.shape() != b.shape()) dim_error("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()},
                        [](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = pa.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = pb.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  require_defined("scale", a);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a.node()},
                        [factor](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                        });
}

template <typename T>
BasicTensor<T> grad_scale(const BasicTensor<T>& a, T factor) {
  require_defined("grad_scale", a);
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("grad_scale", a.shape(), std::move(out), {a.node()},
                        [factor](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                        });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
  require_defined("tanh", a);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return make_result<T>("tanh", a.shape(), std::move(out), {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  require_defined("gelu", a);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return make_result<T>("gelu", a.shape(), std::move(out), {a.node()},
                        [inv_sqrt2](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          auto& g = p.ensure_grad();
                          const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T x = p.data[i];
                            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
                            g[i] += self.grad[i] * (cdf + x * pdf);
                          }
                        });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
  require_defined("softmax", a);
  if (a.rank() == 0) dim_error("softmax", a.shape(), "has no axis");
  const std::size_t c = a.cols(), r = a.numel() / c;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = a.data().data() + i * c;
    T* y = out.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  return make_result<T>("softmax", a.shape(), std::move(out), {a.node()},
                        [r, c](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i) {
                            const T* y = self.data.data() + i * c;
                            const T* gy = self.grad.data() + i * c;
                            T dot = 0;
                            for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
                          }
                        });
}

template <typename T>
BasicTensor<T> causal_mask(const BasicTensor<T>& scores) {
  require_matrix("causal_mask", scores);
  const std::size_t n = scores.dim(0);
  if (scores.dim(1) != n) dim_error("causal_mask", scores.shape(), "is not square");
  std::vector<T> out(scores.data().begin(), scores.data().end());
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = neg_inf;
  }
  return make_result<T>("causal_mask", scores.shape(), std::move(out), {scores.node()},
                        [n](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t j = 0; j <= i; ++j) g[i * n + j] += self.grad[i * n + j];
                          }
                        });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
  require_defined("layer_norm", x);
  const std::size_t c = x.cols(), r = x.numel() / c;
  if (gamma.numel() != c) dim_error("layer_norm", x.shape(), gamma.shape());
  if (beta.numel() != c) dim_error("layer_norm", x.shape(), beta.shape());
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.data().data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) {
          auto& g = pg.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j] * xhat[i * c + j];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          for (std::size_t i = 0; i < r; ++i) {
            // d xhat = dy * gamma; dx = inv_std * (dxh - mean(dxh) - xhat * mean(dxh * xhat))
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T dxh = self.grad[i * c + j] * pg.data[j];
              m1 += dxh;
              m2 += dxh * xhat[i * c + j];
            }
            m1 /= T(c);
            m2 /= T(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T dxh = self.grad[i * c + j] * pg.data[j];
              g[i * c + j] += inv_std[i] * (dxh - m1 - xhat[i * c + j] * m2);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const TokenId> ids) {
  require_matrix("embedding", table);
  const std::size_t v = table.dim(0), c = table.dim(1);
  std::vector<TokenId> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
      throw ContractError("embedding: id " + std::to_string(idx[i]) + " outside table " +
                          shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + idx[i] * c, c, out.data() + i * c);
  }
  const std::size_t n = idx.size();
  return make_result<T>("embedding", {n, c}, std::move(out), {table.node()},
                        [c, idx = std::move(idx)](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < idx.size(); ++i)
                            for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
                        });
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  std::vector<NodePtr<T>> parents;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_defined("concat_rows", p);
    if (p.rank() > 2 || p.cols() != c) dim_error("concat_rows", parts.front().shape(), p.shape());
    offsets.push_back(total);
    total += p.numel();
    parents.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(total);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>("concat_rows", {total / c, c}, std::move(out), std::move(parents),
                        [offsets = std::move(offsets)](detail::Node<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = *self.parents[k];
                            if (!p.requires_grad) continue;
                            auto& g = p.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
                          }
                        });
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::vector<NodePtr<T>> parents;
  std::vector<std::size_t> widths;
  std::size_t c = 0;
  for (const auto& p : parts) {
    require_matrix("concat_cols", p);
    if (p.dim(0) != r) dim_error("concat_cols", parts.front().shape(), p.shape());
    widths.push_back(p.dim(1));
    c += p.dim(1);
    parents.push_back(p.node());
  }
  std::vector<T> out(r * c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * c + off);
    off += w;
  }
  return make_result<T>("concat_cols", {r, c}, std::move(out), std::move(parents),
                        [r, c, widths = std::move(widths)](detail::Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = *self.parents[k];
                            const std::size_t w = widths[k];
                            if (p.requires_grad) {
                              auto& g = p.ensure_grad();
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * c + off + j];
                            }
                            off += w;
                          }
                        });
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
  require_matrix("slice_rows", a);
  if (begin >= end || end > a.dim(0)) {
    dim_error("slice_rows", a.shape(),
              "cannot be sliced to rows [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  }
  const std::size_t c = a.dim(1);
  std::vector<T> out(a.data().begin() + begin * c, a.data().begin() + end * c);
  return make_result<T>("slice_rows", {end - begin, c}, std::move(out), {a.node()},
                        [begin, c](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
                        });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
  require_matrix("slice_cols", a);
  if (begin >= end || end > a.dim(1)) {
    dim_error("slice_cols", a.shape(),
              "cannot be sliced to cols [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  }
  const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<T> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(a.data().data() + i * c + begin, w, out.data() + i * w);
  return make_result<T>("slice_cols", {r, w}, std::move(out), {a.node()},
                        [r, c, w, begin](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
                        });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  require_defined("reshape", a);
  if (shape_numel(shape) != a.numel()) dim_error("reshape", a.shape(), shape);
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a.node()},
                        [](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  require_defined("sum", a);
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>("sum", {}, {s}, {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  require_defined("mean", a);
  if (a.numel() == 0) dim_error("mean", a.shape(), "is empty");
  T s = 0;
  for (T v : a.data()) s += v;
  const T n = T(a.numel());
  return make_result<T>("mean", {}, {s / n}, {a.node()}, [n](detail::Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& a) {
  require_matrix("sum_rows", a);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(c, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.data()[i * c + j];
  return make_result<T>("sum_rows", {1, c}, std::move(out), {a.node()},
                        [r, c](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j];
                        });
}

template <typename T>
BasicTensor<T> mean_rows(const BasicTensor<T>& a) {
  require_matrix("mean_rows", a);
  return scale(sum_rows(a), T(1) / T(a.dim(0)));
}

template <typename T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& a, T eps) {
  require_matrix("l2_normalize_rows", a);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.numel()), norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += a.data()[i * c + j] * a.data()[i * c + j];
    norms[i] = std::sqrt(s) + eps;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] / norms[i];
  }
  return make_result<T>("l2_normalize_rows", a.shape(), std::move(out), {a.node()},
                        [r, c, norms = std::move(norms)](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          auto& g = p.ensure_grad();
                          for (std::size_t i = 0; i < r; ++i) {
                            // y = x / d with d = |x| + eps; dy/dx = I/d - x x^T / (d^2 |x|)
                            const T d = norms[i];
                            T xnorm = 0, dot = 0;
                            for (std::size_t j = 0; j < c; ++j) {
                              xnorm += p.data[i * c + j] * p.data[i * c + j];
                              dot += p.data[i * c + j] * self.grad[i * c + j];
                            }
                            xnorm = std::sqrt(xnorm);
                            const T coef = xnorm > T(0) ? dot / (d * d * xnorm) : T(0);
                            for (std::size_t j = 0; j < c; ++j)
                              g[i * c + j] += self.grad[i * c + j] / d - coef * p.data[i * c + j];
                          }
                        });
}

template <typename T>
BasicTensor<T> weighted_cross_entropy(const BasicTensor<T>& logits,
                                      std::span<const TokenId> targets,
                                      std::span<const T> weights) {
  require_matrix("cross_entropy", logits);
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  if (targets.size() != r) {
    dim_error("cross_entropy", logits.shape(), Shape{targets.size()});
  }
  if (weights.size() != r) {
    dim_error("cross_entropy weights", logits.shape(), Shape{weights.size()});
  }
  std::vector<T> probs(r * c);
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= c) {
      throw ContractError("cross_entropy: target " + std::to_string(tgt[i]) + " outside " +
                          std::to_string(c) + " classes");
    }
    const T* x = logits.data().data() + i * c;
    T* p = probs.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (p[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= s;
    total += w[i] * -(x[tgt[i]] - mx - std::log(s));
  }
  return make_result<T>("cross_entropy", {}, {total}, {logits.node()},
                        [c, probs = std::move(probs), tgt = std::move(tgt),
                         w = std::move(w)](detail::Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < w.size(); ++i) {
                            const T wi = self.grad[0] * w[i];
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += wi * probs[i * c + j];
                            g[i * c + tgt[i]] -= wi;
                          }
                        });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const TokenId> targets) {
  require_matrix("cross_entropy", logits);
  std::vector<T> w(logits.dim(0), T(1) / T(logits.dim(0)));
  return weighted_cross_entropy(logits, targets, std::span<const T>(w));
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& qkv, std::span<const std::size_t> segments,
                         std::size_t heads, bool causal) {
  require_matrix("attention", qkv);
  const std::size_t rows = qkv.dim(0), width = qkv.dim(1);
  if (heads == 0 || width % (3 * heads) != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " does not split into 3 x " +
                         std::to_string(heads) + " heads");
  }
  std::vector<std::size_t> segs(segments.begin(), segments.end());
  std::size_t total = 0;
  for (auto s : segs) {
    if (s == 0) throw ContractError("attention: empty segment");
    total += s;
  }
  if (total != rows) dim_error("attention", qkv.shape(), Shape{total});
  const std::size_t d = width / 3, hd = d / heads;
  const T inv = T(1) / std::sqrt(T(hd));
  using Stride = Eigen::OuterStride<>;
  using CBlock = Eigen::Map<const RowMat<T>, 0, Stride>;
  using Block = Eigen::Map<RowMat<T>, 0, Stride>;
  std::vector<T> out(rows * d);
  // Attention probabilities per (segment, head), kept for the backward pass.
  std::vector<T> probs;
  std::size_t prob_size = 0;
  for (auto s : segs) prob_size += heads * s * s;
  probs.resize(prob_size);
  const T* src = qkv.data().data();
  std::size_t row0 = 0, poff = 0;
  for (auto s : segs) {
    for (std::size_t h = 0; h < heads; ++h) {
      CBlock q(src + row0 * width + h * hd, s, hd, Stride(width));
      CBlock k(src + row0 * width + d + h * hd, s, hd, Stride(width));
      CBlock v(src + row0 * width + 2 * d + h * hd, s, hd, Stride(width));
      MapMat<T> p(probs.data() + poff, s, s);
      p.noalias() = (q * k.transpose()) * inv;
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t lim = causal ? i + 1 : s;
        T mx = p(i, 0);
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, p(i, j));
        T sum = 0;
        for (std::size_t j = 0; j < lim; ++j) sum += (p(i, j) = std::exp(p(i, j) - mx));
        for (std::size_t j = 0; j < lim; ++j) p(i, j) /= sum;
        for (std::size_t j = lim; j < s; ++j) p(i, j) = T(0);
      }
      Block o(out.data() + row0 * d + h * hd, s, hd, Stride(d));
      o.noalias() = p * v;
      poff += s * s;
    }
    row0 += s;
  }
  return make_result<T>(
      "attention", {rows, d}, std::move(out), {qkv.node()},
      [segs = std::move(segs), probs = std::move(probs), heads, width, d, hd,
       inv](detail::Node<T>& self) {
        auto& parent = *self.parents[0];
        const T* src = parent.data.data();
        T* g = parent.ensure_grad().data();
        std::size_t row0 = 0, poff = 0;
        RowMat<T> dp, ds;
        for (auto s : segs) {
          for (std::size_t h = 0; h < heads; ++h) {
            CBlock q(src + row0 * width + h * hd, s, hd, Stride(width));
            CBlock k(src + row0 * width + d + h * hd, s, hd, Stride(width));
            CBlock v(src + row0 * width + 2 * d + h * hd, s, hd, Stride(width));
            Block gq(g + row0 * width + h * hd, s, hd, Stride(width));
            Block gk(g + row0 * width + d + h * hd, s, hd, Stride(width));
            Block gv(g + row0 * width + 2 * d + h * hd, s, hd, Stride(width));
            CBlock go(self.grad.data() + row0 * d + h * hd, s, hd, Stride(d));
            CMapMat<T> p(probs.data() + poff, s, s);
            gv.noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            // Softmax backward; masked entries have p = 0 and drop out.
            ds.resize(s, s);
            for (std::size_t i = 0; i < s; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < s; ++j) dot += dp(i, j) * p(i, j);
              for (std::size_t j = 0; j < s; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv;
            }
            gq.noalias() += ds * k;
            gk.noalias() += ds.transpose() * q;
            poff += s * s;
          }
          row0 += s;
        }
      });
}

// ---- explicit instantiation ---------------------------------------------

#define IPN_INSTANTIATE(T)                                                                       \
  template class BasicTensor<T>;                                                                 \
  template void backward(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                       \
  template BasicTensor<T> grad_scale(const BasicTensor<T>&, T);                                  \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                                           \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                           \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                        \
  template BasicTensor<T> causal_mask(const BasicTensor<T>&);                                    \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                     const BasicTensor<T>&, T);                                  \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const TokenId>);            \
  template BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>&);                       \
  template BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>&);                       \
  template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);           \
  template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::size_t, std::size_t);           \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                 \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                            \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                           \
  template BasicTensor<T> sum_rows(const BasicTensor<T>&);                                       \
  template BasicTensor<T> mean_rows(const BasicTensor<T>&);                                      \
  template BasicTensor<T> l2_normalize_rows(const BasicTensor<T>&, T);                           \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const TokenId>);         \
  template BasicTensor<T> weighted_cross_entropy(const BasicTensor<T>&, std::span<const TokenId>, \
                                                 std::span<const T>);                            \
  template BasicTensor<T> attention(const BasicTensor<T>&, std::span<const std::size_t>,         \
                                    std::size_t, bool);

IPN_INSTANTIATE(float)
IPN_INSTANTIATE(double)

#undef IPN_INSTANTIATE

}  // namespace ipn
