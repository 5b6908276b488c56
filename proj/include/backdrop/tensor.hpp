/*
 * Copyright 2026 the backdrop authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// The scalar type is a template parameter: models train and sample in
// float, while the finite-difference gradient oracle instantiates the
// same code in double. Every forward op validates shapes, checks its
// output for non-finite values, and records a graph node whenever any
// input requires gradients (and gradient recording is enabled).

#ifndef BACKDROP_TENSOR_HPP
#define BACKDROP_TENSOR_HPP

#include <Eigen/Dense>

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace backdrop {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

// Activation buffers are ~100KB-1MB and churn fast; keep them on the heap
// instead of per-allocation mmap so freed blocks are actually reused.
inline const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 64 << 20);
  return true;
}();

// Thread-local switch: when disabled, ops compute values but record no
// graph (used for inference so long sampling loops stay flat in memory).
inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradGuard() { grad_recording_flag() = prev; }
};

template <class S>
struct NodeT;

template <class S>
struct BackwardCtxT;

template <class S>
using NodePtr = std::shared_ptr<NodeT<S>>;

template <class S>
struct NodeT {
  Shape shape;
  std::vector<S> value;
  bool requires_grad = false;
  std::string name;  // nonempty only for named parameters
  std::vector<NodePtr<S>> inputs;
  std::function<void(const NodeT<S>&, const std::vector<S>&, BackwardCtxT<S>&)> backward;
};

// Per-backward-call gradient storage. Gradients never live in the nodes
// themselves, so concurrent backward passes over graphs that share
// parameter leaves do not race.
template <class S>
struct BackwardCtxT {
  std::unordered_map<const NodeT<S>*, std::vector<S>> grads;

  std::vector<S>& grad_for(const NodePtr<S>& node) {
    auto it = grads.find(node.get());
    if (it == grads.end()) {
      it = grads.emplace(node.get(), std::vector<S>(numel(node->shape), S(0))).first;
    }
    return it->second;
  }
};

template <class S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(NodePtr<S> node) : node_(std::move(node)) {}

  static TensorT zeros(Shape shape) {
    return filled(std::move(shape), S(0));
  }

  static TensorT filled(Shape shape, S v) {
    auto node = std::make_shared<NodeT<S>>();
    node->value.assign(static_cast<size_t>(numel(shape)), v);
    node->shape = std::move(shape);
    return TensorT(std::move(node));
  }

  static TensorT from(Shape shape, std::vector<S> values) {
    if (static_cast<int64_t>(values.size()) != numel(shape))
      fail("tensor: " + std::to_string(values.size()) + " values do not fill shape " + shape_str(shape));
    auto node = std::make_shared<NodeT<S>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return TensorT(std::move(node));
  }

  static TensorT scalar(S v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return numel(node_->shape); }
  const std::vector<S>& data() const { return node_->value; }
  // Direct mutation is reserved for parameter updates; tensors inside a
  // recorded graph are treated as immutable.
  std::vector<S>& raw_data() { return node_->value; }
  S item() const {
    if (size() != 1) fail("item: tensor has shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }
  const std::string& name() const { return node_->name; }
  TensorT& set_name(std::string n) {
    node_->name = std::move(n);
    return *this;
  }

  const NodePtr<S>& node() const { return node_; }

 private:
  NodePtr<S> node_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class S>
inline void check_finite(const char* op, const std::vector<S>& v) {
  for (S x : v) {
    if (!std::isfinite(x)) fail(std::string(op) + ": non-finite value in result");
  }
}

template <class S>
inline bool record(std::initializer_list<const TensorT<S>*> inputs) {
  if (!grad_recording_flag()) return false;
  for (const TensorT<S>* t : inputs) {
    if ((*t).requires_grad()) return true;
  }
  return false;
}

template <class S>
inline TensorT<S> make_result(const char* op, Shape shape, std::vector<S> value, bool track,
                              std::vector<NodePtr<S>> inputs,
                              std::function<void(const NodeT<S>&, const std::vector<S>&, BackwardCtxT<S>&)> bw) {
  check_finite(op, value);
  auto node = std::make_shared<NodeT<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(bw);
  }
  return TensorT<S>(std::move(node));
}

template <class S>
using EigenMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstEigenMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C(+)= op(A) * op(B). All buffers row-major.
template <class S>
inline void gemm(const S* a, int ar, int ac, bool ta, const S* b, int br, int bc, bool tb,
                 S* c, bool accumulate) {
  ConstEigenMap<S> ma(a, ar, ac);
  ConstEigenMap<S> mb(b, br, bc);
  int m = ta ? ac : ar;
  int n = tb ? br : bc;
  EigenMap<S> mc(c, m, n);
  if (!ta && !tb) {
    if (accumulate) mc.noalias() += ma * mb; else mc.noalias() = ma * mb;
  } else if (!ta && tb) {
    if (accumulate) mc.noalias() += ma * mb.transpose(); else mc.noalias() = ma * mb.transpose();
  } else if (ta && !tb) {
    if (accumulate) mc.noalias() += ma.transpose() * mb; else mc.noalias() = ma.transpose() * mb;
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose(); else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

inline void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) fail(std::string(op) + ": expected rank-2 tensor, got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix multiply, optionally transposing either argument.

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank2("matmul", a.shape());
  detail::require_rank2("matmul", b.shape());
  int m = trans_a ? a.dim(1) : a.dim(0);
  int ka = trans_a ? a.dim(0) : a.dim(1);
  int kb = trans_b ? b.dim(1) : b.dim(0);
  int n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb)
    fail("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
         (trans_a || trans_b ? " (with transposition)" : ""));

  std::vector<S> out(static_cast<size_t>(m) * n);
  detail::gemm(a.data().data(), a.dim(0), a.dim(1), trans_a, b.data().data(), b.dim(0), b.dim(1), trans_b,
               out.data(), false);

  bool track = detail::record<S>({&a, &b});
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(
      "matmul", {m, n}, std::move(out), track, {an, bn},
      [an, bn, trans_a, trans_b, m, n](const NodeT<S>& self, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
        (void)self;
        const S* ga = an->value.data();
        const S* gb = bn->value.data();
        int ar = an->shape[0], ac = an->shape[1];
        int br = bn->shape[0], bc = bn->shape[1];
        if (an->requires_grad) {
          std::vector<S>& da = ctx.grad_for(an);
          // dA for each transpose configuration of C = op(A) op(B)
          if (!trans_a && !trans_b)
            detail::gemm(g.data(), m, n, false, gb, br, bc, true, da.data(), true);
          else if (!trans_a && trans_b)
            detail::gemm(g.data(), m, n, false, gb, br, bc, false, da.data(), true);
          else if (trans_a && !trans_b)
            detail::gemm(gb, br, bc, false, g.data(), m, n, true, da.data(), true);
          else
            detail::gemm(gb, br, bc, true, g.data(), m, n, true, da.data(), true);
        }
        if (bn->requires_grad) {
          std::vector<S>& db = ctx.grad_for(bn);
          if (!trans_a && !trans_b)
            detail::gemm(ga, ar, ac, true, g.data(), m, n, false, db.data(), true);
          else if (!trans_a && trans_b)
            detail::gemm(g.data(), m, n, true, ga, ar, ac, false, db.data(), true);
          else if (trans_a && !trans_b)
            detail::gemm(ga, ar, ac, false, g.data(), m, n, false, db.data(), true);
          else
            detail::gemm(g.data(), m, n, true, ga, ar, ac, true, db.data(), true);
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic (strict same-shape).

namespace detail {

template <class S, class FwdFn, class BwdA, class BwdB>
TensorT<S> binary_ew(const char* op, const TensorT<S>& a, const TensorT<S>& b, FwdFn f, BwdA dfa, BwdB dfb) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i], b.data()[i]);
  bool track = record<S>({&a, &b});
  auto an = a.node(), bn = b.node();
  return make_result<S>(op, a.shape(), std::move(out), track, {an, bn},
                        [an, bn, dfa, dfb](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                          if (an->requires_grad) {
                            auto& da = ctx.grad_for(an);
                            for (size_t i = 0; i < g.size(); ++i)
                              da[i] += g[i] * dfa(an->value[i], bn->value[i]);
                          }
                          if (bn->requires_grad) {
                            auto& db = ctx.grad_for(bn);
                            for (size_t i = 0; i < g.size(); ++i)
                              db[i] += g[i] * dfb(an->value[i], bn->value[i]);
                          }
                        });
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_ew<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_ew<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_ew<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  std::vector<S> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  bool track = detail::record<S>({&a});
  auto an = a.node();
  return detail::make_result<S>("scale", a.shape(), std::move(out), track, {an},
                                [an, c](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!an->requires_grad) return;
                                  auto& da = ctx.grad_for(an);
                                  for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
                                });
}

template <class S>
TensorT<S> add_const(const TensorT<S>& a, S c) {
  std::vector<S> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  bool track = detail::record<S>({&a});
  auto an = a.node();
  return detail::make_result<S>("add_const", a.shape(), std::move(out), track, {an},
                                [an](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!an->requires_grad) return;
                                  auto& da = ctx.grad_for(an);
                                  for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                                });
}

// ---------------------------------------------------------------------------
// Row broadcasts: combine an [R,C] matrix with a length-C vector per row.

namespace detail {

template <class S>
void require_row_broadcast(const char* op, const TensorT<S>& x, const TensorT<S>& v) {
  require_rank2(op, x.shape());
  if (!((v.rank() == 1 && v.dim(0) == x.dim(1)) || (v.rank() == 2 && v.dim(0) == 1 && v.dim(1) == x.dim(1))))
    fail(std::string(op) + ": cannot broadcast " + shape_str(v.shape()) + " across rows of " + shape_str(x.shape()));
}

}  // namespace detail

template <class S>
TensorT<S> row_add(const TensorT<S>& x, const TensorT<S>& v) {
  detail::require_row_broadcast("row_add", x, v);
  int rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.data().size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<size_t>(r) * cols + c] = x.data()[static_cast<size_t>(r) * cols + c] + v.data()[c];
  bool track = detail::record<S>({&x, &v});
  auto xn = x.node(), vn = v.node();
  return detail::make_result<S>("row_add", x.shape(), std::move(out), track, {xn, vn},
                                [xn, vn, rows, cols](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (xn->requires_grad) {
                                    auto& dx = ctx.grad_for(xn);
                                    for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                                  }
                                  if (vn->requires_grad) {
                                    auto& dv = ctx.grad_for(vn);
                                    for (int r = 0; r < rows; ++r)
                                      for (int c = 0; c < cols; ++c) dv[c] += g[static_cast<size_t>(r) * cols + c];
                                  }
                                });
}

template <class S>
TensorT<S> row_mul(const TensorT<S>& x, const TensorT<S>& v) {
  detail::require_row_broadcast("row_mul", x, v);
  int rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.data().size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<size_t>(r) * cols + c] = x.data()[static_cast<size_t>(r) * cols + c] * v.data()[c];
  bool track = detail::record<S>({&x, &v});
  auto xn = x.node(), vn = v.node();
  return detail::make_result<S>("row_mul", x.shape(), std::move(out), track, {xn, vn},
                                [xn, vn, rows, cols](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (xn->requires_grad) {
                                    auto& dx = ctx.grad_for(xn);
                                    for (int r = 0; r < rows; ++r)
                                      for (int c = 0; c < cols; ++c)
                                        dx[static_cast<size_t>(r) * cols + c] += g[static_cast<size_t>(r) * cols + c] * vn->value[c];
                                  }
                                  if (vn->requires_grad) {
                                    auto& dv = ctx.grad_for(vn);
                                    for (int r = 0; r < rows; ++r)
                                      for (int c = 0; c < cols; ++c)
                                        dv[c] += g[static_cast<size_t>(r) * cols + c] * xn->value[static_cast<size_t>(r) * cols + c];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Activations and normalization.

template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  const S inv_sqrt2 = S(0.70710678118654752440);
  const S inv_sqrt2pi = S(0.39894228040143267794);
  std::vector<S> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    S v = x.data()[i];
    out[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
  }
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("gelu", x.shape(), std::move(out), track, {xn},
                                [xn, inv_sqrt2, inv_sqrt2pi](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  for (size_t i = 0; i < g.size(); ++i) {
                                    S v = xn->value[i];
                                    S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                                    S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                                    dx[i] += g[i] * (cdf + v * pdf);
                                  }
                                });
}

// Softmax over the last axis. An optional non-negative weight matrix S
// multiplies the exponentials before normalization, so rows renormalize
// over the surviving entries; a zero weight removes a column from the
// row's distribution exactly as if its key had been deleted. With all
// weights 1 the result is bitwise identical to the unweighted softmax.
template <class S>
TensorT<S> softmax(const TensorT<S>& x, const TensorT<S>* weights = nullptr) {
  if (x.rank() < 1) fail("softmax: scalar input");
  int cols = x.dim(x.rank() - 1);
  int rows = static_cast<int>(x.size() / cols);
  if (weights) {
    if (weights->size() != x.size())
      fail("softmax: weight shape " + shape_str(weights->shape()) + " does not match " + shape_str(x.shape()));
    for (S w : weights->data())
      if (w < S(0)) fail("softmax: negative weight");
  }
  std::vector<S> out(x.data().size());
  for (int r = 0; r < rows; ++r) {
    const S* row = x.data().data() + static_cast<size_t>(r) * cols;
    const S* wrow = weights ? weights->data().data() + static_cast<size_t>(r) * cols : nullptr;
    // max over surviving columns keeps exp() in range without letting a
    // masked-out large logit flush every kept entry to zero
    S mx = -std::numeric_limits<S>::infinity();
    for (int c = 0; c < cols; ++c)
      if (!wrow || wrow[c] > S(0)) mx = std::max(mx, row[c]);
    if (!std::isfinite(mx)) fail("softmax: row has no surviving entries");
    S denom = S(0);
    S* orow = out.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) {
      S e = std::exp(row[c] - mx);
      if (wrow) e *= wrow[c];
      orow[c] = e;
      denom += e;
    }
    for (int c = 0; c < cols; ++c) orow[c] /= denom;
  }
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("softmax", x.shape(), std::move(out), track, {xn},
                                [xn, rows, cols](const NodeT<S>& self, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  // dl = y * (g - sum(g*y)) per row; the weight matrix is a
                                  // constant additive log-prior, so the Jacobian keeps the
                                  // plain softmax form in terms of the output y
                                  for (int r = 0; r < rows; ++r) {
                                    const S* y = self.value.data() + static_cast<size_t>(r) * cols;
                                    const S* gr = g.data() + static_cast<size_t>(r) * cols;
                                    S dot = S(0);
                                    for (int c = 0; c < cols; ++c) dot += gr[c] * y[c];
                                    S* dr = dx.data() + static_cast<size_t>(r) * cols;
                                    for (int c = 0; c < cols; ++c) dr[c] += y[c] * (gr[c] - dot);
                                  }
                                });
}

// Per-row standardization without affine parameters.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, S eps = S(1e-5)) {
  detail::require_rank2("layer_norm", x.shape());
  int rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.data().size());
  std::vector<S> inv_std(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const S* row = x.data().data() + static_cast<size_t>(r) * cols;
    S mean = S(0);
    for (int c = 0; c < cols; ++c) mean += row[c];
    mean /= S(cols);
    S var = S(0);
    for (int c = 0; c < cols; ++c) {
      S d = row[c] - mean;
      var += d * d;
    }
    var /= S(cols);
    S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    S* orow = out.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) orow[c] = (row[c] - mean) * is;
  }
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>(
      "layer_norm", x.shape(), std::move(out), track, {xn},
      [xn, rows, cols, inv_std](const NodeT<S>& self, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
        if (!xn->requires_grad) return;
        auto& dx = ctx.grad_for(xn);
        for (int r = 0; r < rows; ++r) {
          const S* y = self.value.data() + static_cast<size_t>(r) * cols;
          const S* gr = g.data() + static_cast<size_t>(r) * cols;
          S gmean = S(0), gymean = S(0);
          for (int c = 0; c < cols; ++c) {
            gmean += gr[c];
            gymean += gr[c] * y[c];
          }
          gmean /= S(cols);
          gymean /= S(cols);
          S is = inv_std[static_cast<size_t>(r)];
          S* dr = dx.data() + static_cast<size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) dr[c] += is * (gr[c] - gmean - y[c] * gymean);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape surgery: concat / slices / reshape / embedding rows.

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
  if (parts.empty()) fail("concat: no inputs");
  int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) fail("concat: axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  Shape out_shape = parts[0].shape();
  for (size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (static_cast<int>(s.size()) != rank)
      fail("concat: rank mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (s[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
        fail("concat: shape mismatch on axis " + std::to_string(d) + ": " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
    }
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }

  // outer = product of dims before axis, inner = product after
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<S> out(static_cast<size_t>(numel(out_shape)));
  int64_t axis_total = out_shape[static_cast<size_t>(axis)];
  std::vector<int64_t> offsets(parts.size());
  {
    int64_t off = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      off += parts[p].dim(axis);
    }
  }
  for (size_t p = 0; p < parts.size(); ++p) {
    int64_t ax = parts[p].dim(axis);
    const std::vector<S>& src = parts[p].data();
    for (int64_t o = 0; o < outer; ++o) {
      const S* s_ptr = src.data() + o * ax * inner;
      S* d_ptr = out.data() + (o * axis_total + offsets[p]) * inner;
      std::copy(s_ptr, s_ptr + ax * inner, d_ptr);
    }
  }

  bool track = false;
  std::vector<NodePtr<S>> in_nodes;
  in_nodes.reserve(parts.size());
  for (const auto& p : parts) {
    in_nodes.push_back(p.node());
    if (grad_recording_flag() && p.requires_grad()) track = true;
  }
  std::vector<int64_t> offs = offsets;
  return detail::make_result<S>(
      "concat", out_shape, std::move(out), track, in_nodes,
      [in_nodes, offs, outer, inner, axis_total, axis](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
        for (size_t p = 0; p < in_nodes.size(); ++p) {
          if (!in_nodes[p]->requires_grad) continue;
          auto& dp = ctx.grad_for(in_nodes[p]);
          int64_t ax = in_nodes[p]->shape[static_cast<size_t>(axis)];
          for (int64_t o = 0; o < outer; ++o) {
            const S* g_ptr = g.data() + (o * axis_total + offs[p]) * inner;
            S* d_ptr = dp.data() + o * ax * inner;
            for (int64_t i = 0; i < ax * inner; ++i) d_ptr[i] += g_ptr[i];
          }
        }
      });
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& x, int start, int count) {
  detail::require_rank2("slice_rows", x.shape());
  if (start < 0 || count < 0 || start + count > x.dim(0))
    fail("slice_rows: range [" + std::to_string(start) + "," + std::to_string(start + count) + ") out of " +
         shape_str(x.shape()));
  int cols = x.dim(1);
  std::vector<S> out(static_cast<size_t>(count) * cols);
  std::copy(x.data().begin() + static_cast<size_t>(start) * cols,
            x.data().begin() + static_cast<size_t>(start + count) * cols, out.begin());
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("slice_rows", {count, cols}, std::move(out), track, {xn},
                                [xn, start, cols](const NodeT<S>& self, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  int count = self.shape[0];
                                  for (int r = 0; r < count; ++r)
                                    for (int c = 0; c < cols; ++c)
                                      dx[static_cast<size_t>(start + r) * cols + c] += g[static_cast<size_t>(r) * cols + c];
                                });
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, int start, int count) {
  detail::require_rank2("slice_cols", x.shape());
  if (start < 0 || count < 0 || start + count > x.dim(1))
    fail("slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + count) + ") out of " +
         shape_str(x.shape()));
  int rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(static_cast<size_t>(rows) * count);
  for (int r = 0; r < rows; ++r)
    std::copy(x.data().begin() + static_cast<size_t>(r) * cols + start,
              x.data().begin() + static_cast<size_t>(r) * cols + start + count,
              out.begin() + static_cast<size_t>(r) * count);
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("slice_cols", {rows, count}, std::move(out), track, {xn},
                                [xn, start, rows, cols](const NodeT<S>& self, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  int count = self.shape[1];
                                  for (int r = 0; r < rows; ++r)
                                    for (int c = 0; c < count; ++c)
                                      dx[static_cast<size_t>(r) * cols + start + c] += g[static_cast<size_t>(r) * count + c];
                                });
}

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  std::vector<S> out = x.data();
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("reshape", std::move(new_shape), std::move(out), track, {xn},
                                [xn](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                                });
}

// Lookup of one row of an embedding table, returned as shape [1, cols].
template <class S>
TensorT<S> embedding(const TensorT<S>& table, int row) {
  detail::require_rank2("embedding", table.shape());
  if (row < 0 || row >= table.dim(0))
    fail("embedding: row " + std::to_string(row) + " out of table " + shape_str(table.shape()));
  int cols = table.dim(1);
  std::vector<S> out(table.data().begin() + static_cast<size_t>(row) * cols,
                     table.data().begin() + static_cast<size_t>(row + 1) * cols);
  bool track = detail::record<S>({&table});
  auto tn = table.node();
  return detail::make_result<S>("embedding", {1, cols}, std::move(out), track, {tn},
                                [tn, row, cols](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!tn->requires_grad) return;
                                  auto& dt = ctx.grad_for(tn);
                                  for (int c = 0; c < cols; ++c) dt[static_cast<size_t>(row) * cols + c] += g[static_cast<size_t>(c)];
                                });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  S total = S(0);
  for (S v : x.data()) total += v;
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("sum", {1}, {total}, track, {xn},
                                [xn](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[0];
                                });
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  S total = S(0);
  for (S v : x.data()) total += v;
  S n = S(x.size());
  bool track = detail::record<S>({&x});
  auto xn = x.node();
  return detail::make_result<S>("mean", {1}, {total / n}, track, {xn},
                                [xn, n](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (!xn->requires_grad) return;
                                  auto& dx = ctx.grad_for(xn);
                                  for (size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] / n;
                                });
}

template <class S>
TensorT<S> mse(const TensorT<S>& pred, const TensorT<S>& target) {
  if (pred.shape() != target.shape())
    fail("mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  S total = S(0);
  for (size_t i = 0; i < pred.data().size(); ++i) {
    S d = pred.data()[i] - target.data()[i];
    total += d * d;
  }
  S n = S(pred.size());
  bool track = detail::record<S>({&pred, &target});
  auto pn = pred.node(), tn = target.node();
  return detail::make_result<S>("mse", {1}, {total / n}, track, {pn, tn},
                                [pn, tn, n](const NodeT<S>&, const std::vector<S>& g, BackwardCtxT<S>& ctx) {
                                  if (pn->requires_grad) {
                                    auto& dp = ctx.grad_for(pn);
                                    for (size_t i = 0; i < dp.size(); ++i)
                                      dp[i] += g[0] * S(2) * (pn->value[i] - tn->value[i]) / n;
                                  }
                                  if (tn->requires_grad) {
                                    auto& dt = ctx.grad_for(tn);
                                    for (size_t i = 0; i < dt.size(); ++i)
                                      dt[i] += g[0] * S(2) * (tn->value[i] - pn->value[i]) / n;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Reverse pass.

template <class S>
struct GradMapT {
  std::map<std::string, TensorT<S>> named;
  std::unordered_map<const NodeT<S>*, TensorT<S>> by_node;

  const TensorT<S>* find(const TensorT<S>& t) const {
    auto it = by_node.find(t.node().get());
    return it == by_node.end() ? nullptr : &it->second;
  }
};

// Reverse-mode sweep from a scalar loss. Returns gradients for every
// reachable leaf that requires them; each graph node is visited exactly
// once, in reverse topological order.
template <class S>
GradMapT<S> backward(const TensorT<S>& loss) {
  if (loss.size() != 1) fail("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    fail("backward: loss does not depend on any tensor with requires_grad");

  // iterative DFS post-order over nodes that require gradients
  std::vector<const NodeT<S>*> order;
  std::unordered_set<const NodeT<S>*> visited;
  std::vector<std::pair<const NodeT<S>*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      const NodeT<S>* child = node->inputs[idx].get();
      ++idx;
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  BackwardCtxT<S> ctx;
  ctx.grads[loss.node().get()] = {S(1)};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodeT<S>* node = *it;
    auto git = ctx.grads.find(node);
    if (git == ctx.grads.end()) continue;  // unreachable from the loss
    if (node->backward) node->backward(*node, git->second, ctx);
  }

  GradMapT<S> result;
  for (const NodeT<S>* node : order) {
    if (!node->backward && node->requires_grad) {  // leaf
      auto git = ctx.grads.find(node);
      std::vector<S> g = git == ctx.grads.end() ? std::vector<S>(numel(node->shape), S(0)) : std::move(git->second);
      TensorT<S> t = TensorT<S>::from(node->shape, std::move(g));
      result.by_node.emplace(node, t);
      if (!node->name.empty()) result.named.emplace(node->name, t);
    }
  }
  return result;
}

}  // namespace backdrop

#endif  // BACKDROP_TENSOR_HPP
