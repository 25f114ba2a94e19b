// Copyright 2026 The ssmvla Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ssmvla/core/tensor.hpp"

namespace ssmvla::ag {

using ssmvla::Tensor;

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Gradients live outside the nodes so that several threads can run backward
/// over graphs sharing the same parameter leaves. Keyed by node identity.
template <typename T>
class GradTable {
public:
    Tensor<T>& accumulate(const Node<T>* node, const std::vector<std::int64_t>& shape) {
        auto it = grads_.find(node);
        if (it == grads_.end()) {
            it = grads_.emplace(node, Tensor<T>(shape)).first;
        }
        return it->second;
    }

    const Tensor<T>* find(const Node<T>* node) const {
        auto it = grads_.find(node);
        return it == grads_.end() ? nullptr : &it->second;
    }

    Tensor<T>* find_mutable(const Node<T>* node) {
        auto it = grads_.find(node);
        return it == grads_.end() ? nullptr : &it->second;
    }

    Tensor<T> get_or_zeros(const Node<T>* node, const std::vector<std::int64_t>& shape) const {
        const Tensor<T>* g = find(node);
        return g ? *g : Tensor<T>(shape);
    }

    void clear() { grads_.clear(); }

private:
    std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

/// A value in the computation graph. Parents plus a pull-style backward
/// closure; nodes without requires_grad carry no closure at all, so
/// inference-mode graphs cost nothing extra.
template <typename T>
struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<NodePtr<T>> parents;
    std::function<void(const Tensor<T>& gout, GradTable<T>& table)> backward;

    explicit Node(Tensor<T> v) : value(std::move(v)) {}
};

/// Scoped switch that disables graph construction (values still computed).
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
NodePtr<T> constant(Tensor<T> value) {
    return std::make_shared<Node<T>>(std::move(value));
}

/// Leaf that participates in backward (model parameters, probed inputs).
template <typename T>
NodePtr<T> leaf(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    n->requires_grad = true;
    return n;
}

template <typename T>
bool track(const std::vector<NodePtr<T>>& parents) {
    if (!g_grad_enabled) return false;
    for (const auto& p : parents) {
        if (p->requires_grad) return true;
    }
    return false;
}

template <typename T>
NodePtr<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> parents,
                   std::function<void(const Tensor<T>&, GradTable<T>&)> backward) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    if (track(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return n;
}

/// Reverse-mode sweep from `root`. Seeds with ones unless `seed` is given.
template <typename T>
void backward(const NodePtr<T>& root, GradTable<T>& table, const Tensor<T>* seed = nullptr) {
    if (!root->requires_grad) return;
    // Iterative topological order over the requires_grad subgraph.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* parent = node->parents[idx++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    {
        Tensor<T>& g = table.accumulate(root.get(), root->value.shape());
        if (seed) {
            if (!seed->same_shape(root->value)) throw std::invalid_argument("backward: seed shape mismatch");
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += (*seed)[i];
        } else {
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += T(1);
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (!node->backward) continue;
        const Tensor<T>* g = table.find(node);
        if (!g) continue;
        node->backward(*g, table);
    }
}

// ---------------------------------------------------------------------------
// Dense algebra. Matrix products go through Eigen maps over the flat storage.
// ---------------------------------------------------------------------------

template <typename T>
using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstEigenMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool transpose_a, bool transpose_b,
          bool accumulate) {
    const std::int64_t am = a.dim(0), an = a.dim(1);
    const std::int64_t bm = b.dim(0), bn = b.dim(1);
    ConstEigenMap<T> ma(a.data(), am, an);
    ConstEigenMap<T> mb(b.data(), bm, bn);
    const std::int64_t m = transpose_a ? an : am;
    const std::int64_t n = transpose_b ? bm : bn;
    EigenMap<T> mo(out.data(), m, n);
    if (!transpose_a && !transpose_b) {
        if (an != bm) throw std::invalid_argument("gemm: inner dimension mismatch");
        if (accumulate) mo.noalias() += ma * mb; else mo.noalias() = ma * mb;
    } else if (!transpose_a && transpose_b) {
        if (an != bn) throw std::invalid_argument("gemm: inner dimension mismatch");
        if (accumulate) mo.noalias() += ma * mb.transpose(); else mo.noalias() = ma * mb.transpose();
    } else if (transpose_a && !transpose_b) {
        if (am != bm) throw std::invalid_argument("gemm: inner dimension mismatch");
        if (accumulate) mo.noalias() += ma.transpose() * mb; else mo.noalias() = ma.transpose() * mb;
    } else {
        if (am != bn) throw std::invalid_argument("gemm: inner dimension mismatch");
        if (accumulate) mo.noalias() += ma.transpose() * mb.transpose();
        else mo.noalias() = ma.transpose() * mb.transpose();
    }
}

template <typename T>
void require_2d(const NodePtr<T>& x, const char* who) {
    if (x->value.ndim() != 2) throw std::invalid_argument(std::string(who) + ": expected 2-D tensor");
}

/// out = a @ b for 2-D tensors.
template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    Tensor<T> out({a->value.dim(0), b->value.dim(1)});
    gemm(a->value, b->value, out, false, false, false);
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_op<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, GradTable<T>& t) {
        if (ap->requires_grad) {
            Tensor<T>& ga = t.accumulate(ap, ap->value.shape());
            gemm(g, bp->value, ga, false, true, true);
        }
        if (bp->requires_grad) {
            Tensor<T>& gb = t.accumulate(bp, bp->value.shape());
            gemm(ap->value, g, gb, true, false, true);
        }
    });
}

/// out = a @ b^T for 2-D tensors (attention scores).
template <typename T>
NodePtr<T> matmul_nt(const NodePtr<T>& a, const NodePtr<T>& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    Tensor<T> out({a->value.dim(0), b->value.dim(0)});
    gemm(a->value, b->value, out, false, true, false);
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_op<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, GradTable<T>& t) {
        if (ap->requires_grad) {
            Tensor<T>& ga = t.accumulate(ap, ap->value.shape());
            gemm(g, bp->value, ga, false, false, true);
        }
        if (bp->requires_grad) {
            Tensor<T>& gb = t.accumulate(bp, bp->value.shape());
            gemm(g, ap->value, gb, true, false, true);
        }
    });
}

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_op<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, GradTable<T>& t) {
        for (Node<T>* p : {ap, bp}) {
            if (!p->requires_grad) continue;
            Tensor<T>& gp = t.accumulate(p, p->value.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
        }
    });
}

template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_op<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, GradTable<T>& t) {
        if (ap->requires_grad) {
            Tensor<T>& ga = t.accumulate(ap, ap->value.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (bp->requires_grad) {
            Tensor<T>& gb = t.accumulate(bp, bp->value.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

/// Elementwise product. mul(x, x) correctly yields gradient 2*x*g.
template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_op<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, GradTable<T>& t) {
        if (ap->requires_grad) {
            Tensor<T>& ga = t.accumulate(ap, ap->value.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bp->value[i];
        }
        if (bp->requires_grad) {
            Tensor<T>& gb = t.accumulate(bp, bp->value.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * ap->value[i];
        }
    });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T s) {
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    Node<T>* ap = a.get();
    return make_op<T>(std::move(out), {a}, [ap, s](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& ga = t.accumulate(ap, ap->value.shape());
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
    });
}

/// Broadcast-add a 1xC (or length-C) row vector to every row of x (RxC).
template <typename T>
NodePtr<T> add_rowvec(const NodePtr<T>& x, const NodePtr<T>& v) {
    require_2d(x, "add_rowvec");
    const std::int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    if (v->value.numel() != cols) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor<T> out = x->value;
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) out.at(r, c) += v->value[c];
    }
    Node<T>* xp = x.get();
    Node<T>* vp = v.get();
    return make_op<T>(std::move(out), {x, v}, [xp, vp, rows, cols](const Tensor<T>& g, GradTable<T>& t) {
        if (xp->requires_grad) {
            Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (vp->requires_grad) {
            Tensor<T>& gv = t.accumulate(vp, vp->value.shape());
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t c = 0; c < cols; ++c) gv[c] += g.at(r, c);
            }
        }
    });
}

template <typename T, typename FwdFn, typename DerivFn>
NodePtr<T> unary_elementwise(const NodePtr<T>& x, FwdFn f, DerivFn dfdx_from_inout) {
    Tensor<T> out = x->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
    Node<T>* xp = x.get();
    Tensor<T> saved = out;
    return make_op<T>(std::move(out), {x},
                      [xp, saved = std::move(saved), dfdx_from_inout](const Tensor<T>& g, GradTable<T>& t) {
                          Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
                          for (std::int64_t i = 0; i < g.numel(); ++i) {
                              gx[i] += g[i] * dfdx_from_inout(xp->value[i], saved[i]);
                          }
                      });
}

template <typename T>
NodePtr<T> relu(const NodePtr<T>& x) {
    return unary_elementwise(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
NodePtr<T> gelu(const NodePtr<T>& x) {
    // tanh approximation, matching the usual transformer formulation.
    constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687;
    return unary_elementwise(
        x,
        [](T v) {
            const double u = static_cast<double>(v);
            const double inner = kSqrt2OverPi * (u + 0.044715 * u * u * u);
            return static_cast<T>(0.5 * u * (1.0 + std::tanh(inner)));
        },
        [](T in, T) {
            const double u = static_cast<double>(in);
            const double inner = kSqrt2OverPi * (u + 0.044715 * u * u * u);
            const double th = std::tanh(inner);
            const double sech2 = 1.0 - th * th;
            const double dinner = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * u * u);
            return static_cast<T>(0.5 * (1.0 + th) + 0.5 * u * sech2 * dinner);
        });
}

template <typename T>
NodePtr<T> tanh_op(const NodePtr<T>& x) {
    return unary_elementwise(
        x, [](T v) { return std::tanh(v); },
        [](T, T out) { return T(1) - out * out; });
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& x) {
    return unary_elementwise(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
NodePtr<T> softplus(const NodePtr<T>& x) {
    return unary_elementwise(
        x,
        [](T v) {
            // Overflow-safe: softplus(v) = max(v,0) + log1p(exp(-|v|)).
            const double u = static_cast<double>(v);
            return static_cast<T>(std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u))));
        },
        [](T in, T) { return T(1) / (T(1) + std::exp(-in)); });
}

template <typename T>
NodePtr<T> add_scalar(const NodePtr<T>& x, T s) {
    return unary_elementwise(
        x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

/// Row-wise layer normalization with learned gain and bias.
template <typename T>
NodePtr<T> layer_norm(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                      T eps = T(1e-5)) {
    require_2d(x, "layer_norm");
    const std::int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    if (gamma->value.numel() != cols || beta->value.numel() != cols) {
        throw std::invalid_argument("layer_norm: gain/bias width mismatch");
    }
    Tensor<T> out({rows, cols});
    Tensor<T> inv_std({rows});
    Tensor<T> norm({rows, cols});
    for (std::int64_t r = 0; r < rows; ++r) {
        T mean = T(0);
        for (std::int64_t c = 0; c < cols; ++c) mean += x->value.at(r, c);
        mean /= static_cast<T>(cols);
        T var = T(0);
        for (std::int64_t c = 0; c < cols; ++c) {
            const T d = x->value.at(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::int64_t c = 0; c < cols; ++c) {
            const T nh = (x->value.at(r, c) - mean) * is;
            norm.at(r, c) = nh;
            out.at(r, c) = nh * gamma->value[c] + beta->value[c];
        }
    }
    Node<T>* xp = x.get();
    Node<T>* gp = gamma.get();
    Node<T>* bp = beta.get();
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [xp, gp, bp, rows, cols, inv_std = std::move(inv_std),
                       norm = std::move(norm)](const Tensor<T>& g, GradTable<T>& t) {
                          if (gp->requires_grad) {
                              Tensor<T>& gg = t.accumulate(gp, gp->value.shape());
                              for (std::int64_t r = 0; r < rows; ++r)
                                  for (std::int64_t c = 0; c < cols; ++c) gg[c] += g.at(r, c) * norm.at(r, c);
                          }
                          if (bp->requires_grad) {
                              Tensor<T>& gb = t.accumulate(bp, bp->value.shape());
                              for (std::int64_t r = 0; r < rows; ++r)
                                  for (std::int64_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
                          }
                          if (xp->requires_grad) {
                              Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
                              for (std::int64_t r = 0; r < rows; ++r) {
                                  T sum_gy = T(0), sum_gy_n = T(0);
                                  for (std::int64_t c = 0; c < cols; ++c) {
                                      const T gy = g.at(r, c) * gp->value[c];
                                      sum_gy += gy;
                                      sum_gy_n += gy * norm.at(r, c);
                                  }
                                  const T inv_n = T(1) / static_cast<T>(cols);
                                  for (std::int64_t c = 0; c < cols; ++c) {
                                      const T gy = g.at(r, c) * gp->value[c];
                                      gx.at(r, c) += inv_std[r] *
                                                     (gy - inv_n * sum_gy - norm.at(r, c) * inv_n * sum_gy_n);
                                  }
                              }
                          }
                      });
}

/// Boolean attention mask: allow(i, j) == source token i may attend target j.
class BoolMask {
public:
    BoolMask() = default;
    BoolMask(std::int64_t rows, std::int64_t cols)
        : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows * cols), false) {}

    std::int64_t rows() const { return rows_; }
    std::int64_t cols() const { return cols_; }

    void set(std::int64_t i, std::int64_t j, bool v) {
        bits_[static_cast<std::size_t>(i * cols_ + j)] = v;
    }
    bool allowed(std::int64_t i, std::int64_t j) const {
        return bits_[static_cast<std::size_t>(i * cols_ + j)];
    }

private:
    std::int64_t rows_ = 0;
    std::int64_t cols_ = 0;
    std::vector<bool> bits_;
};

/// Row-wise softmax over the allowed entries only. Forbidden entries never
/// enter the computation, so outputs are bit-exactly independent of their
/// values and their gradients are exactly zero. A row with no allowed entry
/// is left all-zero.
template <typename T>
NodePtr<T> masked_softmax_rows(const NodePtr<T>& scores, const BoolMask& mask) {
    require_2d(scores, "masked_softmax_rows");
    const std::int64_t rows = scores->value.dim(0), cols = scores->value.dim(1);
    if (mask.rows() != rows || mask.cols() != cols) {
        throw std::invalid_argument("masked_softmax_rows: mask shape mismatch");
    }
    Tensor<T> out({rows, cols});
    for (std::int64_t r = 0; r < rows; ++r) {
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::int64_t c = 0; c < cols; ++c) {
            if (mask.allowed(r, c)) maxv = std::max(maxv, scores->value.at(r, c));
        }
        if (!std::isfinite(static_cast<double>(maxv))) continue;
        T denom = T(0);
        for (std::int64_t c = 0; c < cols; ++c) {
            if (!mask.allowed(r, c)) continue;
            const T e = std::exp(scores->value.at(r, c) - maxv);
            out.at(r, c) = e;
            denom += e;
        }
        const T inv = T(1) / denom;
        for (std::int64_t c = 0; c < cols; ++c) {
            if (mask.allowed(r, c)) out.at(r, c) *= inv;
        }
    }
    Node<T>* sp = scores.get();
    Tensor<T> saved = out;
    return make_op<T>(std::move(out), {scores},
                      [sp, mask, rows, cols, saved = std::move(saved)](const Tensor<T>& g, GradTable<T>& t) {
                          Tensor<T>& gs = t.accumulate(sp, sp->value.shape());
                          for (std::int64_t r = 0; r < rows; ++r) {
                              T dot = T(0);
                              for (std::int64_t c = 0; c < cols; ++c) {
                                  if (mask.allowed(r, c)) dot += g.at(r, c) * saved.at(r, c);
                              }
                              for (std::int64_t c = 0; c < cols; ++c) {
                                  if (mask.allowed(r, c)) {
                                      gs.at(r, c) += saved.at(r, c) * (g.at(r, c) - dot);
                                  }
                              }
                          }
                      });
}

/// Embedding lookup: rows of `table` selected by `ids`.
template <typename T>
NodePtr<T> gather_rows(const NodePtr<T>& table, const std::vector<std::int64_t>& ids) {
    require_2d(table, "gather_rows");
    const std::int64_t vocab = table->value.dim(0), width = table->value.dim(1);
    Tensor<T> out({static_cast<std::int64_t>(ids.size()), width});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab) throw std::out_of_range("gather_rows: id out of range");
        for (std::int64_t c = 0; c < width; ++c) out.at(static_cast<std::int64_t>(i), c) = table->value.at(ids[i], c);
    }
    Node<T>* tp = table.get();
    return make_op<T>(std::move(out), {table}, [tp, ids, width](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gt = t.accumulate(tp, tp->value.shape());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::int64_t c = 0; c < width; ++c) {
                gt.at(ids[i], c) += g.at(static_cast<std::int64_t>(i), c);
            }
        }
    });
}

template <typename T>
NodePtr<T> slice_rows(const NodePtr<T>& x, std::int64_t r0, std::int64_t r1) {
    require_2d(x, "slice_rows");
    const std::int64_t cols = x->value.dim(1);
    if (r0 < 0 || r1 > x->value.dim(0) || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    Tensor<T> out({r1 - r0, cols});
    std::copy(x->value.data() + r0 * cols, x->value.data() + r1 * cols, out.data());
    Node<T>* xp = x.get();
    return make_op<T>(std::move(out), {x}, [xp, r0, r1, cols](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
        for (std::int64_t i = 0; i < (r1 - r0) * cols; ++i) gx[r0 * cols + i] += g[i];
    });
}

template <typename T>
NodePtr<T> slice_cols(const NodePtr<T>& x, std::int64_t c0, std::int64_t c1) {
    require_2d(x, "slice_cols");
    const std::int64_t rows = x->value.dim(0), cols = x->value.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Tensor<T> out({rows, c1 - c0});
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy(x->value.data() + r * cols + c0, x->value.data() + r * cols + c1,
                  out.data() + r * (c1 - c0));
    }
    Node<T>* xp = x.get();
    return make_op<T>(std::move(out), {x}, [xp, c0, c1, rows, cols](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t c = 0; c < c1 - c0; ++c) gx.at(r, c0 + c) += g.at(r, c);
        }
    });
}

template <typename T>
NodePtr<T> concat_rows(const std::vector<NodePtr<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    const std::int64_t cols = parts[0]->value.dim(1);
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p->value.dim(1) != cols) throw std::invalid_argument("concat_rows: width mismatch");
        rows += p->value.dim(0);
    }
    Tensor<T> out({rows, cols});
    std::int64_t r = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + r * cols);
        r += p->value.dim(0);
    }
    std::vector<Node<T>*> raw;
    raw.reserve(parts.size());
    for (const auto& p : parts) raw.push_back(p.get());
    return make_op<T>(std::move(out), parts, [raw, cols](const Tensor<T>& g, GradTable<T>& t) {
        std::int64_t r = 0;
        for (Node<T>* p : raw) {
            const std::int64_t n = p->value.dim(0);
            if (p->requires_grad) {
                Tensor<T>& gp = t.accumulate(p, p->value.shape());
                for (std::int64_t i = 0; i < n * cols; ++i) gp[i] += g[r * cols + i];
            }
            r += n;
        }
    });
}

template <typename T>
NodePtr<T> concat_cols(const std::vector<NodePtr<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const std::int64_t rows = parts[0]->value.dim(0);
    std::int64_t cols = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p->value.dim(0) != rows) throw std::invalid_argument("concat_cols: height mismatch");
        cols += p->value.dim(1);
    }
    Tensor<T> out({rows, cols});
    std::int64_t c = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p->value.dim(1);
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy(p->value.data() + r * w, p->value.data() + (r + 1) * w, out.data() + r * cols + c);
        }
        c += w;
    }
    std::vector<Node<T>*> raw;
    raw.reserve(parts.size());
    for (const auto& p : parts) raw.push_back(p.get());
    return make_op<T>(std::move(out), parts, [raw, rows, cols](const Tensor<T>& g, GradTable<T>& t) {
        std::int64_t c = 0;
        for (Node<T>* p : raw) {
            const std::int64_t w = p->value.dim(1);
            if (p->requires_grad) {
                Tensor<T>& gp = t.accumulate(p, p->value.shape());
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t i = 0; i < w; ++i) gp.at(r, i) += g.at(r, c + i);
                }
            }
            c += w;
        }
    });
}

template <typename T>
NodePtr<T> reshape(const NodePtr<T>& x, std::vector<std::int64_t> shape) {
    Tensor<T> out = x->value.reshaped(shape);
    Node<T>* xp = x.get();
    return make_op<T>(std::move(out), {x}, [xp](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
        for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
}

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& x) {
    T s = T(0);
    for (std::int64_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
    Node<T>* xp = x.get();
    return make_op<T>(Tensor<T>::scalar(s), {x}, [xp](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gx = t.accumulate(xp, xp->value.shape());
        for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
    });
}

template <typename T>
NodePtr<T> mean_all(const NodePtr<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x->value.numel()));
}

/// Mean squared error against a constant or node target.
template <typename T>
NodePtr<T> mse(const NodePtr<T>& pred, const NodePtr<T>& target) {
    auto d = sub(pred, target);
    return mean_all(mul(d, d));
}

/// Sum of squares (no normalization).
template <typename T>
NodePtr<T> sum_squares(const NodePtr<T>& x) {
    return sum_all(mul(x, x));
}

/// Mean absolute error.
template <typename T>
NodePtr<T> l1(const NodePtr<T>& pred, const NodePtr<T>& target) {
    auto d = sub(pred, target);
    return mean_all(unary_elementwise(
        d, [](T v) { return std::abs(v); },
        [](T in, T) { return in > T(0) ? T(1) : (in < T(0) ? T(-1) : T(0)); }));
}

/// Token-mean cross entropy from unnormalized logits (rows) against integer
/// class ids.
template <typename T>
NodePtr<T> cross_entropy_mean(const NodePtr<T>& logits, const std::vector<std::int64_t>& ids) {
    require_2d(logits, "cross_entropy_mean");
    const std::int64_t rows = logits->value.dim(0), classes = logits->value.dim(1);
    if (static_cast<std::int64_t>(ids.size()) != rows) {
        throw std::invalid_argument("cross_entropy_mean: id count mismatch");
    }
    Tensor<T> probs({rows, classes});
    T loss = T(0);
    for (std::int64_t r = 0; r < rows; ++r) {
        if (ids[r] < 0 || ids[r] >= classes) throw std::out_of_range("cross_entropy_mean: id out of range");
        T maxv = logits->value.at(r, 0);
        for (std::int64_t c = 1; c < classes; ++c) maxv = std::max(maxv, logits->value.at(r, c));
        T denom = T(0);
        for (std::int64_t c = 0; c < classes; ++c) {
            const T e = std::exp(logits->value.at(r, c) - maxv);
            probs.at(r, c) = e;
            denom += e;
        }
        for (std::int64_t c = 0; c < classes; ++c) probs.at(r, c) /= denom;
        loss -= std::log(probs.at(r, ids[r]));
    }
    loss /= static_cast<T>(rows);
    Node<T>* lp = logits.get();
    return make_op<T>(Tensor<T>::scalar(loss), {logits},
                      [lp, ids, rows, classes, probs = std::move(probs)](const Tensor<T>& g, GradTable<T>& t) {
                          Tensor<T>& gl = t.accumulate(lp, lp->value.shape());
                          const T inv = g[0] / static_cast<T>(rows);
                          for (std::int64_t r = 0; r < rows; ++r) {
                              for (std::int64_t c = 0; c < classes; ++c) {
                                  T p = probs.at(r, c);
                                  if (c == ids[r]) p -= T(1);
                                  gl.at(r, c) += inv * p;
                              }
                          }
                      });
}

/// Forward emits `quantized`; backward passes the incoming gradient to
/// `continuous` unchanged (identity through the quantization step).
template <typename T>
NodePtr<T> straight_through(const NodePtr<T>& continuous, const Tensor<T>& quantized) {
    if (!continuous->value.same_shape(quantized)) {
        throw std::invalid_argument("straight_through: shape mismatch");
    }
    Node<T>* cp = continuous.get();
    return make_op<T>(Tensor<T>(quantized), {continuous}, [cp](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gc = t.accumulate(cp, cp->value.shape());
        for (std::int64_t i = 0; i < g.numel(); ++i) gc[i] += g[i];
    });
}

/// Stop-gradient: same value, no backward path.
template <typename T>
NodePtr<T> detach(const NodePtr<T>& x) {
    return constant(Tensor<T>(x->value));
}

/// Split an HxWxC image into non-overlapping ps x ps patches, one row each.
template <typename T>
NodePtr<T> patchify(const NodePtr<T>& img, std::int64_t ps) {
    if (img->value.ndim() != 3) throw std::invalid_argument("patchify: expected HxWxC");
    const std::int64_t h = img->value.dim(0), w = img->value.dim(1), ch = img->value.dim(2);
    if (h % ps != 0 || w % ps != 0) throw std::invalid_argument("patchify: dimensions not divisible by patch size");
    const std::int64_t gr = h / ps, gc = w / ps;
    Tensor<T> out({gr * gc, ps * ps * ch});
    for (std::int64_t pr = 0; pr < gr; ++pr) {
        for (std::int64_t pc = 0; pc < gc; ++pc) {
            T* dst = out.data() + (pr * gc + pc) * ps * ps * ch;
            for (std::int64_t y = 0; y < ps; ++y) {
                const T* src = img->value.data() + ((pr * ps + y) * w + pc * ps) * ch;
                std::copy(src, src + ps * ch, dst + y * ps * ch);
            }
        }
    }
    Node<T>* ip = img.get();
    return make_op<T>(std::move(out), {img}, [ip, ps, h, w, ch, gr, gc](const Tensor<T>& g, GradTable<T>& t) {
        Tensor<T>& gi = t.accumulate(ip, ip->value.shape());
        for (std::int64_t pr = 0; pr < gr; ++pr) {
            for (std::int64_t pc = 0; pc < gc; ++pc) {
                const T* src = g.data() + (pr * gc + pc) * ps * ps * ch;
                for (std::int64_t y = 0; y < ps; ++y) {
                    T* dst = gi.data() + ((pr * ps + y) * w + pc * ps) * ch;
                    for (std::int64_t i = 0; i < ps * ch; ++i) dst[i] += src[y * ps * ch + i];
                }
            }
        }
    });
}

/// Inverse of patchify: rows of ps*ps*C patch pixels back to an HxWxC image.
template <typename T>
NodePtr<T> unpatchify(const NodePtr<T>& patches, std::int64_t grid_rows, std::int64_t grid_cols,
                      std::int64_t ps, std::int64_t ch) {
    require_2d(patches, "unpatchify");
    if (patches->value.dim(0) != grid_rows * grid_cols || patches->value.dim(1) != ps * ps * ch) {
        throw std::invalid_argument("unpatchify: shape mismatch");
    }
    const std::int64_t h = grid_rows * ps, w = grid_cols * ps;
    Tensor<T> out({h, w, ch});
    for (std::int64_t pr = 0; pr < grid_rows; ++pr) {
        for (std::int64_t pc = 0; pc < grid_cols; ++pc) {
            const T* src = patches->value.data() + (pr * grid_cols + pc) * ps * ps * ch;
            for (std::int64_t y = 0; y < ps; ++y) {
                T* dst = out.data() + ((pr * ps + y) * w + pc * ps) * ch;
                std::copy(src + y * ps * ch, src + (y + 1) * ps * ch, dst);
            }
        }
    }
    Node<T>* pp = patches.get();
    return make_op<T>(std::move(out), {patches},
                      [pp, grid_rows, grid_cols, ps, ch, w](const Tensor<T>& g, GradTable<T>& t) {
                          Tensor<T>& gp = t.accumulate(pp, pp->value.shape());
                          for (std::int64_t pr = 0; pr < grid_rows; ++pr) {
                              for (std::int64_t pc = 0; pc < grid_cols; ++pc) {
                                  T* dst = gp.data() + (pr * grid_cols + pc) * ps * ps * ch;
                                  for (std::int64_t y = 0; y < ps; ++y) {
                                      const T* src = g.data() + ((pr * ps + y) * w + pc * ps) * ch;
                                      for (std::int64_t i = 0; i < ps * ch; ++i) dst[y * ps * ch + i] += src[i];
                                  }
                              }
                          }
                      });
}

}  // namespace ssmvla::ag
