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

#include "ssmvla/core/autodiff.hpp"

namespace ssmvla::ag {

/// Fused multi-head attention core: q, k, v are T x W with W = heads * hd.
/// Computes per head softmax(mask(Q K^T / sqrt(hd))) V and concatenates the
/// head outputs. One graph node; head slices are strided views, never copies.
///
/// The softmax touches allowed positions only, so forbidden targets cannot
/// influence any output bit and receive exactly zero gradient. Rows with no
/// allowed target produce zero output.
template <typename T>
NodePtr<T> attention_heads(const NodePtr<T>& q, const NodePtr<T>& k, const NodePtr<T>& v,
                           const BoolMask& mask, std::int64_t heads) {
    require_2d(q, "attention_heads");
    require_2d(k, "attention_heads");
    require_2d(v, "attention_heads");
    const std::int64_t rows = q->value.dim(0);
    const std::int64_t width = q->value.dim(1);
    if (k->value.dim(0) != rows || v->value.dim(0) != rows || k->value.dim(1) != width ||
        v->value.dim(1) != width) {
        throw std::invalid_argument("attention_heads: q/k/v shape mismatch");
    }
    if (width % heads != 0) throw std::invalid_argument("attention_heads: width not divisible by heads");
    if (mask.rows() != rows || mask.cols() != rows) {
        throw std::invalid_argument("attention_heads: mask shape mismatch");
    }
    const std::int64_t hd = width / heads;
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(hd)));

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using StridedConst = Eigen::Map<const Mat, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;
    using Strided = Eigen::Map<Mat, Eigen::Unaligned, Eigen::OuterStride<Eigen::Dynamic>>;

    Tensor<T> out({rows, width});
    Tensor<T> attn({heads, rows, rows});
    for (std::int64_t h = 0; h < heads; ++h) {
        StridedConst qh(q->value.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
        StridedConst kh(k->value.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
        StridedConst vh(v->value.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
        Eigen::Map<Mat> ah(attn.data() + h * rows * rows, rows, rows);
        ah.noalias() = qh * kh.transpose() * scale;
        for (std::int64_t i = 0; i < rows; ++i) {
            T maxv = -std::numeric_limits<T>::infinity();
            for (std::int64_t j = 0; j < rows; ++j) {
                if (mask.allowed(i, j)) maxv = std::max(maxv, ah(i, j));
            }
            if (!std::isfinite(static_cast<double>(maxv))) {
                for (std::int64_t j = 0; j < rows; ++j) ah(i, j) = T(0);
                continue;
            }
            T denom = T(0);
            for (std::int64_t j = 0; j < rows; ++j) {
                if (mask.allowed(i, j)) {
                    const T e = std::exp(ah(i, j) - maxv);
                    ah(i, j) = e;
                    denom += e;
                } else {
                    ah(i, j) = T(0);
                }
            }
            const T inv = T(1) / denom;
            for (std::int64_t j = 0; j < rows; ++j) {
                if (mask.allowed(i, j)) ah(i, j) *= inv;
            }
        }
        Strided oh(out.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
        oh.noalias() = ah * vh;
    }

    Node<T>* qp = q.get();
    Node<T>* kp = k.get();
    Node<T>* vp = v.get();
    return make_op<T>(
        std::move(out), {q, k, v},
        [qp, kp, vp, mask, heads, rows, width, hd, scale, attn = std::move(attn)](const Tensor<T>& g,
                                                                                  GradTable<T>& t) {
            Mat ga(rows, rows);
            const bool need_q = qp->requires_grad, need_k = kp->requires_grad, need_v = vp->requires_grad;
            Tensor<T>* gq = need_q ? &t.accumulate(qp, qp->value.shape()) : nullptr;
            Tensor<T>* gk = need_k ? &t.accumulate(kp, kp->value.shape()) : nullptr;
            Tensor<T>* gv = need_v ? &t.accumulate(vp, vp->value.shape()) : nullptr;
            for (std::int64_t h = 0; h < heads; ++h) {
                StridedConst qh(qp->value.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                StridedConst kh(kp->value.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                StridedConst vh(vp->value.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                StridedConst goh(g.data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                Eigen::Map<const Mat> ah(attn.data() + h * rows * rows, rows, rows);
                if (need_v) {
                    Strided gvh(gv->data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                    gvh.noalias() += ah.transpose() * goh;
                }
                if (need_q || need_k) {
                    ga.noalias() = goh * vh.transpose();
                    // softmax backward restricted to allowed entries
                    for (std::int64_t i = 0; i < rows; ++i) {
                        T dot = T(0);
                        for (std::int64_t j = 0; j < rows; ++j) {
                            if (mask.allowed(i, j)) dot += ga(i, j) * ah(i, j);
                        }
                        for (std::int64_t j = 0; j < rows; ++j) {
                            ga(i, j) = mask.allowed(i, j) ? ah(i, j) * (ga(i, j) - dot) * scale : T(0);
                        }
                    }
                    if (need_q) {
                        Strided gqh(gq->data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                        gqh.noalias() += ga * kh;
                    }
                    if (need_k) {
                        Strided gkh(gk->data() + h * hd, rows, hd, Eigen::OuterStride<>(width));
                        gkh.noalias() += ga.transpose() * qh;
                    }
                }
            }
        });
}

}  // namespace ssmvla::ag
