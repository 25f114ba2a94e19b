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

#include <cmath>
#include <cstdint>

#include "ssmvla/nn/layers.hpp"

namespace ssmvla::nn {

/// Linear warmup to the peak rate, then cosine decay to zero. The last warmup
/// step is exactly the peak; the final step is exactly zero.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, double peak,
                          double warmup_frac) {
    if (total_steps <= 0) return peak;
    std::int64_t warmup = static_cast<std::int64_t>(std::llround(warmup_frac * static_cast<double>(total_steps)));
    if (warmup < 1) warmup = 1;
    if (warmup > total_steps) warmup = total_steps;
    if (step < warmup) {
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total_steps == warmup) return peak;
    const double progress =
        static_cast<double>(step - warmup + 1) / static_cast<double>(total_steps - warmup);
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// Adam with decoupled weight decay. Moment buffers are indexed by position in
/// the ParamStore, so the sweep order (and therefore the arithmetic) is fixed.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(ParamStore& params, ag::GradTable<float>& grads, double lr) {
        ensure_state(params);
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params.entries().size(); ++pi) {
            auto& p = params.entries()[pi].second;
            if (!p->requires_grad) continue;
            const Tensor<float>* g = grads.find(p.get());
            if (!g) continue;
            Tensor<float>& m = m_[pi];
            Tensor<float>& v = v_[pi];
            for (std::int64_t i = 0; i < p->value.numel(); ++i) {
                const double gi = static_cast<double>((*g)[i]);
                const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<float>(mi);
                v[i] = static_cast<float>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
                p->value[i] = static_cast<float>(p->value[i] - lr * update -
                                                 lr * weight_decay_ * p->value[i]);
            }
        }
    }

    std::int64_t step_count() const { return t_; }
    double weight_decay() const { return weight_decay_; }

    /// Moment buffers in ParamStore order (valid after first step), exposed
    /// for checkpointing.
    std::vector<Tensor<float>>& m_state() { return m_; }
    std::vector<Tensor<float>>& v_state() { return v_; }
    void restore(std::vector<Tensor<float>> m, std::vector<Tensor<float>> v, std::int64_t t) {
        m_ = std::move(m);
        v_ = std::move(v);
        t_ = t;
    }
    void ensure_state(const ParamStore& params) {
        if (!m_.empty()) return;
        m_.reserve(params.entries().size());
        v_.reserve(params.entries().size());
        for (const auto& [name, p] : params.entries()) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
    std::vector<Tensor<float>> m_;
    std::vector<Tensor<float>> v_;
};

/// Global-norm gradient clipping over every tracked parameter gradient.
inline double clip_grad_norm(const ParamStore& params, ag::GradTable<float>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params.entries()) {
        const Tensor<float>* g = grads.find(p.get());
        if (!g) continue;
        for (std::int64_t i = 0; i < g->numel(); ++i) sq += static_cast<double>((*g)[i]) * (*g)[i];
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const float s = static_cast<float>(max_norm / norm);
        for (const auto& [name, p] : params.entries()) {
            Tensor<float>* g = grads.find_mutable(p.get());
            if (!g) continue;
            for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] *= s;
        }
    }
    return norm;
}

}  // namespace ssmvla::nn
