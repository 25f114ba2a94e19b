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

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ssmvla/core/autodiff.hpp"
#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/nn/attention.hpp"

namespace ssmvla::nn {

namespace ag = ssmvla::ag;

/// Named registry of trainable parameters. Iteration follows insertion order,
/// which is fixed by model construction, so optimizer sweeps are
/// deterministic; hashing and checkpointing sort by name for a canonical
/// layout.
class ParamStore {
public:
    ag::NodePtr<float> add(const std::string& name, Tensor<float> init) {
        for (const auto& [n, p] : entries_) {
            if (n == name) throw std::invalid_argument("ParamStore: duplicate name " + name);
        }
        auto node = ag::leaf(std::move(init));
        entries_.emplace_back(name, node);
        return node;
    }

    ag::NodePtr<float> find(const std::string& name) const {
        for (const auto& [n, p] : entries_) {
            if (n == name) return p;
        }
        return nullptr;
    }

    const std::vector<std::pair<std::string, ag::NodePtr<float>>>& entries() const { return entries_; }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& [name, p] : entries_) n += p->value.numel();
        return n;
    }

    /// Content hash over (name, shape, values), order-independent via sort.
    std::uint64_t content_hash() const {
        std::map<std::string, const Tensor<float>*> sorted;
        for (const auto& [n, p] : entries_) sorted[n] = &p->value;
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (const auto& [n, t] : sorted) {
            h = fnv1a(n, h);
            h = tensor_hash(*t, h);
        }
        return h;
    }

    void set_frozen(bool frozen) {
        for (auto& [n, p] : entries_) p->requires_grad = !frozen;
    }

private:
    std::vector<std::pair<std::string, ag::NodePtr<float>>> entries_;
};

inline Tensor<float> normal_init(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
    Tensor<float> t(std::move(shape));
    rng.fill_normal(t, stddev);
    return t;
}

struct Linear {
    ag::NodePtr<float> w;
    ag::NodePtr<float> b;

    Linear() = default;
    Linear(ParamStore& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
           bool bias = true, double init_std = 0.02) {
        w = params.add(name + ".w", normal_init(rng, {in, out}, init_std));
        if (bias) b = params.add(name + ".b", Tensor<float>({out}));
    }

    ag::NodePtr<float> operator()(const ag::NodePtr<float>& x) const {
        auto y = ag::matmul(x, w);
        return b ? ag::add_rowvec(y, b) : y;
    }
};

struct LayerNorm {
    ag::NodePtr<float> gamma;
    ag::NodePtr<float> beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& params, const std::string& name, std::int64_t width) {
        gamma = params.add(name + ".g", Tensor<float>::full({width}, 1.0f));
        beta = params.add(name + ".b", Tensor<float>({width}));
    }

    ag::NodePtr<float> operator()(const ag::NodePtr<float>& x) const {
        return ag::layer_norm(x, gamma, beta);
    }
};

struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    std::int64_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& params, const std::string& name, std::int64_t width,
                       std::int64_t heads_, Rng& rng)
        : wq(params, name + ".q", width, width, rng, false),
          wk(params, name + ".k", width, width, rng, false),
          wv(params, name + ".v", width, width, rng, false),
          wo(params, name + ".o", width, width, rng, false),
          heads(heads_) {}

    ag::NodePtr<float> operator()(const ag::NodePtr<float>& x, const ag::BoolMask& mask) const {
        return wo(ag::attention_heads(wq(x), wk(x), wv(x), mask, heads));
    }
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Linear fc1, fc2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& params, const std::string& name, std::int64_t width,
                     std::int64_t heads, Rng& rng)
        : ln1(params, name + ".ln1", width),
          ln2(params, name + ".ln2", width),
          attn(params, name + ".attn", width, heads, rng),
          fc1(params, name + ".fc1", width, 4 * width, rng),
          fc2(params, name + ".fc2", 4 * width, width, rng) {}

    ag::NodePtr<float> operator()(const ag::NodePtr<float>& x, const ag::BoolMask& mask) const {
        auto h = ag::add(x, attn(ln1(x), mask));
        return ag::add(h, fc2(ag::gelu(fc1(ln2(h)))));
    }
};

struct Transformer {
    std::vector<TransformerBlock> blocks;
    LayerNorm final_ln;

    Transformer() = default;
    Transformer(ParamStore& params, const std::string& name, std::int64_t layers, std::int64_t width,
                std::int64_t heads, Rng& rng) {
        blocks.reserve(static_cast<std::size_t>(layers));
        for (std::int64_t l = 0; l < layers; ++l) {
            blocks.emplace_back(params, name + ".blk" + std::to_string(l), width, heads, rng);
        }
        final_ln = LayerNorm(params, name + ".lnf", width);
    }

    ag::NodePtr<float> operator()(ag::NodePtr<float> x, const ag::BoolMask& mask) const {
        for (const auto& blk : blocks) x = blk(x, mask);
        return final_ln(x);
    }
};

}  // namespace ssmvla::nn
