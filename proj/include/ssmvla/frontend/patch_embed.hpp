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
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "ssmvla/core/autodiff.hpp"
#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/io.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/core/tensor.hpp"

namespace ssmvla::frontend {

/// Per-frame patch-token features from the frozen visual frontend.
struct PatchFeatures {
    Tensor<float> tokens;  // P x D_v
    int grid_rows = 0;
    int grid_cols = 0;
};

struct BackendSpec {
    std::string kind = "fixed-random";  // or "external-file"
    std::uint64_t seed = 7;
    int patch_size = 8;
    int feature_dim = 64;
    std::string features_path;  // external-file only: directory with tokens + manifest
};

/// Immutable after construction; safe for concurrent read-only use.
class Backend {
  public:
    virtual ~Backend() = default;
    virtual PatchFeatures extract(const Tensor<float>& rgb) const = 0;
    virtual std::uint64_t params_hash() const = 0;
    virtual int patch_size() const = 0;
    virtual int feature_dim() const = 0;
};

namespace detail {

inline void check_frame(const Tensor<float>& rgb, int ps) {
    if (rgb.ndim() != 3 || rgb.dim(2) != 3) {
        throw std::invalid_argument("extract: expected HxWx3 rgb tensor, got " +
                                    rgb.shape_str());
    }
    if (rgb.dim(0) % ps != 0 || rgb.dim(1) % ps != 0) {
        throw std::invalid_argument("extract: image dims " + rgb.shape_str() +
                                    " not divisible by patch size " + std::to_string(ps));
    }
    for (std::int64_t i = 0; i < rgb.numel(); ++i) {
        if (!(rgb[i] >= 0.0f && rgb[i] <= 1.0f)) {
            throw std::invalid_argument("extract: rgb values must lie in [0,1]");
        }
    }
}

/// Row-major patch extraction: (grid_rows*grid_cols) x (ps*ps*3).
inline Tensor<float> patchify(const Tensor<float>& rgb, int ps) {
    const std::int64_t H = rgb.dim(0), W = rgb.dim(1), C = rgb.dim(2);
    const std::int64_t gr = H / ps, gc = W / ps;
    Tensor<float> out({gr * gc, static_cast<std::int64_t>(ps) * ps * C});
    for (std::int64_t pr = 0; pr < gr; ++pr) {
        for (std::int64_t pc = 0; pc < gc; ++pc) {
            float* dst = out.data() + (pr * gc + pc) * out.dim(1);
            for (int dy = 0; dy < ps; ++dy) {
                const float* src = rgb.data() + ((pr * ps + dy) * W + pc * ps) * C;
                std::copy(src, src + static_cast<std::int64_t>(ps) * C,
                          dst + static_cast<std::int64_t>(dy) * ps * C);
            }
        }
    }
    return out;
}

}  // namespace detail

/// Frozen, seed-fixed two-layer patch embedder: a patchifying projection
/// followed by a pointwise layer, tanh between them. A frozen random
/// projection preserves distances well enough to serve as the fixed external
/// feature space at this scale, and keeps every test deterministic.
class FixedRandomBackend final : public Backend {
  public:
    FixedRandomBackend(std::uint64_t seed, int patch_size, int feature_dim)
        : ps_(patch_size), dv_(feature_dim) {
        if (patch_size <= 0 || feature_dim <= 0) {
            throw std::invalid_argument("fixed-random backend: bad dims");
        }
        const std::int64_t in_dim = static_cast<std::int64_t>(ps_) * ps_ * 3;
        const std::int64_t hidden = dv_;
        Rng rng(mix_seed(seed, fnv1a("frontend.fixed-random")));
        w1_ = Tensor<float>({in_dim, hidden});
        b1_ = Tensor<float>::zeros({hidden});
        w2_ = Tensor<float>({hidden, dv_});
        b2_ = Tensor<float>::zeros({dv_});
        rng.fill_normal(w1_, 1.0 / std::sqrt(static_cast<double>(in_dim)));
        rng.fill_normal(w2_, 1.0 / std::sqrt(static_cast<double>(hidden)));
        rng.fill_normal(b1_, 0.02);
        rng.fill_normal(b2_, 0.02);
        std::uint64_t h = fnv1a("fixed-random");
        h = tensor_hash(w1_, h);
        h = tensor_hash(b1_, h);
        h = tensor_hash(w2_, h);
        h = tensor_hash(b2_, h);
        hash_ = h;
    }

    PatchFeatures extract(const Tensor<float>& rgb) const override {
        detail::check_frame(rgb, ps_);
        PatchFeatures out;
        out.grid_rows = static_cast<int>(rgb.dim(0)) / ps_;
        out.grid_cols = static_cast<int>(rgb.dim(1)) / ps_;
        const Tensor<float> patches = detail::patchify(rgb, ps_);
        Tensor<float> hidden({patches.dim(0), w1_.dim(1)});
        ag::gemm(patches, w1_, hidden, false, false, false);
        for (std::int64_t r = 0; r < hidden.dim(0); ++r) {
            for (std::int64_t c = 0; c < hidden.dim(1); ++c) {
                hidden.at(r, c) = std::tanh(hidden.at(r, c) + b1_[c]);
            }
        }
        out.tokens = Tensor<float>({patches.dim(0), dv_});
        ag::gemm(hidden, w2_, out.tokens, false, false, false);
        for (std::int64_t r = 0; r < out.tokens.dim(0); ++r) {
            for (std::int64_t c = 0; c < dv_; ++c) out.tokens.at(r, c) += b2_[c];
        }
        return out;
    }

    /// Graph-tracked variant for callers that explicitly want gradients to
    /// flow through the frontend to the image. Weights stay constants.
    ag::NodePtr<float> extract_traced(const ag::NodePtr<float>& rgb) const {
        detail::check_frame(rgb->value, ps_);
        auto patches = ag::patchify(rgb, ps_);
        auto h = ag::tanh_op(ag::add_rowvec(ag::matmul(patches, ag::constant(w1_)),
                                            ag::constant(b1_)));
        return ag::add_rowvec(ag::matmul(h, ag::constant(w2_)), ag::constant(b2_));
    }

    std::uint64_t params_hash() const override { return hash_; }
    int patch_size() const override { return ps_; }
    int feature_dim() const override { return static_cast<int>(dv_); }

  private:
    int ps_;
    std::int64_t dv_;
    Tensor<float> w1_, b1_, w2_, b2_;
    std::uint64_t hash_ = 0;
};

/// Serves precomputed per-frame features from disk. The store is a directory
/// holding tokens.ssvt (F x P x D_v) and manifest.json mapping each frame's
/// content hash (hash_hex of the rgb tensor) to its row index, so lookup
/// depends only on pixel content.
class ExternalFileBackend final : public Backend {
  public:
    ExternalFileBackend(const std::filesystem::path& dir, int patch_size, int feature_dim,
                        int image_size = 64)
        : ps_(patch_size), dv_(feature_dim) {
        tokens_ = io::load_tensor<float>(dir / "tokens.ssvt");
        if (tokens_.ndim() != 3) {
            throw io::FormatError("external features: expected FxPxD tokens, got " +
                                  tokens_.shape_str());
        }
        grid_ = image_size / ps_;
        const std::int64_t want_p = static_cast<std::int64_t>(grid_) * grid_;
        if (tokens_.dim(1) != want_p || tokens_.dim(2) != dv_) {
            throw io::FormatError(
                "external features: shape mismatch, file has P=" +
                std::to_string(tokens_.dim(1)) + " D=" + std::to_string(tokens_.dim(2)) +
                ", expected P=" + std::to_string(want_p) + " D=" + std::to_string(dv_));
        }
        const auto manifest = io::load_json(dir / "manifest.json");
        for (const auto& [key, row] : manifest.at("frames").items()) {
            const auto r = row.get<std::int64_t>();
            if (r < 0 || r >= tokens_.dim(0)) {
                throw io::FormatError("external features: manifest row out of range");
            }
            rows_[key] = r;
        }
        hash_ = tensor_hash(tokens_, fnv1a("external-file"));
    }

    PatchFeatures extract(const Tensor<float>& rgb) const override {
        detail::check_frame(rgb, ps_);
        const auto it = rows_.find(hash_hex(tensor_hash(rgb)));
        if (it == rows_.end()) {
            throw std::invalid_argument("external features: frame not in store");
        }
        PatchFeatures out;
        out.grid_rows = grid_;
        out.grid_cols = grid_;
        const std::int64_t P = tokens_.dim(1);
        out.tokens = Tensor<float>({P, dv_});
        std::copy(tokens_.data() + it->second * P * dv_,
                  tokens_.data() + (it->second + 1) * P * dv_, out.tokens.data());
        return out;
    }

    std::uint64_t params_hash() const override { return hash_; }
    int patch_size() const override { return ps_; }
    int feature_dim() const override { return static_cast<int>(dv_); }

  private:
    int ps_;
    std::int64_t dv_;
    int grid_ = 0;
    Tensor<float> tokens_;
    std::unordered_map<std::string, std::int64_t> rows_;
    std::uint64_t hash_ = 0;
};

/// Writes an external-file feature store covering the given frames.
inline void save_feature_store(const std::filesystem::path& dir,
                               const std::vector<Tensor<float>>& frames,
                               const Backend& backend) {
    io::ensure_dir(dir);
    if (frames.empty()) throw std::invalid_argument("save_feature_store: no frames");
    const PatchFeatures first = backend.extract(frames[0]);
    const std::int64_t P = first.tokens.dim(0), D = first.tokens.dim(1);
    Tensor<float> all({static_cast<std::int64_t>(frames.size()), P, D});
    nlohmann::json manifest;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const PatchFeatures f = i == 0 ? first : backend.extract(frames[i]);
        std::copy(f.tokens.data(), f.tokens.data() + P * D,
                  all.data() + static_cast<std::int64_t>(i) * P * D);
        manifest["frames"][hash_hex(tensor_hash(frames[i]))] = i;
    }
    io::save_tensor(dir / "tokens.ssvt", all);
    io::save_json(dir / "manifest.json", manifest);
}

inline std::shared_ptr<const Backend> load_backend(const BackendSpec& spec) {
    if (spec.kind == "fixed-random") {
        return std::make_shared<FixedRandomBackend>(spec.seed, spec.patch_size,
                                                    spec.feature_dim);
    }
    if (spec.kind == "external-file") {
        return std::make_shared<ExternalFileBackend>(spec.features_path, spec.patch_size,
                                                     spec.feature_dim);
    }
    throw std::invalid_argument("load_backend: unknown backend '" + spec.kind + "'");
}

}  // namespace ssmvla::frontend
