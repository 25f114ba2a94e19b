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
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/autodiff.hpp"
#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/core/tensor.hpp"
#include "ssmvla/frontend/patch_embed.hpp"
#include "ssmvla/lam/model.hpp"
#include "ssmvla/losses/objectives.hpp"
#include "ssmvla/nn/layers.hpp"
#include "ssmvla/nn/optim.hpp"
#include "ssmvla/policy/mask.hpp"

namespace ssmvla::policy {

struct PolicyConfig {
    std::int64_t history = 1;          // H frames before the current one
    std::int64_t frame_tokens = 64;    // P patch tokens per observed frame
    std::int64_t feature_dim = 64;     // D_v of incoming patch features
    std::int64_t language_tokens = 8;  // L_tok
    std::int64_t vocab_size = 12;
    std::int64_t image_size = 64;      // next-frame head geometry
    std::int64_t patch_size = 8;       // P_q = (image_size/patch_size)^2
    std::int64_t n_future = 3;         // N latent plan steps
    std::int64_t tokens_per_step = 4;  // T_z
    std::int64_t codebook_size = 32;   // K
    std::int64_t code_dim = 64;        // D of codebook entries (two-pass mode)
    std::int64_t layers = 6;
    std::int64_t width = 256;
    std::int64_t heads = 8;
    std::int64_t context_dim = 64;     // c_t width
    std::int64_t action_dim = 3;       // env action components
    std::int64_t chunk = 8;            // actions emitted per plan
    std::int64_t fm_steps = 10;        // Euler steps in the sampler
    std::int64_t fm_hidden = 64;       // velocity net hidden width
    std::int64_t fm_draws = 4;         // (tau, eps) draws averaged per sample
    bool depth_head = true;            // off under the no-depth ablation
    bool token_causal = false;         // mask ablation: plain lower-triangular

    void validate() const {
        if (history < 0) throw std::invalid_argument("PolicyConfig: history must be >= 0");
        if (frame_tokens < 1 || feature_dim < 1 || language_tokens < 1 || vocab_size < 2) {
            throw std::invalid_argument("PolicyConfig: bad input geometry");
        }
        if (image_size < patch_size || patch_size < 1 || image_size % patch_size != 0) {
            throw std::invalid_argument("PolicyConfig: image_size must be a multiple of patch_size");
        }
        if (n_future < 1 || tokens_per_step < 1 || codebook_size < 2 || code_dim < 1) {
            throw std::invalid_argument("PolicyConfig: bad latent plan geometry");
        }
        if (layers < 1 || width < 1 || heads < 1 || width % heads != 0) {
            throw std::invalid_argument("PolicyConfig: bad transformer geometry");
        }
        if (context_dim < 1 || action_dim < 1 || chunk < 1 || fm_steps < 1 || fm_hidden < 1 ||
            fm_draws < 1) {
            throw std::invalid_argument("PolicyConfig: bad head geometry");
        }
    }

    std::int64_t vision_query_tokens() const {
        const std::int64_t grid = image_size / patch_size;
        return grid * grid;
    }

    SegmentLayout layout() const {
        SegmentLayout l;
        l.history_frames = history + 1;
        l.frame_tokens = frame_tokens;
        l.language_tokens = language_tokens;
        l.vision_query_tokens = vision_query_tokens();
        l.latent_blocks = n_future;
        l.block_tokens = tokens_per_step;
        return l;
    }
};

/// Everything one forward pass produces: the predicted next frame (depth
/// absent when the head is disabled), unnormalized latent-plan logits, and
/// the action context vector.
struct PolicyOutput {
    ag::NodePtr<float> rgb;            // H x W x 3
    ag::NodePtr<float> depth;          // H x W, or null when depth_head off
    ag::NodePtr<float> latent_logits;  // (N*T_z) x K
    ag::NodePtr<float> context;        // 1 x context_dim
};

/// Conditional velocity field for the flow-matching action head: a two-layer
/// MLP over [x, tau, c_t].
struct FlowHead {
    nn::Linear fc1, fc2;

    FlowHead() = default;
    FlowHead(nn::ParamStore& params, const std::string& name, std::int64_t action_len,
             std::int64_t context_dim, std::int64_t hidden, Rng& rng)
        : fc1(params, name + ".fc1", action_len + 1 + context_dim, hidden, rng),
          fc2(params, name + ".fc2", hidden, action_len, rng) {}

    ag::NodePtr<float> velocity(const ag::NodePtr<float>& x, float tau,
                                const ag::NodePtr<float>& c) const {
        auto tau_node = ag::constant(Tensor<float>::from_vector({1, 1}, {tau}));
        auto in = ag::concat_cols<float>({x, tau_node, c});
        return fc2(ag::gelu(fc1(in)));
    }
};

class PolicyModel {
public:
    PolicyModel(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, fnv1a("policy.init")));
        const std::int64_t W = cfg_.width;
        const SegmentLayout layout = cfg_.layout();

        vis_in_ = nn::Linear(params_, "pol.vis", cfg_.feature_dim, W, rng);
        pos_emb_ = params_.add("pol.pos", nn::normal_init(rng, {cfg_.frame_tokens, W}, 0.02));
        hist_emb_ =
            params_.add("pol.hist", nn::normal_init(rng, {cfg_.history + 1, W}, 0.02));
        tok_emb_ = params_.add("pol.tok", nn::normal_init(rng, {cfg_.vocab_size, W}, 0.02));
        lang_pos_ =
            params_.add("pol.lpos", nn::normal_init(rng, {cfg_.language_tokens, W}, 0.02));
        vision_q_ = params_.add(
            "pol.visq", nn::normal_init(rng, {layout.count(Segment::kVisionQuery), W}, 0.02));
        latent_q_ = params_.add(
            "pol.latq", nn::normal_init(rng, {layout.count(Segment::kLatentQuery), W}, 0.02));
        action_q_ = params_.add("pol.actq", nn::normal_init(rng, {1, W}, 0.02));
        // Two-pass inference projection for sampled codes; zero so the
        // optional mode coincides with the single-pass read until trained.
        code_proj_ = nn::Linear(params_, "pol.code", cfg_.code_dim, W, rng);
        code_proj_.w->value.fill(0.f);
        code_proj_.b->value.fill(0.f);

        trunk_ = nn::Transformer(params_, "pol", cfg_.layers, W, cfg_.heads, rng);
        const std::int64_t ps = cfg_.patch_size;
        rgb_head_ = nn::Linear(params_, "pol.rgb", W, ps * ps * 3, rng);
        rgb_head_.b->value.fill(0.5f);
        if (cfg_.depth_head) {
            depth_head_ = nn::Linear(params_, "pol.depth", W, ps * ps, rng);
            depth_head_.b->value.fill(2.0f);
        }
        latent_head_ = nn::Linear(params_, "pol.lat", W, cfg_.codebook_size, rng);
        ctx_head_ = nn::Linear(params_, "pol.ctx", W, cfg_.context_dim, rng);
        flow_ = FlowHead(params_, "pol.flow", cfg_.chunk * cfg_.action_dim, cfg_.context_dim,
                         cfg_.fm_hidden, rng);

        mask_ = cfg_.token_causal ? build_token_causal_mask(layout) : build_mask(layout);
        perceptual_ = losses::default_perceptual<float>(mix_seed(seed, fnv1a("policy.lpips")),
                                                        /*patch_size=*/8);
    }

    const PolicyConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const ag::BoolMask& mask() const { return mask_; }
    const FlowHead& flow() const { return flow_; }
    const losses::PerceptualFn<float>& perceptual() const { return perceptual_; }

    /// Builds the S x W input embedding sequence from observations and
    /// instruction tokens.
    ag::NodePtr<float> assemble(const std::vector<frontend::PatchFeatures>& window,
                                const std::vector<std::int64_t>& tokens) const {
        if (static_cast<std::int64_t>(window.size()) != cfg_.history + 1) {
            throw std::invalid_argument("policy forward: window must hold " +
                                        std::to_string(cfg_.history + 1) + " frames");
        }
        if (static_cast<std::int64_t>(tokens.size()) != cfg_.language_tokens) {
            throw std::invalid_argument("policy forward: expected " +
                                        std::to_string(cfg_.language_tokens) + " tokens");
        }
        for (const std::int64_t t : tokens) {
            if (t < 0 || t >= cfg_.vocab_size) {
                throw std::invalid_argument("policy forward: token id out of range");
            }
        }
        std::vector<ag::NodePtr<float>> rows;
        for (std::int64_t i = 0; i <= cfg_.history; ++i) {
            const Tensor<float>& tok = window[static_cast<std::size_t>(i)].tokens;
            if (tok.ndim() != 2 || tok.dim(0) != cfg_.frame_tokens ||
                tok.dim(1) != cfg_.feature_dim) {
                throw std::invalid_argument("policy forward: frame " + std::to_string(i) +
                                            " tokens have shape " + tok.shape_str());
            }
            auto x = ag::add(vis_in_(ag::constant(tok)), pos_emb_);
            auto he = ag::reshape(ag::slice_rows(hist_emb_, i, i + 1), {cfg_.width});
            rows.push_back(ag::add_rowvec(x, he));
        }
        rows.push_back(ag::add(ag::gather_rows(tok_emb_, tokens), lang_pos_));
        rows.push_back(vision_q_);
        rows.push_back(latent_q_);
        rows.push_back(action_q_);
        return ag::concat_rows(rows);
    }

    /// Runs the trunk on an already-assembled sequence (probe entry point).
    ag::NodePtr<float> forward_seq(const ag::NodePtr<float>& x) const {
        if (x->value.ndim() != 2 || x->value.dim(0) != cfg_.layout().total() ||
            x->value.dim(1) != cfg_.width) {
            throw std::invalid_argument("policy forward: sequence shape " +
                                        x->value.shape_str());
        }
        return trunk_(x, mask_);
    }

    /// Reads the stage outputs from the trunk's final hidden states.
    PolicyOutput heads(const ag::NodePtr<float>& seq) const {
        const SegmentLayout layout = cfg_.layout();
        const std::int64_t ps = cfg_.patch_size, grid = cfg_.image_size / ps;
        PolicyOutput out;
        auto vq = ag::slice_rows(seq, layout.offset(Segment::kVisionQuery),
                                 layout.offset(Segment::kVisionQuery) +
                                     layout.count(Segment::kVisionQuery));
        out.rgb = ag::unpatchify(rgb_head_(vq), grid, grid, ps, 3);
        if (cfg_.depth_head) {
            out.depth = ag::reshape(ag::unpatchify(depth_head_(vq), grid, grid, ps, 1),
                                    {cfg_.image_size, cfg_.image_size});
        }
        auto lq = ag::slice_rows(seq, layout.offset(Segment::kLatentQuery),
                                 layout.offset(Segment::kLatentQuery) +
                                     layout.count(Segment::kLatentQuery));
        out.latent_logits = latent_head_(lq);
        auto aq = ag::slice_rows(seq, layout.offset(Segment::kActionQuery),
                                 layout.offset(Segment::kActionQuery) + 1);
        out.context = ctx_head_(aq);
        return out;
    }

    PolicyOutput forward(const std::vector<frontend::PatchFeatures>& window,
                         const std::vector<std::int64_t>& tokens) const {
        return heads(forward_seq(assemble(window, tokens)));
    }

    /// Latent-query inputs with blocks before `upto_block` replaced by
    /// embeddings of already-chosen codes (two-pass autoregressive mode).
    ag::NodePtr<float> assemble_with_codes(const std::vector<frontend::PatchFeatures>& window,
                                           const std::vector<std::int64_t>& tokens,
                                           const std::vector<std::int64_t>& chosen,
                                           const Tensor<float>& codebook) const {
        auto base = assemble(window, tokens);
        if (chosen.empty()) return base;
        const SegmentLayout layout = cfg_.layout();
        if (static_cast<std::int64_t>(chosen.size()) > layout.count(Segment::kLatentQuery)) {
            throw std::invalid_argument("assemble_with_codes: too many chosen codes");
        }
        Tensor<float> x = base->value;
        const std::int64_t off = layout.offset(Segment::kLatentQuery);
        auto code_rows = ag::gather_rows(ag::constant(codebook), chosen);
        auto delta = code_proj_(code_rows);
        for (std::size_t i = 0; i < chosen.size(); ++i) {
            for (std::int64_t c = 0; c < cfg_.width; ++c) {
                x.at(off + static_cast<std::int64_t>(i), c) +=
                    delta->value.at(static_cast<std::int64_t>(i), c);
            }
        }
        return ag::constant(std::move(x));
    }

private:
    PolicyConfig cfg_;
    nn::ParamStore params_;

    nn::Linear vis_in_;
    ag::NodePtr<float> pos_emb_;
    ag::NodePtr<float> hist_emb_;
    ag::NodePtr<float> tok_emb_;
    ag::NodePtr<float> lang_pos_;
    ag::NodePtr<float> vision_q_;
    ag::NodePtr<float> latent_q_;
    ag::NodePtr<float> action_q_;
    nn::Linear code_proj_;
    nn::Transformer trunk_;
    nn::Linear rgb_head_;
    nn::Linear depth_head_;
    nn::Linear latent_head_;
    nn::Linear ctx_head_;
    FlowHead flow_;
    ag::BoolMask mask_;
    losses::PerceptualFn<float> perceptual_;
};

/// Per-token argmax over the latent logits; ties resolve to the lowest code.
inline std::vector<std::int64_t> infer_latents(const PolicyOutput& out) {
    const Tensor<float>& logits = out.latent_logits->value;
    if (!logits.all_finite()) throw std::invalid_argument("infer_latents: non-finite logits");
    std::vector<std::int64_t> ids(static_cast<std::size_t>(logits.dim(0)));
    for (std::int64_t r = 0; r < logits.dim(0); ++r) {
        std::int64_t best = 0;
        for (std::int64_t k = 1; k < logits.dim(1); ++k) {
            if (logits.at(r, k) > logits.at(r, best)) best = k;  // strict >: ties keep lowest
        }
        ids[static_cast<std::size_t>(r)] = best;
    }
    return ids;
}

/// Optional two-pass mode: re-runs the trunk once per plan block, feeding the
/// codes chosen so far back in as embeddings. With the code projection at its
/// zero initialization this coincides with single-pass argmax decoding.
inline std::vector<std::int64_t> infer_latents_autoregressive(
    const PolicyModel& policy, const std::vector<frontend::PatchFeatures>& window,
    const std::vector<std::int64_t>& tokens, const Tensor<float>& codebook) {
    const PolicyConfig& cfg = policy.config();
    std::vector<std::int64_t> chosen;
    for (std::int64_t block = 0; block < cfg.n_future; ++block) {
        auto x = policy.assemble_with_codes(window, tokens, chosen, codebook);
        PolicyOutput out = policy.heads(policy.forward_seq(x));
        const Tensor<float>& logits = out.latent_logits->value;
        for (std::int64_t t = 0; t < cfg.tokens_per_step; ++t) {
            const std::int64_t r = block * cfg.tokens_per_step + t;
            std::int64_t best = 0;
            for (std::int64_t k = 1; k < logits.dim(1); ++k) {
                if (logits.at(r, k) > logits.at(r, best)) best = k;
            }
            chosen.push_back(best);
        }
    }
    return chosen;
}

/// Full policy invocation: one forward pass, then Euler integration of the
/// flow head from a noise draw. Returns a chunk x action_dim tensor.
inline Tensor<float> act(const PolicyModel& policy,
                         const std::vector<frontend::PatchFeatures>& window,
                         const std::vector<std::int64_t>& tokens, Rng& rng, int steps = 10) {
    const PolicyConfig& cfg = policy.config();
    PolicyOutput out = policy.forward(window, tokens);
    const Tensor<float> context = out.context->value;
    losses::SampleVelocityFn<float> field = [&policy, &context](const Tensor<float>& x,
                                                                float tau) {
        return policy.flow().velocity(ag::constant(x), tau, ag::constant(context))->value;
    };
    Tensor<float> eps({1, cfg.chunk * cfg.action_dim});
    rng.fill_normal(eps, 1.0);
    Tensor<float> flat = losses::fm_sample(field, eps, steps);
    return flat.reshaped({cfg.chunk, cfg.action_dim});
}

/// One supervised sample for the cascaded policy objective.
struct VlaSample {
    std::vector<frontend::PatchFeatures> window;  // H+1 observed frames
    std::vector<std::int64_t> tokens;             // instruction ids
    Tensor<float> next_rgb;                       // s_{t+1} target, H x W x 3
    Tensor<float> next_depth;                     // s_{t+1} depth target, H x W
    bool pseudo_depth = false;                    // depth target must be built
    Tensor<float> mono_depth;                     // unscaled mono depth (pseudo path)
    std::vector<std::int64_t> sparse_px;          // flat pixel ids (pseudo path)
    std::vector<double> sparse_depth;             // metric values at sparse_px
    std::vector<std::int64_t> latent_targets;     // frozen-LAM ids; empty = derive
    std::vector<frontend::PatchFeatures> lam_features;  // N+1 frames for deriving
    Tensor<float> actions;                        // chunk x action_dim expert chunk
};

struct VlaStepStats {
    double total = 0;
    double action = 0;
    double latent = 0;
    double vision = 0;
    double vision_rgb = 0;
    double vision_depth = 0;
    double align_residual = 0;  // summed over pseudo-depth samples
};

/// Batch-mean cascaded objective: L_action + lambda_latent * L_latent +
/// lambda_vision * L_vision. Latent targets come from the frozen
/// latent-action encoder (precomputed on the sample, or derived here); its
/// parameters are never written.
inline std::pair<ag::NodePtr<float>, VlaStepStats> vla_batch_loss(
    const PolicyModel& policy, const lam::LamModel& frozen_lam,
    const std::vector<VlaSample>& batch, const losses::LossWeights& w, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("vla_batch_loss: empty batch");
    const PolicyConfig& cfg = policy.config();
    const std::int64_t plan_tokens = cfg.n_future * cfg.tokens_per_step;

    VlaStepStats stats;
    ag::NodePtr<float> total;
    for (const VlaSample& sample : batch) {
        PolicyOutput out = policy.forward(sample.window, sample.tokens);

        // Stage 1: predicted-frame supervision.
        auto vision = losses::rgb_loss(out.rgb, sample.next_rgb, w, policy.perceptual());
        const double vision_rgb = static_cast<double>(vision->value[0]);
        double vision_depth = 0.0;
        if (cfg.depth_head) {
            Tensor<float> target = sample.next_depth;
            if (sample.pseudo_depth) {
                if (sample.sparse_px.size() != sample.sparse_depth.size()) {
                    throw std::invalid_argument("vla_train_step: sparse depth size mismatch");
                }
                std::vector<double> mono(sample.sparse_px.size());
                for (std::size_t i = 0; i < sample.sparse_px.size(); ++i) {
                    const std::int64_t px = sample.sparse_px[i];
                    if (px < 0 || px >= sample.mono_depth.numel()) {
                        throw std::invalid_argument("vla_train_step: sparse pixel out of range");
                    }
                    mono[i] = static_cast<double>(sample.mono_depth[px]);
                }
                losses::AlignmentFit fit = losses::align_depth(mono, sample.sparse_depth);
                target = losses::apply_alignment(sample.mono_depth, fit);
                stats.align_residual += fit.residual;
            }
            auto depth = losses::depth_loss(out.depth, target, sample.next_rgb);
            vision_depth = static_cast<double>(depth->value[0]);
            vision = ag::add(vision, ag::scale(depth, static_cast<float>(w.lambda_d)));
        }

        // Stage 2: latent plan against the frozen encoder's codes.
        ag::NodePtr<float> latent;
        if (w.lambda_latent > 0) {
            std::vector<std::int64_t> targets = sample.latent_targets;
            if (targets.empty()) {
                targets = frozen_lam.encode(sample.lam_features).indices;
            }
            if (static_cast<std::int64_t>(targets.size()) != plan_tokens) {
                throw std::invalid_argument("vla_train_step: expected " +
                                            std::to_string(plan_tokens) + " latent targets");
            }
            latent = losses::latent_ce(out.latent_logits, targets);
        } else {
            latent = ag::constant(Tensor<float>::scalar(0.f));
        }

        // Stage 3: flow-matching action regression conditioned on c_t.
        if (sample.actions.ndim() != 2 || sample.actions.dim(0) != cfg.chunk ||
            sample.actions.dim(1) != cfg.action_dim) {
            throw std::invalid_argument("vla_train_step: action chunk shape " +
                                        sample.actions.shape_str());
        }
        const Tensor<float> flat = sample.actions.reshaped({1, cfg.chunk * cfg.action_dim});
        auto ctx = out.context;
        losses::VelocityFn<float> field = [&policy, ctx](const ag::NodePtr<float>& x,
                                                         float t) {
            return policy.flow().velocity(x, t, ctx);
        };
        ag::NodePtr<float> action;
        for (std::int64_t d = 0; d < cfg.fm_draws; ++d) {
            Tensor<float> eps({1, cfg.chunk * cfg.action_dim});
            rng.fill_normal(eps, 1.0);
            const float tau = static_cast<float>(rng.uniform());
            auto one = losses::fm_loss(field, flat, eps, tau);
            action = action ? ag::add(action, one) : one;
        }
        action = ag::scale(action, 1.f / static_cast<float>(cfg.fm_draws));

        stats.vision += static_cast<double>(vision->value[0]);
        stats.vision_rgb += vision_rgb;
        stats.vision_depth += vision_depth;
        stats.latent += static_cast<double>(latent->value[0]);
        stats.action += static_cast<double>(action->value[0]);
        auto sample_loss = losses::vla_loss(action, latent, vision, w);
        total = total ? ag::add(total, sample_loss) : sample_loss;
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    total = ag::scale(total, static_cast<float>(inv_b));
    stats.total = static_cast<double>(total->value[0]);
    stats.action *= inv_b;
    stats.latent *= inv_b;
    stats.vision *= inv_b;
    stats.vision_rgb *= inv_b;
    stats.vision_depth *= inv_b;
    return {total, stats};
}

/// Loss measurement without an optimizer step (fix the Rng seed to make the
/// flow-matching term comparable across calls).
inline VlaStepStats vla_eval(const PolicyModel& policy, const lam::LamModel& frozen_lam,
                             const std::vector<VlaSample>& batch, const losses::LossWeights& w,
                             Rng& rng) {
    return vla_batch_loss(policy, frozen_lam, batch, w, rng).second;
}

/// One optimizer step of the cascaded objective over the policy's parameters.
inline VlaStepStats vla_train_step(PolicyModel& policy, const lam::LamModel& frozen_lam,
                                   const std::vector<VlaSample>& batch,
                                   const losses::LossWeights& w, nn::AdamW& opt, double lr,
                                   std::int64_t step, Rng& rng) {
    auto [total, stats] = vla_batch_loss(policy, frozen_lam, batch, w, rng);
    if (!std::isfinite(stats.total)) {
        throw std::runtime_error(
            "vla_train_step: non-finite loss at step " + std::to_string(step) +
            " (action=" + std::to_string(stats.action) +
            ", latent=" + std::to_string(stats.latent) +
            ", vision=" + std::to_string(stats.vision) + ")");
    }
    ag::GradTable<float> grads;
    ag::backward(total, grads);
    opt.step(policy.params(), grads, lr);
    return stats;
}

}  // namespace ssmvla::policy
