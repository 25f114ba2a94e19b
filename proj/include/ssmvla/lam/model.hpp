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
#include "ssmvla/losses/objectives.hpp"
#include "ssmvla/nn/layers.hpp"
#include "ssmvla/nn/optim.hpp"

namespace ssmvla::lam {

namespace ag = ssmvla::ag;

/// Latent action model hyperparameters. The world-model encoder compresses
/// the motion between an anchor frame and its N successors into N blocks of
/// T_z discrete tokens from a K-entry codebook; the decoder re-renders each
/// successor from the anchor frame and one block alone.
struct LamConfig {
    std::int64_t n_future = 3;          // N: future frames encoded per clip
    std::int64_t tokens_per_step = 4;   // T_z: discrete tokens per future frame
    std::int64_t codebook_size = 32;    // K
    std::int64_t code_dim = 64;         // D: codebook entry width
    std::int64_t width = 64;            // transformer width (query dim D_q)
    std::int64_t enc_layers = 4;
    std::int64_t dec_layers = 4;
    std::int64_t heads = 4;
    std::int64_t image_size = 64;       // decoder input geometry
    std::int64_t patch_size = 8;        // decoder patch size
    std::int64_t frame_tokens = 64;     // P: patch tokens per encoder frame
    std::int64_t feature_dim = 64;      // D_v: width of incoming patch features
    std::int64_t frame_stride = 1;      // episode stride when picking key frames
    double commitment_weight = 0.25;
    std::int64_t dead_code_steps = 200; // reseed codes unused this long
    bool reseed_dead_codes = true;
    losses::LossWeights loss_weights;   // lambda_lpips / lambda_d for recon

    void validate() const {
        if (n_future < 1 || tokens_per_step < 1) {
            throw std::invalid_argument("LamConfig: n_future and tokens_per_step must be >= 1");
        }
        if (codebook_size < 2) throw std::invalid_argument("LamConfig: codebook_size must be >= 2");
        if (code_dim < 1 || width < 1 || feature_dim < 1) {
            throw std::invalid_argument("LamConfig: widths must be positive");
        }
        if (enc_layers < 1 || dec_layers < 1 || heads < 1 || width % heads != 0) {
            throw std::invalid_argument("LamConfig: bad transformer geometry");
        }
        if (image_size < patch_size || image_size % patch_size != 0) {
            throw std::invalid_argument("LamConfig: image_size must be a multiple of patch_size");
        }
        if (frame_tokens < 1 || frame_stride < 1 || dead_code_steps < 1) {
            throw std::invalid_argument("LamConfig: counts must be positive");
        }
        if (commitment_weight < 0) throw std::invalid_argument("LamConfig: commitment_weight >= 0");
        loss_weights.validate();
    }
};

/// Learned table of K discrete latent-action codes plus usage statistics.
struct Codebook {
    ag::NodePtr<float> codes;                  // K x D parameter
    std::vector<std::int64_t> usage_counts;    // lifetime hits per code
    std::vector<std::int64_t> last_used_step;  // for dead-code recycling

    std::int64_t size() const { return codes->value.dim(0); }
    std::int64_t dim() const { return codes->value.dim(1); }
};

/// The N x T_z learnable query tokens that read latent actions out of the
/// encoder.
struct LatentQuerySet {
    ag::NodePtr<float> tokens;  // (N*T_z) x width
    std::int64_t n = 0;
    std::int64_t t_z = 0;
    std::int64_t dim = 0;
};

struct QuantizeResult {
    std::vector<std::int64_t> indices;  // flattened, length M
    Tensor<float> quantized;            // M x D, rows copied from the codebook
};

/// Nearest-code lookup under squared Euclidean distance; ties resolve to the
/// lowest index. Accepts M x D or N x T_z x D input (flattened row-wise).
inline QuantizeResult quantize(const Tensor<float>& continuous, const Tensor<float>& codes) {
    if (codes.ndim() != 2) throw std::invalid_argument("quantize: codebook must be K x D");
    const std::int64_t k_count = codes.dim(0), d = codes.dim(1);
    if (continuous.ndim() < 2 || continuous.dim(continuous.ndim() - 1) != d) {
        throw std::invalid_argument("quantize: trailing input dim must match code width");
    }
    if (!continuous.all_finite() || !codes.all_finite()) {
        throw std::invalid_argument("quantize: non-finite input");
    }
    const std::int64_t m = continuous.numel() / d;
    QuantizeResult out;
    out.indices.resize(static_cast<std::size_t>(m));
    out.quantized = Tensor<float>({m, d});
    for (std::int64_t r = 0; r < m; ++r) {
        const float* v = continuous.data() + r * d;
        std::int64_t best = 0;
        float best_d2 = 0;
        for (std::int64_t k = 0; k < k_count; ++k) {
            const float* c = codes.data() + k * d;
            float d2 = 0;
            for (std::int64_t i = 0; i < d; ++i) {
                const float diff = v[i] - c[i];
                d2 += diff * diff;
            }
            if (k == 0 || d2 < best_d2) {  // strict <: equal distance keeps the lower index
                best = k;
                best_d2 = d2;
            }
        }
        out.indices[static_cast<std::size_t>(r)] = best;
        std::copy(codes.data() + best * d, codes.data() + (best + 1) * d,
                  out.quantized.data() + r * d);
    }
    return out;
}

/// One encoded clip: pre-quantization latents, code indices, and the
/// quantized (codebook-row) latents, shaped N x T_z x D.
struct LatentActionSequence {
    Tensor<float> continuous;
    std::vector<std::int64_t> indices;
    Tensor<float> quantized;
};

struct DecodedFrame {
    Tensor<float> rgb;    // H x W x 3
    Tensor<float> depth;  // H x W
};

struct DecodedFrameNode {
    ag::NodePtr<float> rgb;
    ag::NodePtr<float> depth;
};

/// Training clip: patch features for the N+1 frames (encoder input) plus the
/// raw frames (decoder input s_t and reconstruction targets).
struct LamClip {
    std::vector<frontend::PatchFeatures> features;  // N+1 entries
    std::vector<Tensor<float>> rgb;                 // N+1, H x W x 3 in [0,1]
    std::vector<Tensor<float>> depth;               // N+1, H x W
};

/// Exponential of the entropy of the empirical code distribution; K means
/// uniform usage, 1 means collapse to a single code.
inline double perplexity(const std::vector<std::int64_t>& counts) {
    double total = 0;
    for (const std::int64_t c : counts) {
        if (c < 0) throw std::invalid_argument("perplexity: negative count");
        total += static_cast<double>(c);
    }
    if (total <= 0) throw std::invalid_argument("perplexity: no observations");
    double entropy = 0;
    for (const std::int64_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

class LamModel {
public:
    LamModel(const LamConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, fnv1a("lam.init")));
        const std::int64_t W = cfg_.width, P = cfg_.frame_tokens;
        const std::int64_t F = cfg_.n_future + 1;       // frames per clip
        const std::int64_t Q = cfg_.n_future * cfg_.tokens_per_step;

        enc_in_ = nn::Linear(params_, "enc.in", cfg_.feature_dim, W, rng);
        pos_emb_ = params_.add("enc.pos", nn::normal_init(rng, {P, W}, 0.02));
        frame_emb_ = params_.add("enc.frame", nn::normal_init(rng, {F, W}, 0.02));
        queries_.tokens = params_.add("enc.queries", nn::normal_init(rng, {Q, W}, 0.02));
        queries_.n = cfg_.n_future;
        queries_.t_z = cfg_.tokens_per_step;
        queries_.dim = W;
        encoder_ = nn::Transformer(params_, "enc", cfg_.enc_layers, W, cfg_.heads, rng);
        enc_out_ = nn::Linear(params_, "enc.out", W, cfg_.code_dim, rng);

        const std::int64_t ps = cfg_.patch_size;
        const std::int64_t grid = cfg_.image_size / ps;
        dec_tokens_ = grid * grid;
        dec_in_ = nn::Linear(params_, "dec.in", ps * ps * 4, W, rng);
        dec_pos_emb_ = params_.add("dec.pos", nn::normal_init(rng, {dec_tokens_, W}, 0.02));
        dec_z_in_ = nn::Linear(params_, "dec.zin", cfg_.code_dim, W, rng);
        z_slot_emb_ =
            params_.add("dec.zslot", nn::normal_init(rng, {cfg_.tokens_per_step, W}, 0.02));
        decoder_ = nn::Transformer(params_, "dec", cfg_.dec_layers, W, cfg_.heads, rng);
        rgb_head_ = nn::Linear(params_, "dec.rgb", W, ps * ps * 3, rng);
        depth_head_ = nn::Linear(params_, "dec.depth", W, ps * ps, rng);
        // Warm start at a gray frame of mean scene depth so the first
        // reconstructions are sane rather than black.
        rgb_head_.b->value.fill(0.5f);
        depth_head_.b->value.fill(2.0f);

        // Codebook entries must be pairwise distinct at initialization.
        Tensor<float> codes;
        for (int attempt = 0;; ++attempt) {
            codes = nn::normal_init(rng, {cfg_.codebook_size, cfg_.code_dim}, 0.1);
            if (!detail_has_duplicate_rows(codes)) break;
            if (attempt > 8) throw std::runtime_error("LamModel: cannot draw distinct codes");
        }
        codebook_.codes = params_.add("lam.codebook", std::move(codes));
        codebook_.usage_counts.assign(static_cast<std::size_t>(cfg_.codebook_size), 0);
        codebook_.last_used_step.assign(static_cast<std::size_t>(cfg_.codebook_size), 0);

        enc_mask_ = build_encoder_mask();
        dec_mask_ = ag::BoolMask(dec_tokens_ + cfg_.tokens_per_step,
                                 dec_tokens_ + cfg_.tokens_per_step);
        for (std::int64_t i = 0; i < dec_mask_.rows(); ++i) {
            for (std::int64_t j = 0; j < dec_mask_.cols(); ++j) dec_mask_.set(i, j, true);
        }

        perceptual_ = losses::default_perceptual<float>(mix_seed(seed, fnv1a("lam.lpips")),
                                                        /*patch_size=*/8);
        reseed_rng_ = Rng(mix_seed(seed, fnv1a("lam.reseed")));
    }

    const LamConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    Codebook& codebook() { return codebook_; }
    const Codebook& codebook() const { return codebook_; }
    const LatentQuerySet& queries() const { return queries_; }
    const losses::PerceptualFn<float>& perceptual() const { return perceptual_; }

    /// Pre-quantization latents for one clip as a graph node, (N*T_z) x D.
    /// Query block k only attends frames 0..k, so latents are causal in the
    /// frame index.
    ag::NodePtr<float> encode_node(const std::vector<frontend::PatchFeatures>& features) const {
        const std::int64_t F = cfg_.n_future + 1;
        if (static_cast<std::int64_t>(features.size()) != F) {
            throw std::invalid_argument("encode: expected " + std::to_string(F) + " frames, got " +
                                        std::to_string(features.size()));
        }
        std::vector<ag::NodePtr<float>> rows;
        rows.reserve(features.size() + 1);
        for (std::int64_t i = 0; i < F; ++i) {
            const Tensor<float>& tok = features[static_cast<std::size_t>(i)].tokens;
            if (tok.ndim() != 2 || tok.dim(0) != cfg_.frame_tokens ||
                tok.dim(1) != cfg_.feature_dim) {
                throw std::invalid_argument("encode: frame " + std::to_string(i) +
                                            " tokens have shape " + tok.shape_str());
            }
            auto x = ag::add(enc_in_(ag::constant(tok)), pos_emb_);
            auto fe = ag::reshape(ag::slice_rows(frame_emb_, i, i + 1), {cfg_.width});
            rows.push_back(ag::add_rowvec(x, fe));
        }
        rows.push_back(queries_.tokens);
        auto seq = encoder_(ag::concat_rows(rows), enc_mask_);
        const std::int64_t q0 = F * cfg_.frame_tokens;
        const std::int64_t Q = cfg_.n_future * cfg_.tokens_per_step;
        return enc_out_(ag::slice_rows(seq, q0, q0 + Q));
    }

    /// Full (non-graph) encode + quantize for one clip.
    LatentActionSequence encode(const std::vector<frontend::PatchFeatures>& features) const {
        auto node = encode_node(features);
        LatentActionSequence seq;
        QuantizeResult q = quantize(node->value, codebook_.codes->value);
        seq.continuous =
            node->value.reshaped({cfg_.n_future, cfg_.tokens_per_step, cfg_.code_dim});
        seq.indices = std::move(q.indices);
        seq.quantized =
            q.quantized.reshaped({cfg_.n_future, cfg_.tokens_per_step, cfg_.code_dim});
        return seq;
    }

    /// Renders one future frame from the anchor observation and a single
    /// latent block. Nothing else reaches the decoder.
    DecodedFrameNode decode_node(const Tensor<float>& rgb_t, const Tensor<float>& depth_t,
                                 const ag::NodePtr<float>& z_block) const {
        const std::int64_t H = cfg_.image_size, ps = cfg_.patch_size, grid = H / ps;
        if (rgb_t.ndim() != 3 || rgb_t.dim(0) != H || rgb_t.dim(1) != H || rgb_t.dim(2) != 3) {
            throw std::invalid_argument("decode: rgb shape " + rgb_t.shape_str());
        }
        if (depth_t.ndim() != 2 || depth_t.dim(0) != H || depth_t.dim(1) != H) {
            throw std::invalid_argument("decode: depth shape " + depth_t.shape_str());
        }
        if (z_block->value.ndim() != 2 || z_block->value.dim(0) != cfg_.tokens_per_step ||
            z_block->value.dim(1) != cfg_.code_dim) {
            throw std::invalid_argument("decode: z block shape " + z_block->value.shape_str());
        }
        Tensor<float> combined({H, H, 4});
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < H; ++x) {
                for (std::int64_t c = 0; c < 3; ++c) combined.at(y, x, c) = rgb_t.at(y, x, c);
                combined.at(y, x, 3) = depth_t.at(y, x);
            }
        }
        auto obs = ag::add(dec_in_(ag::patchify(ag::constant(std::move(combined)), ps)),
                           dec_pos_emb_);
        auto z = ag::add(dec_z_in_(z_block), z_slot_emb_);
        auto seq = decoder_(ag::concat_rows<float>({obs, z}), dec_mask_);
        auto obs_out = ag::slice_rows(seq, 0, dec_tokens_);
        DecodedFrameNode out;
        out.rgb = ag::unpatchify(rgb_head_(obs_out), grid, grid, ps, 3);
        out.depth = ag::reshape(ag::unpatchify(depth_head_(obs_out), grid, grid, ps, 1), {H, H});
        return out;
    }

    DecodedFrame decode(const Tensor<float>& rgb_t, const Tensor<float>& depth_t,
                        const Tensor<float>& z_block) const {
        auto node = decode_node(rgb_t, depth_t, ag::constant(z_block));
        return DecodedFrame{node.rgb->value, node.depth->value};
    }

    /// Overwrites codes unused for cfg.dead_code_steps with rows drawn from
    /// `pool` (in-batch encoder outputs). Returns how many were recycled.
    int reseed_dead_codes(const Tensor<float>& pool, std::int64_t step) {
        if (!cfg_.reseed_dead_codes || pool.numel() == 0) return 0;
        const std::int64_t rows = pool.numel() / cfg_.code_dim;
        int reseeded = 0;
        for (std::int64_t k = 0; k < cfg_.codebook_size; ++k) {
            if (step - codebook_.last_used_step[static_cast<std::size_t>(k)] <
                cfg_.dead_code_steps) {
                continue;
            }
            const std::int64_t r = reseed_rng_.uniform_int(rows);
            std::copy(pool.data() + r * cfg_.code_dim, pool.data() + (r + 1) * cfg_.code_dim,
                      codebook_.codes->value.data() + k * cfg_.code_dim);
            codebook_.last_used_step[static_cast<std::size_t>(k)] = step;
            ++reseeded;
        }
        return reseeded;
    }

private:
    static bool detail_has_duplicate_rows(const Tensor<float>& t) {
        const std::int64_t rows = t.dim(0), cols = t.dim(1);
        for (std::int64_t a = 0; a < rows; ++a) {
            for (std::int64_t b = a + 1; b < rows; ++b) {
                bool equal = true;
                for (std::int64_t c = 0; c < cols && equal; ++c) {
                    equal = t.at(a, c) == t.at(b, c);
                }
                if (equal) return true;
            }
        }
        return false;
    }

    /// Frame-causal mask: frame i tokens see frames <= i; query block k sees
    /// frames <= k+1 and query blocks <= k; frame tokens never see queries.
    ag::BoolMask build_encoder_mask() const {
        const std::int64_t P = cfg_.frame_tokens, F = cfg_.n_future + 1;
        const std::int64_t T = cfg_.tokens_per_step, Q = cfg_.n_future * T;
        const std::int64_t S = F * P + Q;
        ag::BoolMask mask(S, S);
        auto frame_of = [&](std::int64_t col) { return col / P; };
        for (std::int64_t i = 0; i < F * P; ++i) {
            for (std::int64_t j = 0; j < F * P; ++j) {
                if (frame_of(j) <= frame_of(i)) mask.set(i, j, true);
            }
        }
        for (std::int64_t qb = 0; qb < cfg_.n_future; ++qb) {
            for (std::int64_t qt = 0; qt < T; ++qt) {
                const std::int64_t row = F * P + qb * T + qt;
                for (std::int64_t j = 0; j < F * P; ++j) {
                    if (frame_of(j) <= qb + 1) mask.set(row, j, true);
                }
                for (std::int64_t jb = 0; jb <= qb; ++jb) {
                    for (std::int64_t jt = 0; jt < T; ++jt) {
                        mask.set(row, F * P + jb * T + jt, true);
                    }
                }
            }
        }
        return mask;
    }

    LamConfig cfg_;
    nn::ParamStore params_;

    nn::Linear enc_in_;
    ag::NodePtr<float> pos_emb_;
    ag::NodePtr<float> frame_emb_;
    LatentQuerySet queries_;
    nn::Transformer encoder_;
    nn::Linear enc_out_;
    ag::BoolMask enc_mask_;

    std::int64_t dec_tokens_ = 0;
    nn::Linear dec_in_;
    ag::NodePtr<float> dec_pos_emb_;
    nn::Linear dec_z_in_;
    ag::NodePtr<float> z_slot_emb_;
    nn::Transformer decoder_;
    nn::Linear rgb_head_;
    nn::Linear depth_head_;
    ag::BoolMask dec_mask_;

    Codebook codebook_;
    losses::PerceptualFn<float> perceptual_;
    Rng reseed_rng_{0};
};

struct LamStepStats {
    double total = 0;      // optimized objective (batch mean)
    double rec = 0;        // reconstruction part (rgb + lambda_d * depth)
    double rgb = 0;        // summed rgb terms
    double depth = 0;      // summed depth terms
    double codebook = 0;   // ||codes - sg[z']||^2 pull term
    double commitment = 0; // ||z' - sg[codes]||^2 encoder term
    double batch_perplexity = 1;
    int reseeded = 0;
};

/// One optimizer step of the latent action model on a batch of clips:
/// reconstruction through straight-through quantization, plus the codebook
/// pull and commitment terms, then dead-code recycling.
inline LamStepStats lam_train_step(LamModel& model, const std::vector<LamClip>& batch,
                                   nn::AdamW& opt, double lr, std::int64_t step) {
    if (batch.empty()) throw std::invalid_argument("lam_train_step: empty batch");
    const LamConfig& cfg = model.config();
    const std::int64_t T = cfg.tokens_per_step;

    LamStepStats stats;
    ag::NodePtr<float> total;
    std::vector<Tensor<float>> pool;  // encoder outputs for dead-code reseed
    std::vector<std::int64_t> batch_counts(static_cast<std::size_t>(cfg.codebook_size), 0);

    for (const LamClip& clip : batch) {
        const std::size_t frames = static_cast<std::size_t>(cfg.n_future + 1);
        if (clip.features.size() != frames || clip.rgb.size() != frames ||
            clip.depth.size() != frames) {
            throw std::invalid_argument("lam_train_step: clip must carry N+1 frames");
        }
        auto z_cont = model.encode_node(clip.features);
        if (!z_cont->value.all_finite()) {
            throw std::runtime_error("lam_train_step: non-finite encoder output at step " +
                                     std::to_string(step));
        }
        QuantizeResult q = quantize(z_cont->value, model.codebook().codes->value);
        for (std::size_t i = 0; i < q.indices.size(); ++i) {
            const auto idx = static_cast<std::size_t>(q.indices[i]);
            model.codebook().usage_counts[idx]++;
            model.codebook().last_used_step[idx] = step;
            batch_counts[idx]++;
        }
        pool.push_back(z_cont->value);

        auto z_st = ag::straight_through(z_cont, q.quantized);
        std::vector<losses::FramePrediction<float>> pred;
        std::vector<losses::FrameTarget<float>> gt;
        for (std::int64_t k = 0; k < cfg.n_future; ++k) {
            auto block = ag::slice_rows(z_st, k * T, (k + 1) * T);
            auto frame = model.decode_node(clip.rgb[0], clip.depth[0], block);
            pred.push_back({frame.rgb, frame.depth});
            gt.push_back({clip.rgb[static_cast<std::size_t>(k + 1)],
                          clip.depth[static_cast<std::size_t>(k + 1)]});
        }
        auto recon = losses::recon_loss(pred, gt, cfg.loss_weights, model.perceptual());
        auto pull = ag::mse(ag::gather_rows(model.codebook().codes, q.indices),
                            ag::constant(z_cont->value));
        auto commit = ag::mse(z_cont, ag::constant(q.quantized));

        stats.rec += static_cast<double>(recon.total->value[0]);
        for (const double v : recon.rgb_terms) stats.rgb += v;
        for (const double v : recon.depth_terms) stats.depth += v;
        stats.codebook += static_cast<double>(pull->value[0]);
        stats.commitment += static_cast<double>(commit->value[0]);

        auto clip_loss = ag::add(
            recon.total,
            ag::add(pull, ag::scale(commit, static_cast<float>(cfg.commitment_weight))));
        total = total ? ag::add(total, clip_loss) : clip_loss;
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    total = ag::scale(total, static_cast<float>(inv_b));
    stats.total = static_cast<double>(total->value[0]);
    stats.rec *= inv_b;
    stats.rgb *= inv_b;
    stats.depth *= inv_b;
    stats.codebook *= inv_b;
    stats.commitment *= inv_b;
    if (!std::isfinite(stats.total)) {
        throw std::runtime_error(
            "lam_train_step: non-finite loss at step " + std::to_string(step) +
            " (rec=" + std::to_string(stats.rec) + ", codebook=" + std::to_string(stats.codebook) +
            ", commitment=" + std::to_string(stats.commitment) + ")");
    }
    stats.batch_perplexity = perplexity(batch_counts);

    ag::GradTable<float> grads;
    ag::backward(total, grads);
    opt.step(model.params(), grads, lr);

    Tensor<float> pool_all({static_cast<std::int64_t>(pool.size()) * cfg.n_future * T,
                            cfg.code_dim});
    std::int64_t row = 0;
    for (const Tensor<float>& p : pool) {
        std::copy(p.data(), p.data() + p.numel(), pool_all.data() + row * cfg.code_dim);
        row += p.numel() / cfg.code_dim;
    }
    stats.reseeded = model.reseed_dead_codes(pool_all, step);
    return stats;
}

}  // namespace ssmvla::lam
