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

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/harness/checkpoint.hpp"
#include "ssmvla/harness/config.hpp"
#include "ssmvla/harness/dataset.hpp"
#include "ssmvla/harness/metrics.hpp"
#include "ssmvla/lam/model.hpp"
#include "ssmvla/nn/optim.hpp"
#include "ssmvla/policy/model.hpp"

namespace ssmvla::harness {

struct TrainResult {
    std::int64_t steps_done = 0;
    double final_loss = 0;
    std::filesystem::path checkpoint_dir;
    std::filesystem::path metrics_path;
};

inline std::filesystem::path lam_checkpoint_dir(const RunConfig& cfg) {
    return std::filesystem::path(cfg.out_dir) / "lam_ckpt";
}
inline std::filesystem::path vla_checkpoint_dir(const RunConfig& cfg) {
    return std::filesystem::path(cfg.out_dir) / "vla_ckpt";
}

/// Per-step sampling Rng derived from (seed, phase, step) alone, so a resumed
/// run draws exactly the batches the uninterrupted run would have drawn.
inline Rng step_rng(std::uint64_t seed, const char* phase, std::int64_t step) {
    return Rng(mix_seed(mix_seed(seed, fnv1a(phase)), static_cast<std::uint64_t>(step)));
}

/// Trains the latent action model: linear warmup to the peak rate, cosine to
/// zero, one checkpoint at the end (also the resume point for longer runs).
inline TrainResult train_lam(const RunConfig& cfg, const DataStore& data, bool resume = false) {
    namespace fs = std::filesystem;
    io::ensure_dir(cfg.out_dir);
    const lam::LamConfig mcfg = cfg.lam_config();
    lam::LamModel model(mcfg, cfg.seed);
    nn::AdamW opt(0.9, 0.999, 1e-8, cfg.lam_opt.weight_decay);

    const fs::path ckpt = lam_checkpoint_dir(cfg);
    std::int64_t start = 0;
    if (resume) {
        start = load_checkpoint(ckpt, "lam", model.params(), &opt).step;
        if (start >= cfg.lam_opt.steps) {
            throw std::invalid_argument("train-lam: checkpoint is already at step " +
                                        std::to_string(start));
        }
    }
    MetricsWriter metrics(fs::path(cfg.out_dir) / "lam_metrics.jsonl", cfg.hash(), resume);

    TrainResult result;
    for (std::int64_t s = start; s < cfg.lam_opt.steps; ++s) {
        const double lr =
            nn::lr_schedule(s, cfg.lam_opt.steps, cfg.lam_opt.lr, cfg.lam_opt.warmup_frac);
        Rng rng = step_rng(cfg.seed, "lam.step", s);
        std::vector<lam::LamClip> batch;
        for (std::int64_t b = 0; b < cfg.lam_opt.batch_size; ++b) {
            batch.push_back(data.sample_clip(rng, /*train=*/true, mcfg.n_future));
        }
        const lam::LamStepStats st = lam_train_step(model, batch, opt, lr, s);
        result.final_loss = st.total;
        if (s % cfg.lam_opt.log_every == 0 || s + 1 == cfg.lam_opt.steps) {
            metrics.append(s, {{"lr", lr},
                               {"total", st.total},
                               {"rec", st.rec},
                               {"rgb", st.rgb},
                               {"depth", st.depth},
                               {"codebook", st.codebook},
                               {"commitment", st.commitment},
                               {"batch_perplexity", st.batch_perplexity},
                               {"reseeded", static_cast<double>(st.reseeded)}});
        }
    }
    save_checkpoint(ckpt, "lam", cfg.lam_opt.steps, cfg, model.params(), &opt);
    result.steps_done = cfg.lam_opt.steps - start;
    result.checkpoint_dir = ckpt;
    result.metrics_path = fs::path(cfg.out_dir) / "lam_metrics.jsonl";
    return result;
}

/// Loads the frozen latent action model for policy training or evaluation.
inline lam::LamModel load_frozen_lam(const RunConfig& cfg, const std::filesystem::path& dir) {
    lam::LamModel model(cfg.lam_config(), cfg.seed);
    load_checkpoint(dir, "lam", model.params());
    model.params().set_frozen(true);
    return model;
}

/// Trains the cascaded policy against a frozen latent action encoder.
inline TrainResult train_vla(const RunConfig& cfg, const DataStore& data,
                             const std::filesystem::path& lam_dir, bool resume = false) {
    namespace fs = std::filesystem;
    io::ensure_dir(cfg.out_dir);
    const losses::LossWeights w = cfg.loss_weights();
    const lam::LamModel frozen = load_frozen_lam(cfg, lam_dir);
    policy::PolicyModel model(cfg.policy_config(), cfg.seed);
    nn::AdamW opt(0.9, 0.999, 1e-8, cfg.vla_opt.weight_decay);

    const fs::path ckpt = vla_checkpoint_dir(cfg);
    std::int64_t start = 0;
    if (resume) {
        start = load_checkpoint(ckpt, "vla", model.params(), &opt).step;
        if (start >= cfg.vla_opt.steps) {
            throw std::invalid_argument("train-vla: checkpoint is already at step " +
                                        std::to_string(start));
        }
    }
    MetricsWriter metrics(fs::path(cfg.out_dir) / "vla_metrics.jsonl", cfg.hash(), resume);

    TrainResult result;
    for (std::int64_t s = start; s < cfg.vla_opt.steps; ++s) {
        const double lr =
            nn::lr_schedule(s, cfg.vla_opt.steps, cfg.vla_opt.lr, cfg.vla_opt.warmup_frac);
        Rng rng = step_rng(cfg.seed, "vla.step", s);
        std::vector<policy::VlaSample> batch;
        for (std::int64_t b = 0; b < cfg.vla_opt.batch_size; ++b) {
            batch.push_back(data.sample_vla(rng, /*train=*/true));
        }
        const policy::VlaStepStats st =
            policy::vla_train_step(model, frozen, batch, w, opt, lr, s, rng);
        result.final_loss = st.total;
        if (s % cfg.vla_opt.log_every == 0 || s + 1 == cfg.vla_opt.steps) {
            metrics.append(s, {{"lr", lr},
                               {"total", st.total},
                               {"action", st.action},
                               {"latent", st.latent},
                               {"vision", st.vision},
                               {"vision_rgb", st.vision_rgb},
                               {"vision_depth", st.vision_depth}});
        }
    }
    save_checkpoint(ckpt, "vla", cfg.vla_opt.steps, cfg, model.params(), &opt);
    result.steps_done = cfg.vla_opt.steps - start;
    result.checkpoint_dir = ckpt;
    result.metrics_path = fs::path(cfg.out_dir) / "vla_metrics.jsonl";
    return result;
}

/// Loads the trained policy for evaluation.
inline policy::PolicyModel load_policy(const RunConfig& cfg, const std::filesystem::path& dir) {
    policy::PolicyModel model(cfg.policy_config(), cfg.seed);
    load_checkpoint(dir, "vla", model.params());
    return model;
}

}  // namespace ssmvla::harness
