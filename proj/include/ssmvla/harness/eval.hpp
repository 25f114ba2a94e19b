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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/io.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/env/episode.hpp"
#include "ssmvla/env/language.hpp"
#include "ssmvla/env/pushworld.hpp"
#include "ssmvla/frontend/patch_embed.hpp"
#include "ssmvla/harness/config.hpp"
#include "ssmvla/harness/dataset.hpp"
#include "ssmvla/lam/model.hpp"
#include "ssmvla/policy/model.hpp"

namespace ssmvla::harness {

inline constexpr int kEvalSchemaVersion = 1;
inline constexpr int kTraceSchemaVersion = 1;

/// PSNR against a unit signal range, capped so identical frames stay finite.
inline double psnr_from_mse(double mse) {
    constexpr double kCap = 99.0;
    if (mse <= 1e-12) return kCap;
    return std::min(kCap, 10.0 * std::log10(1.0 / mse));
}

inline double mse(const Tensor<float>& a, const Tensor<float>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
    double sum = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        sum += d * d;
    }
    return sum / static_cast<double>(a.numel());
}

/// Everything the evaluation protocol measures. Serializes losslessly.
struct EvalReport {
    std::uint64_t config_hash = 0;
    // Reconstruction quality of the latent action model on held-out clips.
    double psnr_recon = 0;
    double psnr_copy = 0;  // copy-anchor baseline
    double psnr_gain_db = 0;
    double perplexity = 0;  // codebook usage on held-out clips
    // Fraction of latent tokens where the policy's plan matches the encoder.
    double latent_agreement = 0;
    // Single-instruction closed-loop success.
    double subtask_success = 0;
    double random_subtask_success = 0;
    // Long-horizon chains: success at position k requires every earlier
    // position to have succeeded, so the curve is non-increasing.
    std::vector<double> chain_position_success;
    double avg_chain_length = 0;
    double random_avg_chain_length = 0;

    json to_json() const {
        json j;
        j["schema_version"] = kEvalSchemaVersion;
        j["config_hash"] = config_hash;
        j["psnr_recon"] = psnr_recon;
        j["psnr_copy"] = psnr_copy;
        j["psnr_gain_db"] = psnr_gain_db;
        j["perplexity"] = perplexity;
        j["latent_agreement"] = latent_agreement;
        j["subtask_success"] = subtask_success;
        j["random_subtask_success"] = random_subtask_success;
        j["chain_position_success"] = chain_position_success;
        j["avg_chain_length"] = avg_chain_length;
        j["random_avg_chain_length"] = random_avg_chain_length;
        return j;
    }

    static EvalReport from_json(const json& j) {
        if (j.at("schema_version").get<int>() != kEvalSchemaVersion) {
            throw std::invalid_argument("eval report: unsupported schema_version");
        }
        EvalReport r;
        r.config_hash = j.at("config_hash").get<std::uint64_t>();
        r.psnr_recon = j.at("psnr_recon").get<double>();
        r.psnr_copy = j.at("psnr_copy").get<double>();
        r.psnr_gain_db = j.at("psnr_gain_db").get<double>();
        r.perplexity = j.at("perplexity").get<double>();
        r.latent_agreement = j.at("latent_agreement").get<double>();
        r.subtask_success = j.at("subtask_success").get<double>();
        r.random_subtask_success = j.at("random_subtask_success").get<double>();
        r.chain_position_success = j.at("chain_position_success").get<std::vector<double>>();
        r.avg_chain_length = j.at("avg_chain_length").get<double>();
        r.random_avg_chain_length = j.at("random_avg_chain_length").get<double>();
        return r;
    }
};

/// Closed-loop control of one subtask: plan an action chunk, execute it while
/// re-observing, re-plan until the goal predicate holds or the budget runs
/// out. A non-finite plan counts as failure rather than crashing the sweep.
inline bool run_policy_subtask(const policy::PolicyModel& policy,
                               const frontend::Backend& backend, env::EnvState& s,
                               std::int64_t max_steps, Rng& rng) {
    if (env::subtask_done(s)) return true;
    const policy::PolicyConfig& cfg = policy.config();
    const std::vector<std::int64_t> tokens = env::tokenize(env::instruction_for(s.task_id));
    std::vector<frontend::PatchFeatures> window(
        static_cast<std::size_t>(cfg.history + 1), backend.extract(env::render(s).rgb));
    std::int64_t steps = 0;
    while (steps < max_steps) {
        const Tensor<float> chunk =
            policy::act(policy, window, tokens, rng, static_cast<int>(cfg.fm_steps));
        if (!chunk.all_finite()) return false;
        for (std::int64_t r = 0; r < cfg.chunk && steps < max_steps; ++r) {
            env::step_state(s, env::Action{chunk.at(r, 0), chunk.at(r, 1), chunk.at(r, 2)});
            ++steps;
            window.erase(window.begin());
            window.push_back(backend.extract(env::render(s).rgb));
            if (env::subtask_done(s)) return true;
        }
    }
    return false;
}

inline bool run_random_subtask(env::EnvState& s, std::int64_t max_steps, Rng& rng) {
    if (env::subtask_done(s)) return true;
    for (std::int64_t t = 0; t < max_steps; ++t) {
        env::Action a;
        a.dx = static_cast<float>(rng.uniform(-env::kMaxSpeed, env::kMaxSpeed));
        a.dy = static_cast<float>(rng.uniform(-env::kMaxSpeed, env::kMaxSpeed));
        a.grip = static_cast<float>(rng.uniform(-1.0, 1.0));
        env::step_state(s, a);
        if (env::subtask_done(s)) return true;
    }
    return false;
}

/// Runs one evaluation chain: the scene persists across subtasks, each
/// position draws a rotation offset and takes the first task whose goal
/// predicate does not already hold (push/place share a predicate, so a block
/// left in the zone pre-satisfies both for its color). The chain stops at the
/// first failure; any carried block is set down between subtasks.
template <typename SubtaskFn>
std::vector<bool> run_chain(std::uint64_t seed, std::int64_t positions, SubtaskFn&& subtask) {
    const std::vector<std::string>& tasks = env::task_vocabulary();
    const auto n = static_cast<std::int64_t>(tasks.size());
    Rng rng(seed);
    env::EnvState s = env::reset(seed, tasks[static_cast<std::size_t>(rng.uniform_int(n))]);
    std::vector<bool> outcome;
    for (std::int64_t k = 0; k < positions; ++k) {
        const std::int64_t r = rng.uniform_int(n);
        bool found = false;
        for (std::int64_t j = 0; j < n; ++j) {
            s.task_id = tasks[static_cast<std::size_t>((r + j) % n)];
            if (!env::subtask_done(s)) {
                found = true;
                break;
            }
        }
        // Unreachable with this vocabulary (a released gripper never
        // satisfies a lift), but a fully satisfied scene is trivially done.
        if (!found) {
            outcome.push_back(true);
            continue;
        }
        const bool ok = subtask(s, rng);
        outcome.push_back(ok);
        if (!ok) break;
        env::release_in_place(s);
    }
    return outcome;
}

inline std::int64_t chain_length(const std::vector<bool>& outcome) {
    std::int64_t len = 0;
    for (const bool ok : outcome) {
        if (!ok) break;
        ++len;
    }
    return len;
}

/// Full evaluation pass: reconstruction + codebook usage on held-out clips,
/// plan agreement, closed-loop subtask and chain success with a random-action
/// baseline, and a decoder trace for visualization. Writes eval_report.json
/// under cfg.out_dir and returns the report.
inline EvalReport run_eval(const RunConfig& cfg, const DataStore& data,
                           const policy::PolicyModel& policy, const lam::LamModel& lam,
                           std::filesystem::path trace_dir = {}) {
    namespace fs = std::filesystem;
    const std::uint64_t eval_seed = mix_seed(cfg.seed, fnv1a("eval"));
    const lam::LamConfig& lcfg = lam.config();
    const std::int64_t N = lcfg.n_future;
    const std::int64_t t_z = lcfg.tokens_per_step;

    EvalReport report;
    report.config_hash = cfg.hash();

    // --- Reconstruction and codebook usage on the held-out split.
    std::vector<std::int64_t> counts(static_cast<std::size_t>(lcfg.codebook_size), 0);
    double mse_recon = 0, mse_copy = 0;
    std::int64_t frames = 0;
    for (std::int64_t i = 0; i < cfg.eval.recon_clips; ++i) {
        Rng rng(mix_seed(eval_seed, 0xec00ull + static_cast<std::uint64_t>(i)));
        const lam::LamClip clip = data.sample_clip(rng, /*train=*/false, N);
        const lam::LatentActionSequence seq = lam.encode(clip.features);
        for (const std::int64_t id : seq.indices) {
            counts.at(static_cast<std::size_t>(id)) += 1;
        }
        for (std::int64_t k = 0; k < N; ++k) {
            Tensor<float> z({t_z, lcfg.code_dim});
            for (std::int64_t j = 0; j < t_z; ++j) {
                for (std::int64_t d = 0; d < lcfg.code_dim; ++d) {
                    z.at(j, d) = seq.quantized.at(k, j, d);
                }
            }
            const lam::DecodedFrame dec = lam.decode(clip.rgb[0], clip.depth[0], z);
            mse_recon += mse(dec.rgb, clip.rgb[static_cast<std::size_t>(k + 1)]);
            mse_copy += mse(clip.rgb[0], clip.rgb[static_cast<std::size_t>(k + 1)]);
            ++frames;
        }
    }
    report.psnr_recon = psnr_from_mse(mse_recon / static_cast<double>(frames));
    report.psnr_copy = psnr_from_mse(mse_copy / static_cast<double>(frames));
    report.psnr_gain_db = report.psnr_recon - report.psnr_copy;
    report.perplexity = lam::perplexity(counts);

    // --- Plan agreement: the policy's inferred codes vs the encoder's.
    std::int64_t agree = 0, total = 0;
    for (std::int64_t i = 0; i < cfg.eval.recon_clips; ++i) {
        Rng rng(mix_seed(eval_seed, 0xa9eeull + static_cast<std::uint64_t>(i)));
        const policy::VlaSample sample = data.sample_vla(rng, /*train=*/false);
        const std::vector<std::int64_t> ids =
            policy::infer_latents(policy.forward(sample.window, sample.tokens));
        const std::vector<std::int64_t> target = lam.encode(sample.lam_features).indices;
        for (std::size_t j = 0; j < ids.size(); ++j) {
            agree += ids[j] == target[j] ? 1 : 0;
            ++total;
        }
    }
    report.latent_agreement = static_cast<double>(agree) / static_cast<double>(total);

    // --- Single-subtask closed-loop success, policy vs random actions.
    const std::vector<std::string>& tasks = env::task_vocabulary();
    std::int64_t policy_ok = 0, random_ok = 0;
    for (std::int64_t i = 0; i < cfg.eval.rollouts; ++i) {
        const std::string& task = tasks[static_cast<std::size_t>(i) % tasks.size()];
        const std::uint64_t seed = mix_seed(eval_seed, 0x5011ull + static_cast<std::uint64_t>(i));
        {
            env::EnvState s = env::reset(seed, task);
            Rng rng(mix_seed(seed, fnv1a("rollout.policy")));
            policy_ok +=
                run_policy_subtask(policy, data.backend(), s, cfg.eval.max_steps, rng) ? 1 : 0;
        }
        {
            env::EnvState s = env::reset(seed, task);
            Rng rng(mix_seed(seed, fnv1a("rollout.random")));
            random_ok += run_random_subtask(s, cfg.eval.max_steps, rng) ? 1 : 0;
        }
    }
    report.subtask_success = static_cast<double>(policy_ok) / static_cast<double>(cfg.eval.rollouts);
    report.random_subtask_success =
        static_cast<double>(random_ok) / static_cast<double>(cfg.eval.rollouts);

    // --- Long-horizon chains.
    const std::int64_t positions = cfg.eval.subtasks_per_chain;
    std::vector<std::int64_t> pos_ok(static_cast<std::size_t>(positions), 0);
    std::int64_t len_sum = 0, random_len_sum = 0;
    for (std::int64_t c = 0; c < cfg.eval.chains; ++c) {
        const std::uint64_t seed = mix_seed(eval_seed, 0xc4a1ull + static_cast<std::uint64_t>(c));
        const std::vector<bool> outcome =
            run_chain(seed, positions, [&](env::EnvState& s, Rng& rng) {
                return run_policy_subtask(policy, data.backend(), s, cfg.eval.max_steps, rng);
            });
        for (std::size_t k = 0; k < outcome.size(); ++k) {
            pos_ok[k] += outcome[k] ? 1 : 0;
        }
        len_sum += chain_length(outcome);
        const std::vector<bool> random_outcome =
            run_chain(seed, positions, [&](env::EnvState& s, Rng& rng) {
                return run_random_subtask(s, cfg.eval.max_steps, rng);
            });
        random_len_sum += chain_length(random_outcome);
    }
    report.chain_position_success.resize(static_cast<std::size_t>(positions));
    for (std::size_t k = 0; k < pos_ok.size(); ++k) {
        report.chain_position_success[k] =
            static_cast<double>(pos_ok[k]) / static_cast<double>(cfg.eval.chains);
    }
    report.avg_chain_length = static_cast<double>(len_sum) / static_cast<double>(cfg.eval.chains);
    report.random_avg_chain_length =
        static_cast<double>(random_len_sum) / static_cast<double>(cfg.eval.chains);

    // --- Decoder trace for visualization: held-out anchors with ground
    // truth futures, encoder codes, and the policy's inferred codes.
    const std::int64_t anchors = cfg.eval.trace_anchors;
    if (anchors > 0) {
        if (trace_dir.empty()) trace_dir = fs::path(cfg.out_dir) / "trace";
        io::ensure_dir(trace_dir);
        const bool has_depth = cfg.ablation.depth == "on";
        Tensor<float> trace_rgb({anchors, N + 1, env::kSize, env::kSize, 3});
        Tensor<float> trace_depth({anchors, N + 1, env::kSize, env::kSize});
        Tensor<std::int64_t> lam_z({anchors, N * t_z});
        Tensor<std::int64_t> policy_z({anchors, N * t_z});
        const std::int64_t frame_px = env::kSize * env::kSize;
        for (std::int64_t a = 0; a < anchors; ++a) {
            Rng rng(mix_seed(eval_seed, 0x7aceull + static_cast<std::uint64_t>(a)));
            const auto [e, t] = data.sample_anchor(rng, /*train=*/false, N);
            const StoredEpisode& ep = data.episode(e);
            for (std::int64_t k = 0; k <= N; ++k) {
                const Tensor<float> rgb = data.rgb_frame(e, t + k);
                const Tensor<float> depth = data.depth_frame(e, t + k);
                const std::int64_t rgb_base = (a * (N + 1) + k) * frame_px * 3;
                const std::int64_t d_base = (a * (N + 1) + k) * frame_px;
                for (std::int64_t i = 0; i < rgb.numel(); ++i) trace_rgb[rgb_base + i] = rgb[i];
                for (std::int64_t i = 0; i < depth.numel(); ++i) {
                    trace_depth[d_base + i] = depth[i];
                }
            }
            std::vector<frontend::PatchFeatures> clip_features, window;
            for (std::int64_t k = 0; k <= N; ++k) {
                clip_features.push_back(ep.features[static_cast<std::size_t>(t + k)]);
            }
            const policy::PolicyConfig& pcfg = policy.config();
            for (std::int64_t i = t - pcfg.history; i <= t; ++i) {
                window.push_back(
                    ep.features[static_cast<std::size_t>(std::max<std::int64_t>(0, i))]);
            }
            const std::vector<std::int64_t> enc_ids = lam.encode(clip_features).indices;
            const std::vector<std::int64_t> pol_ids =
                policy::infer_latents(policy.forward(window, ep.tokens));
            for (std::int64_t j = 0; j < N * t_z; ++j) {
                lam_z.at(a, j) = enc_ids[static_cast<std::size_t>(j)];
                policy_z.at(a, j) = pol_ids[static_cast<std::size_t>(j)];
            }
        }
        json meta;
        meta["schema_version"] = kTraceSchemaVersion;
        meta["config_hash"] = cfg.hash();
        meta["n_future"] = N;
        meta["tokens_per_step"] = t_z;
        meta["anchors"] = anchors;
        meta["has_depth"] = has_depth;
        io::save_json(trace_dir / "meta.json", meta);
        io::save_tensor(trace_dir / "frames_rgb.ssvt", trace_rgb);
        if (has_depth) io::save_tensor(trace_dir / "frames_depth.ssvt", trace_depth);
        io::save_tensor(trace_dir / "lam_z.ssvt", lam_z);
        io::save_tensor(trace_dir / "policy_z.ssvt", policy_z);
    }

    io::ensure_dir(cfg.out_dir);
    io::save_json(fs::path(cfg.out_dir) / "eval_report.json", report.to_json());
    return report;
}

}  // namespace ssmvla::harness
