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
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/io.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/env/episode.hpp"
#include "ssmvla/env/language.hpp"
#include "ssmvla/env/pushworld.hpp"
#include "ssmvla/frontend/patch_embed.hpp"
#include "ssmvla/harness/config.hpp"
#include "ssmvla/lam/model.hpp"
#include "ssmvla/policy/model.hpp"

namespace ssmvla::harness {

inline constexpr int kManifestSchemaVersion = 1;

inline std::string episode_dir_name(std::int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ep_%05lld", static_cast<long long>(i));
    return buf;
}

/// Generates cfg.data.episodes expert demonstrations into cfg.data.dir,
/// cycling through the task vocabulary, and writes a manifest listing counts
/// and seeds. Deterministic for a fixed config. A directory whose previous
/// generation did not complete (contents but no readable manifest) is
/// refused unless force is set, which wipes and regenerates.
inline json gen_data(const RunConfig& cfg, bool force = false) {
    namespace fs = std::filesystem;
    const fs::path dir = cfg.data.dir;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        bool intact = false;
        if (fs::exists(dir / "manifest.json")) {
            try {
                const json m = io::load_json(dir / "manifest.json");
                intact = m.at("schema_version").get<int>() == kManifestSchemaVersion;
            } catch (const std::exception&) {
                intact = false;
            }
        }
        if (!intact && !force) {
            throw std::runtime_error("gen-data: " + dir.string() +
                                     " is non-empty without a valid manifest; "
                                     "pass --force to wipe and regenerate");
        }
        if (!intact) fs::remove_all(dir);
    }
    io::ensure_dir(dir);

    const auto& tasks = env::task_vocabulary();
    json entries = json::array();
    for (std::int64_t i = 0; i < cfg.data.episodes; ++i) {
        const std::string& task = tasks[static_cast<std::size_t>(i) % tasks.size()];
        const std::uint64_t seed = mix_seed(cfg.seed, 0x9e0dull + static_cast<std::uint64_t>(i));
        const env::RolloutResult r = env::run_expert(seed, task, cfg.data.horizon);
        const std::string name = episode_dir_name(i);
        env::write_episode(dir / name, r.episode);
        entries.push_back({{"dir", name},
                           {"task_id", task},
                           {"seed", seed},
                           {"length", r.episode.length()},
                           {"success", r.success}});
    }
    json manifest;
    manifest["schema_version"] = kManifestSchemaVersion;
    manifest["config_hash"] = cfg.hash();
    manifest["seed"] = cfg.seed;
    manifest["episodes"] = cfg.data.episodes;
    manifest["horizon"] = cfg.data.horizon;
    manifest["pseudo_depth"] = cfg.data.pseudo_depth;
    manifest["entries"] = entries;
    io::save_json(dir / "manifest.json", manifest);
    return manifest;
}

/// One demonstration held in RAM. RGB frames are palette colors — exact
/// multiples of 1/255 — so byte storage is lossless; depth stays float.
struct StoredEpisode {
    std::string task_id;
    std::uint64_t seed = 0;
    std::int64_t length = 0;
    std::vector<std::int64_t> tokens;                // fixed-length instruction ids
    std::vector<std::uint8_t> rgb8;                  // length*64*64*3
    Tensor<float> depth;                             // length x 64 x 64
    Tensor<float> actions;                           // (length-1) x 3
    std::vector<frontend::PatchFeatures> features;   // per frame
};

/// In-RAM dataset: all episodes plus precomputed frozen features, split into
/// train and holdout by episode index.
class DataStore {
public:
    DataStore(const RunConfig& cfg, std::shared_ptr<const frontend::Backend> backend)
        : cfg_(cfg), backend_(std::move(backend)) {
        namespace fs = std::filesystem;
        const fs::path dir = cfg.data.dir;
        if (!fs::exists(dir / "manifest.json")) {
            throw std::runtime_error("dataset: no manifest at " + dir.string() +
                                     "; run gen-data first");
        }
        const json manifest = io::load_json(dir / "manifest.json");
        if (manifest.at("schema_version").get<int>() != kManifestSchemaVersion) {
            throw std::runtime_error("dataset: unsupported manifest schema");
        }
        const auto count = manifest.at("episodes").get<std::int64_t>();
        if (count != cfg.data.episodes) {
            throw std::invalid_argument(
                "dataset: manifest holds " + std::to_string(count) +
                " episodes but the config expects " + std::to_string(cfg.data.episodes));
        }
        episodes_.reserve(static_cast<std::size_t>(count));
        for (const json& entry : manifest.at("entries")) {
            const env::Episode ep =
                env::read_episode(dir / entry.at("dir").get<std::string>());
            StoredEpisode s;
            s.task_id = ep.task_id;
            s.seed = ep.seed;
            s.length = ep.length();
            s.tokens = env::tokenize(ep.instruction);
            s.rgb8.resize(static_cast<std::size_t>(ep.rgb.numel()));
            for (std::int64_t i = 0; i < ep.rgb.numel(); ++i) {
                s.rgb8[static_cast<std::size_t>(i)] =
                    static_cast<std::uint8_t>(ep.rgb[i] * 255.0f + 0.5f);
            }
            s.depth = ep.depth;
            s.actions = ep.actions;
            s.features.reserve(static_cast<std::size_t>(s.length));
            for (std::int64_t t = 0; t < s.length; ++t) {
                s.features.push_back(backend_->extract(rgb_from_bytes(s, t)));
            }
            episodes_.push_back(std::move(s));
        }
        const auto holdout = static_cast<std::int64_t>(
            static_cast<double>(episodes_.size()) * cfg.data.holdout_frac);
        train_count_ = static_cast<std::int64_t>(episodes_.size()) - holdout;
        if (train_count_ < 1 && !episodes_.empty()) train_count_ = 1;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(episodes_.size()); }
    std::int64_t train_count() const { return train_count_; }
    const StoredEpisode& episode(std::int64_t e) const {
        return episodes_.at(static_cast<std::size_t>(e));
    }
    const frontend::Backend& backend() const { return *backend_; }

    Tensor<float> rgb_frame(std::int64_t e, std::int64_t t) const {
        return rgb_from_bytes(episode(e), t);
    }

    Tensor<float> depth_frame(std::int64_t e, std::int64_t t) const {
        const StoredEpisode& s = episode(e);
        check_frame(s, t);
        Tensor<float> out({env::kSize, env::kSize});
        const std::int64_t base = t * out.numel();
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = s.depth[base + i];
        return out;
    }

    /// Valid clip anchors need N future frames after t.
    std::int64_t max_anchor(std::int64_t e, std::int64_t n_future) const {
        return episode(e).length - 1 - n_future;
    }

    lam::LamClip make_clip(std::int64_t e, std::int64_t t, std::int64_t n_future) const {
        if (t < 0 || t > max_anchor(e, n_future)) {
            throw std::invalid_argument("dataset: clip anchor out of range");
        }
        const StoredEpisode& s = episode(e);
        lam::LamClip clip;
        for (std::int64_t k = 0; k <= n_future; ++k) {
            clip.features.push_back(s.features[static_cast<std::size_t>(t + k)]);
            clip.rgb.push_back(rgb_frame(e, t + k));
            clip.depth.push_back(depth_frame(e, t + k));
        }
        return clip;
    }

    policy::VlaSample make_sample(std::int64_t e, std::int64_t t) const {
        const policy::PolicyConfig pcfg = cfg_.policy_config();
        const std::int64_t n = pcfg.n_future;
        if (t < 0 || t > max_anchor(e, n)) {
            throw std::invalid_argument("dataset: sample anchor out of range");
        }
        const StoredEpisode& s = episode(e);
        policy::VlaSample out;
        // Observation window, padded at the episode start by repeating the
        // first frame.
        for (std::int64_t i = t - pcfg.history; i <= t; ++i) {
            out.window.push_back(s.features[static_cast<std::size_t>(std::max<std::int64_t>(0, i))]);
        }
        out.tokens = s.tokens;
        out.next_rgb = rgb_frame(e, t + 1);
        out.next_depth = depth_frame(e, t + 1);
        for (std::int64_t k = 0; k <= n; ++k) {
            out.lam_features.push_back(s.features[static_cast<std::size_t>(t + k)]);
        }
        // Action chunk from t, zero-padded past the recorded trajectory (the
        // expert emits near-zero actions once the goal is reached).
        out.actions = Tensor<float>({pcfg.chunk, pcfg.action_dim});
        for (std::int64_t r = 0; r < pcfg.chunk; ++r) {
            const std::int64_t a = t + r;
            if (a >= s.actions.dim(0)) continue;
            for (std::int64_t c = 0; c < pcfg.action_dim; ++c) {
                out.actions.at(r, c) = s.actions.at(a, c);
            }
        }
        if (cfg_.data.pseudo_depth) attach_pseudo_depth(out, s, t);
        return out;
    }

    lam::LamClip sample_clip(Rng& rng, bool train, std::int64_t n_future) const {
        const auto [e, t] = sample_anchor(rng, train, n_future);
        return make_clip(e, t, n_future);
    }

    policy::VlaSample sample_vla(Rng& rng, bool train) const {
        const auto [e, t] = sample_anchor(rng, train, cfg_.policy_config().n_future);
        return make_sample(e, t);
    }

    /// Uniform episode within the split (among those long enough), then a
    /// uniform valid anchor inside it.
    std::pair<std::int64_t, std::int64_t> sample_anchor(Rng& rng, bool train,
                                                        std::int64_t n_future) const {
        const std::int64_t lo = train ? 0 : train_count_;
        const std::int64_t hi = train ? train_count_ : size();
        if (hi <= lo) throw std::runtime_error("dataset: requested split is empty");
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const std::int64_t e = lo + rng.uniform_int(hi - lo);
            const std::int64_t tmax = max_anchor(e, n_future);
            if (tmax < 0) continue;
            return {e, rng.uniform_int(tmax + 1)};
        }
        throw std::runtime_error("dataset: no episode long enough for the clip window");
    }

private:
    static void check_frame(const StoredEpisode& s, std::int64_t t) {
        if (t < 0 || t >= s.length) throw std::invalid_argument("dataset: frame out of range");
    }

    static Tensor<float> rgb_from_bytes(const StoredEpisode& s, std::int64_t t) {
        check_frame(s, t);
        Tensor<float> out({env::kSize, env::kSize, 3});
        const std::size_t base = static_cast<std::size_t>(t) *
                                 static_cast<std::size_t>(out.numel());
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            out[i] = static_cast<float>(s.rgb8[base + static_cast<std::size_t>(i)]) / 255.0f;
        }
        return out;
    }

    /// Simulated scaleless mono depth plus sparse metric probes: the mono map
    /// is the true depth under an unknown per-episode affine distortion, so
    /// the alignment fit must recover (a, b) to rebuild the target.
    void attach_pseudo_depth(policy::VlaSample& out, const StoredEpisode& s,
                             std::int64_t t) const {
        Rng pd(mix_seed(s.seed, fnv1a("pseudo_depth")));
        const float a = static_cast<float>(pd.uniform(0.5, 2.0));
        const float b = static_cast<float>(pd.uniform(-1.0, 1.0));
        out.pseudo_depth = true;
        out.mono_depth = Tensor<float>({env::kSize, env::kSize});
        const std::int64_t base = (t + 1) * out.mono_depth.numel();
        for (std::int64_t i = 0; i < out.mono_depth.numel(); ++i) {
            out.mono_depth[i] = (s.depth[base + i] - b) / a;
        }
        for (std::int64_t px = 0; px < out.mono_depth.numel(); px += 37) {
            out.sparse_px.push_back(px);
            out.sparse_depth.push_back(static_cast<double>(s.depth[base + px]));
        }
    }

    RunConfig cfg_;
    std::shared_ptr<const frontend::Backend> backend_;
    std::vector<StoredEpisode> episodes_;
    std::int64_t train_count_ = 0;
};

}  // namespace ssmvla::harness
