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
#include <string>

#include "ssmvla/core/io.hpp"
#include "ssmvla/core/tensor.hpp"
#include "ssmvla/env/pushworld.hpp"

namespace ssmvla::env {

inline constexpr int kEpisodeSchemaVersion = 1;

/// One demonstration: T frames and the T-1 actions between them.
/// rgb is (T, 64, 64, 3), depth (T, 64, 64), actions (T-1, 3).
struct Episode {
    std::string task_id;
    std::string instruction;
    std::uint64_t seed = 0;
    Tensor<float> rgb;
    Tensor<float> depth;
    Tensor<float> actions;

    std::int64_t length() const { return rgb.empty() ? 0 : rgb.dim(0); }
};

struct RolloutResult {
    Episode episode;
    bool success = false;
};

/// Runs the scripted expert from reset(seed, task_id) for at most `horizon`
/// actions, stopping early on success. Always yields at least two frames.
inline RolloutResult run_expert(std::uint64_t seed, const std::string& task_id, int horizon) {
    EnvState s = reset(seed, task_id);
    std::vector<Tensor<float>> rgbs, depths;
    std::vector<Action> acts;
    Observation obs = render(s);
    rgbs.push_back(obs.rgb);
    depths.push_back(obs.depth);
    bool success = subtask_done(s);
    for (int t = 0; t < horizon && !success; ++t) {
        const Action a = scripted_expert(s, task_id);
        acts.push_back(a);
        StepOut out = step(s, a);
        rgbs.push_back(out.obs.rgb);
        depths.push_back(out.obs.depth);
        success = out.done;
    }
    if (acts.empty()) {  // already-solved reset; keep the two-frame invariant
        acts.push_back({0.0f, 0.0f, 0.0f});
        StepOut out = step(s, acts.back());
        rgbs.push_back(out.obs.rgb);
        depths.push_back(out.obs.depth);
    }

    RolloutResult r;
    r.success = success;
    r.episode.task_id = task_id;
    r.episode.instruction = instruction_for(task_id);
    r.episode.seed = seed;
    const std::int64_t T = static_cast<std::int64_t>(rgbs.size());
    r.episode.rgb = Tensor<float>({T, kSize, kSize, 3});
    r.episode.depth = Tensor<float>({T, kSize, kSize});
    r.episode.actions = Tensor<float>({T - 1, kActionDim});
    const std::int64_t frame_px = kSize * kSize;
    for (std::int64_t t = 0; t < T; ++t) {
        std::copy(rgbs[static_cast<std::size_t>(t)].data(),
                  rgbs[static_cast<std::size_t>(t)].data() + frame_px * 3,
                  r.episode.rgb.data() + t * frame_px * 3);
        std::copy(depths[static_cast<std::size_t>(t)].data(),
                  depths[static_cast<std::size_t>(t)].data() + frame_px,
                  r.episode.depth.data() + t * frame_px);
    }
    for (std::int64_t t = 0; t + 1 < T; ++t) {
        const Action& a = acts[static_cast<std::size_t>(t)];
        r.episode.actions.at(t, 0) = a.dx;
        r.episode.actions.at(t, 1) = a.dy;
        r.episode.actions.at(t, 2) = a.grip;
    }
    return r;
}

inline void write_episode(const std::filesystem::path& dir, const Episode& ep) {
    io::ensure_dir(dir);
    nlohmann::json meta;
    meta["schema_version"] = kEpisodeSchemaVersion;
    meta["task_id"] = ep.task_id;
    meta["instruction"] = ep.instruction;
    meta["seed"] = ep.seed;
    meta["length"] = ep.length();
    io::save_json(dir / "meta.json", meta);
    io::save_tensor(dir / "rgb.ssvt", ep.rgb);
    io::save_tensor(dir / "depth.ssvt", ep.depth);
    io::save_tensor(dir / "actions.ssvt", ep.actions);
}

inline Episode read_episode(const std::filesystem::path& dir) {
    const nlohmann::json meta = io::load_json(dir / "meta.json");
    if (!meta.contains("schema_version") ||
        meta["schema_version"].get<int>() != kEpisodeSchemaVersion) {
        throw io::FormatError("episode " + dir.string() + ": unsupported schema_version");
    }
    Episode ep;
    ep.task_id = meta.at("task_id").get<std::string>();
    ep.instruction = meta.at("instruction").get<std::string>();
    ep.seed = meta.at("seed").get<std::uint64_t>();
    const auto T = meta.at("length").get<std::int64_t>();
    ep.rgb = io::load_tensor<float>(dir / "rgb.ssvt");
    ep.depth = io::load_tensor<float>(dir / "depth.ssvt");
    ep.actions = io::load_tensor<float>(dir / "actions.ssvt");
    if (ep.rgb.ndim() != 4 || ep.rgb.dim(0) != T || ep.rgb.dim(1) != kSize ||
        ep.rgb.dim(2) != kSize || ep.rgb.dim(3) != 3) {
        throw io::FormatError("episode " + dir.string() + ": rgb shape mismatch");
    }
    if (ep.depth.ndim() != 3 || ep.depth.dim(0) != T || ep.depth.dim(1) != kSize ||
        ep.depth.dim(2) != kSize) {
        throw io::FormatError("episode " + dir.string() + ": depth shape mismatch");
    }
    if (ep.actions.ndim() != 2 || ep.actions.dim(0) != T - 1 ||
        ep.actions.dim(1) != kActionDim) {
        throw io::FormatError("episode " + dir.string() + ": actions shape mismatch");
    }
    return ep;
}

}  // namespace ssmvla::env
