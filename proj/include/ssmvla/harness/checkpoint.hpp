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
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/io.hpp"
#include "ssmvla/harness/config.hpp"
#include "ssmvla/nn/layers.hpp"
#include "ssmvla/nn/optim.hpp"

namespace ssmvla::harness {

inline constexpr int kCheckpointSchemaVersion = 1;

struct CheckpointMeta {
    std::string kind;
    std::int64_t step = 0;
    std::uint64_t config_hash = 0;
};

/// Writes parameters (one tensor file per named parameter), optimizer moment
/// buffers, and a manifest embedding the full config.
inline void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                            std::int64_t step, const RunConfig& cfg,
                            const nn::ParamStore& params, nn::AdamW* opt = nullptr) {
    namespace fs = std::filesystem;
    io::ensure_dir(dir);
    io::ensure_dir(dir / "params");
    json names = json::array();
    for (const auto& [name, p] : params.entries()) {
        names.push_back(name);
        io::save_tensor(dir / "params" / (name + ".ssvt"), p->value);
    }
    json manifest;
    manifest["schema_version"] = kCheckpointSchemaVersion;
    manifest["kind"] = kind;
    manifest["step"] = step;
    manifest["config_hash"] = cfg.hash();
    manifest["config"] = cfg.to_json();
    manifest["params"] = names;
    manifest["param_hash"] = params.content_hash();
    if (opt != nullptr) {
        opt->ensure_state(params);
        io::ensure_dir(dir / "opt");
        for (std::size_t i = 0; i < opt->m_state().size(); ++i) {
            io::save_tensor(dir / "opt" / ("m_" + std::to_string(i) + ".ssvt"),
                            opt->m_state()[i]);
            io::save_tensor(dir / "opt" / ("v_" + std::to_string(i) + ".ssvt"),
                            opt->v_state()[i]);
        }
        manifest["opt"] = {{"t", opt->step_count()},
                           {"tensors", static_cast<std::int64_t>(opt->m_state().size())}};
    }
    io::save_json(dir / "manifest.json", manifest);
}

/// Restores parameter values (matched by name, shapes enforced) and, when an
/// optimizer is supplied, its moment buffers and step count. The model must
/// already be constructed with the same architecture.
inline CheckpointMeta load_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                                      nn::ParamStore& params, nn::AdamW* opt = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::exists(dir / "manifest.json")) {
        throw std::runtime_error("checkpoint: no manifest at " + dir.string());
    }
    const json manifest = io::load_json(dir / "manifest.json");
    if (manifest.at("schema_version").get<int>() != kCheckpointSchemaVersion) {
        throw std::runtime_error("checkpoint: unsupported schema_version");
    }
    if (manifest.at("kind").get<std::string>() != kind) {
        throw std::runtime_error("checkpoint: " + dir.string() + " holds a '" +
                                 manifest.at("kind").get<std::string>() + "' model, expected '" +
                                 kind + "'");
    }
    for (const auto& [name, p] : params.entries()) {
        const fs::path file = dir / "params" / (name + ".ssvt");
        if (!fs::exists(file)) {
            throw std::runtime_error("checkpoint: missing parameter '" + name + "'");
        }
        Tensor<float> value = io::load_tensor<float>(file);
        if (!value.same_shape(p->value)) {
            throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                                     value.shape_str() + ", model expects " +
                                     p->value.shape_str());
        }
        p->value = std::move(value);
    }
    if (opt != nullptr) {
        if (!manifest.contains("opt")) {
            throw std::runtime_error("checkpoint: " + dir.string() +
                                     " carries no optimizer state; cannot resume");
        }
        const auto count = manifest.at("opt").at("tensors").get<std::int64_t>();
        if (count != static_cast<std::int64_t>(params.entries().size())) {
            throw std::runtime_error("checkpoint: optimizer tensor count mismatch");
        }
        std::vector<Tensor<float>> m, v;
        for (std::int64_t i = 0; i < count; ++i) {
            m.push_back(io::load_tensor<float>(dir / "opt" / ("m_" + std::to_string(i) + ".ssvt")));
            v.push_back(io::load_tensor<float>(dir / "opt" / ("v_" + std::to_string(i) + ".ssvt")));
        }
        opt->restore(std::move(m), std::move(v), manifest.at("opt").at("t").get<std::int64_t>());
    }
    CheckpointMeta meta;
    meta.kind = kind;
    meta.step = manifest.at("step").get<std::int64_t>();
    meta.config_hash = manifest.at("config_hash").get<std::uint64_t>();
    return meta;
}

}  // namespace ssmvla::harness
