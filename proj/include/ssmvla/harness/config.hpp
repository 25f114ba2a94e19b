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

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/io.hpp"
#include "ssmvla/env/language.hpp"
#include "ssmvla/env/pushworld.hpp"
#include "ssmvla/frontend/patch_embed.hpp"
#include "ssmvla/lam/model.hpp"
#include "ssmvla/losses/objectives.hpp"
#include "ssmvla/policy/model.hpp"

namespace ssmvla::harness {

using io::json;

inline constexpr int kConfigSchemaVersion = 1;

namespace detail {

inline void expect_keys(const json& j, const std::string& section,
                        std::initializer_list<const char*> keys) {
    if (!j.is_object()) {
        throw std::invalid_argument("config: section '" + section + "' must be an object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : keys) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw std::invalid_argument("config: unknown key '" + section + "." + it.key() +
                                        "'");
        }
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

/// Data generation and loading parameters.
struct DataSection {
    std::string dir = "data";
    std::int64_t episodes = 500;
    int horizon = 80;
    double holdout_frac = 0.1;   // episode fraction reserved for eval
    bool pseudo_depth = false;   // depth targets rebuilt from mono + sparse

    void validate() const {
        if (episodes < 0) throw std::invalid_argument("config: data.episodes must be >= 0");
        if (horizon < 2) throw std::invalid_argument("config: data.horizon must be >= 2");
        if (holdout_frac < 0 || holdout_frac >= 1) {
            throw std::invalid_argument("config: data.holdout_frac must be in [0, 1)");
        }
    }
    json to_json() const {
        return {{"dir", dir},
                {"episodes", episodes},
                {"horizon", horizon},
                {"holdout_frac", holdout_frac},
                {"pseudo_depth", pseudo_depth}};
    }
    static DataSection from_json(const json& j) {
        detail::expect_keys(j, "data",
                            {"dir", "episodes", "horizon", "holdout_frac", "pseudo_depth"});
        DataSection s;
        detail::read_if(j, "dir", s.dir);
        detail::read_if(j, "episodes", s.episodes);
        detail::read_if(j, "horizon", s.horizon);
        detail::read_if(j, "holdout_frac", s.holdout_frac);
        detail::read_if(j, "pseudo_depth", s.pseudo_depth);
        return s;
    }
};

/// Frozen visual frontend parameters.
struct FrontendSection {
    std::string kind = "fixed-random";
    std::uint64_t seed = 7;
    std::int64_t patch_size = 16;
    std::int64_t feature_dim = 32;

    std::int64_t frame_tokens() const {
        const std::int64_t g = env::kSize / patch_size;
        return g * g;
    }
    void validate() const {
        if (patch_size < 1 || env::kSize % patch_size != 0) {
            throw std::invalid_argument("config: frontend.patch_size must divide 64");
        }
        if (feature_dim < 1) {
            throw std::invalid_argument("config: frontend.feature_dim must be >= 1");
        }
    }
    json to_json() const {
        return {{"kind", kind},
                {"seed", seed},
                {"patch_size", patch_size},
                {"feature_dim", feature_dim}};
    }
    static FrontendSection from_json(const json& j) {
        detail::expect_keys(j, "frontend", {"kind", "seed", "patch_size", "feature_dim"});
        FrontendSection s;
        detail::read_if(j, "kind", s.kind);
        detail::read_if(j, "seed", s.seed);
        detail::read_if(j, "patch_size", s.patch_size);
        detail::read_if(j, "feature_dim", s.feature_dim);
        return s;
    }
};

/// Latent action model shape (N comes from ablation.lam_frames).
struct LamSection {
    std::int64_t tokens_per_step = 4;  // T_z
    std::int64_t codebook_size = 32;   // K
    std::int64_t code_dim = 64;
    std::int64_t width = 64;
    std::int64_t enc_layers = 4;
    std::int64_t dec_layers = 4;
    std::int64_t heads = 4;
    std::int64_t patch_size = 16;  // decoder patch size

    void validate() const {
        if (tokens_per_step < 1 || codebook_size < 2 || code_dim < 1) {
            throw std::invalid_argument("config: bad lam latent geometry");
        }
        if (width < 1 || enc_layers < 1 || dec_layers < 1 || heads < 1 || width % heads != 0) {
            throw std::invalid_argument("config: bad lam transformer geometry");
        }
    }
    json to_json() const {
        return {{"tokens_per_step", tokens_per_step},
                {"codebook_size", codebook_size},
                {"code_dim", code_dim},
                {"width", width},
                {"enc_layers", enc_layers},
                {"dec_layers", dec_layers},
                {"heads", heads},
                {"patch_size", patch_size}};
    }
    static LamSection from_json(const json& j) {
        detail::expect_keys(j, "lam",
                            {"tokens_per_step", "codebook_size", "code_dim", "width",
                             "enc_layers", "dec_layers", "heads", "patch_size"});
        LamSection s;
        detail::read_if(j, "tokens_per_step", s.tokens_per_step);
        detail::read_if(j, "codebook_size", s.codebook_size);
        detail::read_if(j, "code_dim", s.code_dim);
        detail::read_if(j, "width", s.width);
        detail::read_if(j, "enc_layers", s.enc_layers);
        detail::read_if(j, "dec_layers", s.dec_layers);
        detail::read_if(j, "heads", s.heads);
        detail::read_if(j, "patch_size", s.patch_size);
        return s;
    }
};

/// Cascaded policy shape.
struct PolicySection {
    std::int64_t history = 1;  // H
    std::int64_t layers = 4;
    std::int64_t width = 128;
    std::int64_t heads = 4;
    std::int64_t context_dim = 64;
    std::int64_t patch_size = 16;  // next-frame head patch size
    std::int64_t chunk = 8;
    std::int64_t fm_steps = 10;
    std::int64_t fm_hidden = 64;
    std::int64_t fm_draws = 4;

    void validate() const {
        if (history < 0) throw std::invalid_argument("config: policy.history must be >= 0");
        if (layers < 1 || width < 1 || heads < 1 || width % heads != 0) {
            throw std::invalid_argument("config: bad policy transformer geometry");
        }
        if (context_dim < 1 || chunk < 1 || fm_steps < 1 || fm_hidden < 1 || fm_draws < 1) {
            throw std::invalid_argument("config: bad policy head geometry");
        }
    }
    json to_json() const {
        return {{"history", history},     {"layers", layers},
                {"width", width},         {"heads", heads},
                {"context_dim", context_dim}, {"patch_size", patch_size},
                {"chunk", chunk},         {"fm_steps", fm_steps},
                {"fm_hidden", fm_hidden}, {"fm_draws", fm_draws}};
    }
    static PolicySection from_json(const json& j) {
        detail::expect_keys(j, "policy",
                            {"history", "layers", "width", "heads", "context_dim",
                             "patch_size", "chunk", "fm_steps", "fm_hidden", "fm_draws"});
        PolicySection s;
        detail::read_if(j, "history", s.history);
        detail::read_if(j, "layers", s.layers);
        detail::read_if(j, "width", s.width);
        detail::read_if(j, "heads", s.heads);
        detail::read_if(j, "context_dim", s.context_dim);
        detail::read_if(j, "patch_size", s.patch_size);
        detail::read_if(j, "chunk", s.chunk);
        detail::read_if(j, "fm_steps", s.fm_steps);
        detail::read_if(j, "fm_hidden", s.fm_hidden);
        detail::read_if(j, "fm_draws", s.fm_draws);
        return s;
    }
};

/// One optimizer schedule (shared shape for the two training phases).
struct OptSection {
    double lr = 1e-4;
    double weight_decay = 1e-5;
    std::int64_t batch_size = 4;
    std::int64_t steps = 5000;
    double warmup_frac = 0.05;
    std::int64_t log_every = 25;

    void validate(const char* name) const {
        if (lr <= 0) throw std::invalid_argument(std::string("config: ") + name + ".lr > 0");
        if (weight_decay < 0) {
            throw std::invalid_argument(std::string("config: ") + name + ".weight_decay >= 0");
        }
        if (batch_size < 1 || steps < 1 || log_every < 1) {
            throw std::invalid_argument(std::string("config: ") + name + ": bad counts");
        }
        if (warmup_frac < 0 || warmup_frac >= 1) {
            throw std::invalid_argument(std::string("config: ") + name +
                                        ".warmup_frac must be in [0, 1)");
        }
    }
    json to_json() const {
        return {{"lr", lr},
                {"weight_decay", weight_decay},
                {"batch_size", batch_size},
                {"steps", steps},
                {"warmup_frac", warmup_frac},
                {"log_every", log_every}};
    }
    static OptSection from_json(const json& j, const char* name) {
        detail::expect_keys(
            j, name, {"lr", "weight_decay", "batch_size", "steps", "warmup_frac", "log_every"});
        OptSection s;
        detail::read_if(j, "lr", s.lr);
        detail::read_if(j, "weight_decay", s.weight_decay);
        detail::read_if(j, "batch_size", s.batch_size);
        detail::read_if(j, "steps", s.steps);
        detail::read_if(j, "warmup_frac", s.warmup_frac);
        detail::read_if(j, "log_every", s.log_every);
        return s;
    }
};

/// Evaluation protocol sizes.
struct EvalSection {
    std::int64_t chains = 100;
    std::int64_t subtasks_per_chain = 5;
    std::int64_t rollouts = 100;   // single-subtask success sample
    std::int64_t max_steps = 80;   // per subtask / rollout
    std::int64_t recon_clips = 64; // held-out clips for PSNR / perplexity
    std::int64_t trace_anchors = 3;

    void validate() const {
        if (chains < 1 || subtasks_per_chain < 1 || rollouts < 1 || max_steps < 1 ||
            recon_clips < 1 || trace_anchors < 0) {
            throw std::invalid_argument("config: bad eval counts");
        }
    }
    json to_json() const {
        return {{"chains", chains},
                {"subtasks_per_chain", subtasks_per_chain},
                {"rollouts", rollouts},
                {"max_steps", max_steps},
                {"recon_clips", recon_clips},
                {"trace_anchors", trace_anchors}};
    }
    static EvalSection from_json(const json& j) {
        detail::expect_keys(j, "eval",
                            {"chains", "subtasks_per_chain", "rollouts", "max_steps",
                             "recon_clips", "trace_anchors"});
        EvalSection s;
        detail::read_if(j, "chains", s.chains);
        detail::read_if(j, "subtasks_per_chain", s.subtasks_per_chain);
        detail::read_if(j, "rollouts", s.rollouts);
        detail::read_if(j, "max_steps", s.max_steps);
        detail::read_if(j, "recon_clips", s.recon_clips);
        detail::read_if(j, "trace_anchors", s.trace_anchors);
        return s;
    }
};

/// Structured ablation switches.
struct AblationSection {
    std::int64_t lam_frames = 3;           // 3 | 1 | 0 (0 removes L_latent)
    std::string attention = "synergistic"; // or "causal"
    std::string depth = "on";              // or "off"

    void validate() const {
        if (lam_frames != 0 && lam_frames != 1 && lam_frames != 3) {
            throw std::invalid_argument("config: ablation.lam_frames must be 0, 1, or 3");
        }
        if (attention != "synergistic" && attention != "causal") {
            throw std::invalid_argument(
                "config: ablation.attention must be 'synergistic' or 'causal'");
        }
        if (depth != "on" && depth != "off") {
            throw std::invalid_argument("config: ablation.depth must be 'on' or 'off'");
        }
    }
    json to_json() const {
        return {{"lam_frames", lam_frames}, {"attention", attention}, {"depth", depth}};
    }
    static AblationSection from_json(const json& j) {
        detail::expect_keys(j, "ablation", {"lam_frames", "attention", "depth"});
        AblationSection s;
        detail::read_if(j, "lam_frames", s.lam_frames);
        detail::read_if(j, "attention", s.attention);
        detail::read_if(j, "depth", s.depth);
        return s;
    }
};

/// Everything one run needs. Serializes losslessly; every artifact embeds the
/// hash of this structure.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    DataSection data;
    FrontendSection frontend;
    LamSection lam;
    PolicySection policy;
    losses::LossWeights loss;
    OptSection lam_opt;  // defaults: lr 1e-4, wd 1e-5
    OptSection vla_opt{1e-3, 1e-4, 4, 3000, 0.05, 25};
    EvalSection eval;
    AblationSection ablation;

    void validate() const {
        data.validate();
        frontend.validate();
        lam.validate();
        policy.validate();
        loss.validate();
        lam_opt.validate("lam_opt");
        vla_opt.validate("vla_opt");
        eval.validate();
        ablation.validate();
        lam_config().validate();
        policy_config().validate();
    }

    /// N as trained: the lam_frames ablation collapses the farsighted window;
    /// 0 (no latent supervision) keeps a 1-block plan head so the policy
    /// architecture stays comparable.
    std::int64_t n_future() const { return ablation.lam_frames == 0 ? 1 : ablation.lam_frames; }

    losses::LossWeights loss_weights() const {
        losses::LossWeights w = loss;
        if (ablation.lam_frames == 0) w.lambda_latent = 0;
        if (ablation.depth == "off") w.lambda_d = 0;
        return w;
    }

    frontend::BackendSpec backend_spec() const {
        frontend::BackendSpec s;
        s.kind = frontend.kind;
        s.seed = frontend.seed;
        s.patch_size = frontend.patch_size;
        s.feature_dim = frontend.feature_dim;
        return s;
    }

    lam::LamConfig lam_config() const {
        lam::LamConfig c;
        c.n_future = n_future();
        c.tokens_per_step = lam.tokens_per_step;
        c.codebook_size = lam.codebook_size;
        c.code_dim = lam.code_dim;
        c.width = lam.width;
        c.enc_layers = lam.enc_layers;
        c.dec_layers = lam.dec_layers;
        c.heads = lam.heads;
        c.image_size = env::kSize;
        c.patch_size = lam.patch_size;
        c.frame_tokens = frontend.frame_tokens();
        c.feature_dim = frontend.feature_dim;
        c.loss_weights = loss_weights();
        return c;
    }

    policy::PolicyConfig policy_config() const {
        policy::PolicyConfig c;
        c.history = policy.history;
        c.frame_tokens = frontend.frame_tokens();
        c.feature_dim = frontend.feature_dim;
        c.language_tokens = env::kLangTokens;
        c.vocab_size = env::vocab_size();
        c.image_size = env::kSize;
        c.patch_size = policy.patch_size;
        c.n_future = n_future();
        c.tokens_per_step = lam.tokens_per_step;
        c.codebook_size = lam.codebook_size;
        c.code_dim = lam.code_dim;
        c.layers = policy.layers;
        c.width = policy.width;
        c.heads = policy.heads;
        c.context_dim = policy.context_dim;
        c.action_dim = env::kActionDim;
        c.chunk = policy.chunk;
        c.fm_steps = policy.fm_steps;
        c.fm_hidden = policy.fm_hidden;
        c.fm_draws = policy.fm_draws;
        c.depth_head = ablation.depth == "on";
        c.token_causal = ablation.attention == "causal";
        return c;
    }

    json to_json() const {
        json j;
        j["schema_version"] = kConfigSchemaVersion;
        j["seed"] = seed;
        j["out_dir"] = out_dir;
        j["data"] = data.to_json();
        j["frontend"] = frontend.to_json();
        j["lam"] = lam.to_json();
        j["policy"] = policy.to_json();
        j["loss"] = {{"lambda_lpips", loss.lambda_lpips},
                     {"lambda_d", loss.lambda_d},
                     {"lambda_vision", loss.lambda_vision},
                     {"lambda_latent", loss.lambda_latent}};
        j["lam_opt"] = lam_opt.to_json();
        j["vla_opt"] = vla_opt.to_json();
        j["eval"] = eval.to_json();
        j["ablation"] = ablation.to_json();
        return j;
    }

    static RunConfig from_json(const json& j) {
        detail::expect_keys(j, "<root>",
                            {"schema_version", "seed", "out_dir", "data", "frontend", "lam",
                             "policy", "loss", "lam_opt", "vla_opt", "eval", "ablation"});
        if (j.contains("schema_version") &&
            j.at("schema_version").get<int>() != kConfigSchemaVersion) {
            throw std::invalid_argument("config: unsupported schema_version");
        }
        RunConfig c;
        detail::read_if(j, "seed", c.seed);
        detail::read_if(j, "out_dir", c.out_dir);
        if (j.contains("data")) c.data = DataSection::from_json(j.at("data"));
        if (j.contains("frontend")) c.frontend = FrontendSection::from_json(j.at("frontend"));
        if (j.contains("lam")) c.lam = LamSection::from_json(j.at("lam"));
        if (j.contains("policy")) c.policy = PolicySection::from_json(j.at("policy"));
        if (j.contains("loss")) {
            const json& l = j.at("loss");
            detail::expect_keys(l, "loss",
                                {"lambda_lpips", "lambda_d", "lambda_vision", "lambda_latent"});
            detail::read_if(l, "lambda_lpips", c.loss.lambda_lpips);
            detail::read_if(l, "lambda_d", c.loss.lambda_d);
            detail::read_if(l, "lambda_vision", c.loss.lambda_vision);
            detail::read_if(l, "lambda_latent", c.loss.lambda_latent);
        }
        if (j.contains("lam_opt")) c.lam_opt = OptSection::from_json(j.at("lam_opt"), "lam_opt");
        if (j.contains("vla_opt")) c.vla_opt = OptSection::from_json(j.at("vla_opt"), "vla_opt");
        if (j.contains("eval")) c.eval = EvalSection::from_json(j.at("eval"));
        if (j.contains("ablation")) c.ablation = AblationSection::from_json(j.at("ablation"));
        c.validate();
        return c;
    }

    /// Stable digest of the full configuration, embedded in every artifact.
    std::uint64_t hash() const { return fnv1a(to_json().dump()); }
};

/// Applies SSMVLA_* environment overrides to a config JSON in place. The
/// variable name is the config path, upper-cased, with "__" for the dot:
/// SSMVLA_VLA_OPT__STEPS=100 sets vla_opt.steps. Values parse as JSON, with
/// bare strings accepted unquoted. Returns the applied variable names.
inline std::vector<std::string> apply_env_overrides(json& j) {
    std::vector<std::string> applied;
    const json defaults = RunConfig{}.to_json();
    const std::function<void(const json&, const std::string&)> walk =
        [&](const json& node, const std::string& path) {
            for (auto it = node.begin(); it != node.end(); ++it) {
                const std::string child = path.empty() ? it.key() : path + "." + it.key();
                if (it.value().is_object()) {
                    walk(it.value(), child);
                    continue;
                }
                std::string var = "SSMVLA_";
                for (const char ch : child) {
                    var += ch == '.' ? std::string("__")
                                     : std::string(1, static_cast<char>(std::toupper(
                                           static_cast<unsigned char>(ch))));
                }
                const char* raw = std::getenv(var.c_str());
                if (raw == nullptr) continue;
                json value;
                try {
                    value = json::parse(raw);
                } catch (const json::parse_error&) {
                    value = std::string(raw);  // unquoted string
                }
                json* slot = &j;
                std::string rest = child, key;
                while (true) {
                    const auto dot = rest.find('.');
                    if (dot == std::string::npos) {
                        key = rest;
                        break;
                    }
                    slot = &(*slot)[rest.substr(0, dot)];
                    rest = rest.substr(dot + 1);
                }
                (*slot)[key] = value;
                applied.push_back(var);
            }
        };
    walk(defaults, "");
    return applied;
}

/// Loads a config file (or defaults when path is empty), applies environment
/// overrides, and validates.
inline RunConfig load_config(const std::string& path) {
    json j = path.empty() ? RunConfig{}.to_json() : io::load_json(path);
    apply_env_overrides(j);
    return RunConfig::from_json(j);
}

}  // namespace ssmvla::harness
