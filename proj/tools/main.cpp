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

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "ssmvla/frontend/patch_embed.hpp"
#include "ssmvla/harness/config.hpp"
#include "ssmvla/harness/dataset.hpp"
#include "ssmvla/harness/eval.hpp"
#include "ssmvla/harness/trainer.hpp"
#include "ssmvla/harness/viz.hpp"

namespace {

using namespace ssmvla;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Args {
    std::string command;
    std::string config_path;  // empty: built-in defaults
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::string lam_dir;
    std::string vla_dir;
    std::string trace_dir;
    bool force = false;
    bool resume = false;
};

void print_usage(std::FILE* to) {
    std::fprintf(to,
                 "usage: ssmvla <command> [flags]\n"
                 "\n"
                 "commands:\n"
                 "  dump-config   print the effective configuration as JSON\n"
                 "  gen-data      generate the expert demonstration dataset\n"
                 "  train-lam     train the latent action model\n"
                 "  train-vla     train the cascaded policy against a frozen LAM\n"
                 "  eval          run the evaluation protocol, write eval_report.json\n"
                 "  viz           render the decoder comparison grid from a trace\n"
                 "\n"
                 "flags:\n"
                 "  --config PATH  config JSON (default: built-in defaults)\n"
                 "  --seed N       override the config seed\n"
                 "  --out DIR      override the output directory\n"
                 "  --force        gen-data: wipe a stale data directory\n"
                 "  --resume       train-*: continue from the phase checkpoint\n"
                 "  --lam DIR      LAM checkpoint (default: <out>/lam_ckpt)\n"
                 "  --vla DIR      policy checkpoint (default: <out>/vla_ckpt)\n"
                 "  --trace DIR    eval trace directory (default: <out>/trace)\n"
                 "\n"
                 "Any config value can also be overridden with SSMVLA_* environment\n"
                 "variables, e.g. SSMVLA_VLA_OPT__STEPS=100.\n");
}

Args parse_args(int argc, char** argv) {
    if (argc < 2) throw UsageError("missing command");
    Args a;
    a.command = argv[1];
    const auto value = [&](int& i, const char* flag) -> std::string {
        if (i + 1 >= argc) throw UsageError(std::string(flag) + " needs a value");
        return argv[++i];
    };
    for (int i = 2; i < argc; ++i) {
        const std::string flag = argv[i];
        if (flag == "--config") {
            a.config_path = value(i, "--config");
        } else if (flag == "--seed") {
            a.seed = std::stoull(value(i, "--seed"));
        } else if (flag == "--out") {
            a.out = value(i, "--out");
        } else if (flag == "--lam") {
            a.lam_dir = value(i, "--lam");
        } else if (flag == "--vla") {
            a.vla_dir = value(i, "--vla");
        } else if (flag == "--trace") {
            a.trace_dir = value(i, "--trace");
        } else if (flag == "--force") {
            a.force = true;
        } else if (flag == "--resume") {
            a.resume = true;
        } else {
            throw UsageError("unknown flag: " + flag);
        }
    }
    return a;
}

harness::DataStore load_data(const harness::RunConfig& cfg) {
    harness::DataStore data(cfg, frontend::load_backend(cfg.backend_spec()));
    std::printf("loaded %lld episodes (%lld train / %lld held out) from %s\n",
                static_cast<long long>(data.size()), static_cast<long long>(data.train_count()),
                static_cast<long long>(data.size() - data.train_count()),
                cfg.data.dir.c_str());
    return data;
}

int run(int argc, char** argv) {
    const Args args = parse_args(argc, argv);
    harness::RunConfig cfg = harness::load_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out) cfg.out_dir = *args.out;
    const std::filesystem::path lam_dir = args.lam_dir.empty()
                                              ? harness::lam_checkpoint_dir(cfg)
                                              : std::filesystem::path(args.lam_dir);
    const std::filesystem::path vla_dir = args.vla_dir.empty()
                                              ? harness::vla_checkpoint_dir(cfg)
                                              : std::filesystem::path(args.vla_dir);
    const std::filesystem::path trace_dir = args.trace_dir.empty()
                                                ? std::filesystem::path(cfg.out_dir) / "trace"
                                                : std::filesystem::path(args.trace_dir);

    if (args.command == "dump-config") {
        std::printf("%s\n", cfg.to_json().dump(2).c_str());
        return 0;
    }
    if (args.command == "gen-data") {
        const io::json manifest = harness::gen_data(cfg, args.force);
        std::printf("wrote %lld episodes to %s (config hash %llu)\n",
                    static_cast<long long>(manifest.at("episodes").get<std::int64_t>()),
                    cfg.data.dir.c_str(),
                    static_cast<unsigned long long>(cfg.hash()));
        return 0;
    }
    if (args.command == "train-lam") {
        const harness::DataStore data = load_data(cfg);
        const harness::TrainResult r = harness::train_lam(cfg, data, args.resume);
        std::printf("train-lam: %lld steps, final loss %.6f, checkpoint %s\n",
                    static_cast<long long>(r.steps_done), r.final_loss,
                    r.checkpoint_dir.string().c_str());
        return 0;
    }
    if (args.command == "train-vla") {
        const harness::DataStore data = load_data(cfg);
        const harness::TrainResult r = harness::train_vla(cfg, data, lam_dir, args.resume);
        std::printf("train-vla: %lld steps, final loss %.6f, checkpoint %s\n",
                    static_cast<long long>(r.steps_done), r.final_loss,
                    r.checkpoint_dir.string().c_str());
        return 0;
    }
    if (args.command == "eval") {
        const harness::DataStore data = load_data(cfg);
        const lam::LamModel frozen = harness::load_frozen_lam(cfg, lam_dir);
        const policy::PolicyModel pol = harness::load_policy(cfg, vla_dir);
        const harness::EvalReport report = harness::run_eval(cfg, data, pol, frozen, trace_dir);
        std::printf("%s\n", report.to_json().dump(2).c_str());
        return 0;
    }
    if (args.command == "viz") {
        const lam::LamModel frozen = harness::load_frozen_lam(cfg, lam_dir);
        const std::filesystem::path out = std::filesystem::path(cfg.out_dir) / "viz";
        const harness::VizGrid grid = harness::write_viz(trace_dir, frozen, out);
        for (const std::string& w : grid.warnings) {
            std::fprintf(stderr, "warning: %s\n", w.c_str());
        }
        std::printf("wrote %s (%lld x %lld)%s\n", (out / "grid_rgb.png").string().c_str(),
                    static_cast<long long>(grid.width), static_cast<long long>(grid.height),
                    grid.has_depth ? " and grid_depth.png" : "");
        return 0;
    }
    throw UsageError("unknown command: " + args.command);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n\n", e.what());
        print_usage(stderr);
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
