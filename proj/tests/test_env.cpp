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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ssmvla/env/episode.hpp"
#include "ssmvla/env/language.hpp"
#include "ssmvla/env/pushworld.hpp"

using namespace ssmvla;
namespace fs = std::filesystem;

namespace {

/// The analytic depth the camera model assigns to a pixel over a surface at
/// elevation `elev` — recomputed here independently of the renderer.
float expected_depth(int iy, float elev) {
    const float rowfrac = (static_cast<float>(iy) + 0.5f) / 64.0f;
    return env::kCamBase + env::kCamTilt * rowfrac - elev;
}

env::EnvState bare_state(const std::string& task = "push_red") {
    env::EnvState s;
    s.task_id = task;
    s.gx = 10.0f;
    s.gy = 10.0f;
    return s;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("ssmvla_env_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("rendered colors are exact palette entries") {
    env::EnvState s = env::reset(11, "push_red");
    env::Observation obs = env::render(s);
    for (std::int64_t i = 0; i < obs.rgb.numel(); ++i) {
        const float v = obs.rgb[i] * 255.0f;
        REQUIRE(v == std::floor(v));  // exact u8 multiples survive a u8 round trip
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 255.0f);
    }
    std::set<std::array<int, 3>> seen;
    for (std::int64_t p = 0; p < 64 * 64; ++p) {
        seen.insert({static_cast<int>(obs.rgb[p * 3] * 255.0f),
                     static_cast<int>(obs.rgb[p * 3 + 1] * 255.0f),
                     static_cast<int>(obs.rgb[p * 3 + 2] * 255.0f)});
    }
    for (const auto& c : seen) {
        bool known = (c == std::array<int, 3>{250, 250, 250});
        for (const auto& pal : env::kPalette) {
            if (c == std::array<int, 3>{pal[0], pal[1], pal[2]}) known = true;
        }
        REQUIRE(known);
    }
    REQUIRE(seen.size() >= 6);  // table, zone, marker, marker center, 3+ blocks
}

TEST_CASE("depth matches the analytic camera model") {
    env::EnvState s = bare_state();
    env::Block table_block;
    table_block.x = 40.0f;
    table_block.y = 40.0f;
    table_block.z = 0.0f;
    table_block.color = 0;
    env::Block stacked = table_block;
    stacked.z = env::kBlockH;
    stacked.color = 1;
    s.blocks = {table_block, stacked};

    env::Observation obs = env::render(s);
    // Background far from everything.
    REQUIRE(obs.depth.at(2, 60) == expected_depth(2, 0.0f));
    REQUIRE(obs.depth.at(60, 60) == expected_depth(60, 0.0f));
    // The stack is two block heights tall and the stacked block wins the pixel.
    REQUIRE(obs.depth.at(40, 40) == expected_depth(40, 2.0f * env::kBlockH));
    REQUIRE(obs.rgb.at(40, 40, 1) == static_cast<float>(env::kPalette[1][1]) / 255.0f);
    // Marker on the open table sits kMarkerH above it.
    REQUIRE(obs.depth.at(10, 10) == expected_depth(10, env::kMarkerH));

    // Strict positivity and per-pixel "closer than background".
    for (int iy = 0; iy < 64; ++iy) {
        for (int ix = 0; ix < 64; ++ix) {
            REQUIRE(obs.depth.at(iy, ix) > 0.0f);
            REQUIRE(obs.depth.at(iy, ix) <= expected_depth(iy, 0.0f));
        }
    }
}

TEST_CASE("single-block scene: depth minimum falls inside the block footprint") {
    env::EnvState s = bare_state();
    env::Block b;
    b.x = 44.0f;
    b.y = 30.0f;
    b.color = 2;
    s.blocks = {b};
    const Tensor<float> depth = env::render_depth(s);
    float best = 1e30f;
    int best_ix = -1, best_iy = -1;
    for (int iy = 0; iy < 64; ++iy) {
        for (int ix = 0; ix < 64; ++ix) {
            if (depth.at(iy, ix) < best) {
                best = depth.at(iy, ix);
                best_ix = ix;
                best_iy = iy;
            }
        }
    }
    REQUIRE(std::abs(static_cast<float>(best_ix) + 0.5f - b.x) < env::kBlockHalf);
    REQUIRE(std::abs(static_cast<float>(best_iy) + 0.5f - b.y) < env::kBlockHalf);
}

TEST_CASE("zero action changes nothing but the step index") {
    env::EnvState s = env::reset(5, "lift_red");
    const env::EnvState before = s;
    const env::Observation frame0 = env::render(s);
    env::StepOut out = env::step(s, {0.0f, 0.0f, 0.0f});
    REQUIRE(s.step_index == before.step_index + 1);
    REQUIRE(s.gx == before.gx);
    REQUIRE(s.gy == before.gy);
    REQUIRE(s.carried == before.carried);
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
        REQUIRE(s.blocks[i].x == before.blocks[i].x);
        REQUIRE(s.blocks[i].y == before.blocks[i].y);
        REQUIRE(s.blocks[i].z == before.blocks[i].z);
    }
    REQUIRE(out.obs.rgb == frame0.rgb);
    REQUIRE(out.obs.depth == frame0.depth);
}

TEST_CASE("same seed bit-identical, different seed differs") {
    const env::RolloutResult a = env::run_expert(17, "place_green", 80);
    const env::RolloutResult b = env::run_expert(17, "place_green", 80);
    REQUIRE(a.episode.rgb == b.episode.rgb);
    REQUIRE(a.episode.depth == b.episode.depth);
    REQUIRE(a.episode.actions == b.episode.actions);

    const env::RolloutResult c = env::run_expert(18, "place_green", 80);
    REQUIRE_FALSE(a.episode.rgb == c.episode.rgb);

    // Task id feeds the layout too: same seed, different task, different world.
    const env::EnvState s1 = env::reset(17, "place_green");
    const env::EnvState s2 = env::reset(17, "push_red");
    REQUIRE((s1.blocks[0].x != s2.blocks[0].x || s1.blocks[0].y != s2.blocks[0].y));
}

TEST_CASE("velocity clipping, wall clamping, and non-finite rejection") {
    env::EnvState s = bare_state();
    s.gx = 32.0f;
    s.gy = 32.0f;
    env::step_state(s, {100.0f, -7.0f, 0.0f});
    REQUIRE(s.gx == 34.0f);
    REQUIRE(s.gy == 30.0f);
    for (int i = 0; i < 40; ++i) env::step_state(s, {2.0f, -2.0f, 0.0f});
    REQUIRE(s.gx == env::kGripMax);
    REQUIRE(s.gy == env::kGripMin);
    REQUIRE_THROWS_AS(
        env::step_state(s, {std::numeric_limits<float>::quiet_NaN(), 0.0f, 0.0f}),
        std::invalid_argument);
    REQUIRE_THROWS_AS(
        env::step_state(s, {0.0f, std::numeric_limits<float>::infinity(), 0.0f}),
        std::invalid_argument);
}

TEST_CASE("push resolves along the least-penetration axis") {
    env::EnvState s = bare_state();
    env::Block b;
    b.x = 30.0f;
    b.y = 30.0f;
    s.blocks = {b};
    s.gx = 24.4f;
    s.gy = 31.0f;
    env::step_state(s, {2.0f, 0.0f, 0.0f});
    // Gripper lands at (26.4, 31): x-penetration 1.4 < y-penetration 4.
    REQUIRE(s.gx == 26.4f);
    REQUIRE(s.blocks[0].x == Catch::Approx(31.4).margin(1e-5));
    REQUIRE(s.blocks[0].y == 30.0f);

    // Pushed from above with a small x offset: resolves along y instead.
    env::EnvState s2 = bare_state();
    s2.blocks = {b};
    s2.gx = 31.0f;
    s2.gy = 24.4f;
    env::step_state(s2, {0.0f, 2.0f, 0.0f});
    REQUIRE(s2.blocks[0].x == 30.0f);
    REQUIRE(s2.blocks[0].y == Catch::Approx(31.4).margin(1e-5));

    // Blocks clamp to the tabletop interior.
    env::EnvState s3 = bare_state();
    env::Block edge;
    edge.x = 57.5f;
    edge.y = 30.0f;
    s3.blocks = {edge};
    s3.gx = 53.0f;
    s3.gy = 30.0f;
    env::step_state(s3, {2.0f, 0.0f, 0.0f});
    env::step_state(s3, {2.0f, 0.0f, 0.0f});
    REQUIRE(s3.blocks[0].x == env::kBlockMax);

    // A lifted block is never pushed.
    env::EnvState s4 = bare_state();
    env::Block raised = b;
    raised.z = env::kLiftZ;
    s4.blocks = {raised};
    s4.gx = 28.0f;
    s4.gy = 30.0f;
    env::step_state(s4, {2.0f, 0.0f, 0.0f});
    REQUIRE(s4.blocks[0].x == 30.0f);
}

TEST_CASE("grasp radius boundary and carried kinematics") {
    env::EnvState s = bare_state();
    env::Block b;
    b.x = 30.0f;
    b.y = 30.0f;
    s.blocks = {b};
    s.gx = 36.5f;
    s.gy = 30.0f;
    env::step_state(s, {0.0f, 0.0f, 1.0f});  // distance 6.5 > radius 6
    REQUIRE(s.carried == -1);
    env::step_state(s, {-0.5f, 0.0f, 1.0f});  // lands at distance 6 exactly
    REQUIRE(s.carried == 0);
    REQUIRE(s.blocks[0].z == env::kLiftZ);
    REQUIRE(s.blocks[0].x == s.gx);

    env::step_state(s, {2.0f, 1.0f, 0.0f});  // carried block tracks the gripper
    REQUIRE(s.blocks[0].x == s.gx);
    REQUIRE(s.blocks[0].y == s.gy);
    REQUIRE(s.blocks[0].z == env::kLiftZ);

    // Grip strength inside the dead zone toggles nothing.
    env::step_state(s, {0.0f, 0.0f, -0.4f});
    REQUIRE(s.carried == 0);
    env::step_state(s, {0.0f, 0.0f, -1.0f});
    REQUIRE(s.carried == -1);
    REQUIRE(s.blocks[0].z == 0.0f);
}

TEST_CASE("grasp prefers the topmost block, then the nearest") {
    env::EnvState s = bare_state();
    env::Block base;
    base.x = 30.0f;
    base.y = 30.0f;
    env::Block top = base;
    top.z = env::kBlockH;
    top.color = 1;
    s.blocks = {base, top};
    s.gx = 33.0f;
    s.gy = 30.0f;
    env::step_state(s, {0.0f, 0.0f, 1.0f});
    REQUIRE(s.carried == 1);  // the stacked block is grabbed first

    env::EnvState s2 = bare_state();
    env::Block far = base;
    env::Block near = base;
    near.x = 35.0f;
    near.color = 1;
    s2.blocks = {far, near};
    s2.gx = 33.0f;
    s2.gy = 30.0f;
    env::step_state(s2, {0.0f, 0.0f, 1.0f});
    REQUIRE(s2.carried == 1);  // equal height: nearest wins
}

TEST_CASE("release stacks onto a support block") {
    env::EnvState s = bare_state();
    env::Block a;
    a.x = 30.0f;
    a.y = 30.0f;
    env::Block c;
    c.x = 44.0f;
    c.y = 30.0f;
    c.color = 1;
    s.blocks = {a, c};
    s.gx = 30.0f;
    s.gy = 30.0f;
    env::step_state(s, {0.0f, 0.0f, 1.0f});
    REQUIRE(s.carried == 0);
    // Carry block 0 over block 1 and drop it: it rests on block 1's top.
    while (s.gx < 44.0f) env::step_state(s, {2.0f, 0.0f, 0.0f});
    env::step_state(s, {0.0f, 0.0f, -1.0f});
    REQUIRE(s.carried == -1);
    REQUIRE(s.blocks[0].z == env::kBlockH);
    REQUIRE(s.blocks[0].x == 44.0f);

    // Dropping over open table lands at elevation zero.
    env::step_state(s, {0.0f, 0.0f, 1.0f});
    REQUIRE(s.carried == 0);
    for (int i = 0; i < 6; ++i) env::step_state(s, {0.0f, 2.0f, 0.0f});
    env::step_state(s, {0.0f, 0.0f, -1.0f});
    REQUIRE(s.blocks[0].z == 0.0f);
}

TEST_CASE("subtask predicates") {
    env::EnvState s = bare_state("push_red");
    env::Block red;
    red.x = env::kZoneX + 2.0f;
    red.y = env::kZoneY;
    env::Block green;
    green.x = 40.0f;
    green.y = 40.0f;
    green.color = 1;
    s.blocks = {red, green};
    REQUIRE(env::subtask_done(s));
    s.task_id = "place_red";
    REQUIRE(env::subtask_done(s));
    s.task_id = "push_green";
    REQUIRE_FALSE(env::subtask_done(s));
    s.task_id = "lift_red";
    REQUIRE_FALSE(env::subtask_done(s));
    s.carried = 0;
    s.blocks[0].z = env::kLiftZ;
    REQUIRE(env::subtask_done(s));
    // A block held over the zone does not count as pushed/placed.
    s.task_id = "place_red";
    REQUIRE_FALSE(env::subtask_done(s));
}

TEST_CASE("scripted expert solves 100 held-out seeds") {
    const auto& tasks = env::task_vocabulary();
    int ok = 0;
    for (std::uint64_t seed = 1000; seed < 1100; ++seed) {
        const auto& task = tasks[static_cast<std::size_t>(seed) % tasks.size()];
        if (env::run_expert(seed, task, 80).success) ++ok;
    }
    REQUIRE(ok >= 99);
}

TEST_CASE("scripted expert pushes the red block home from seed 0 within 60 steps") {
    const env::RolloutResult r = env::run_expert(0, "push_red", 60);
    REQUIRE(r.success);
    REQUIRE(r.episode.length() - 1 <= 60);
}

TEST_CASE("expert emits a zero action once the subtask is satisfied") {
    env::EnvState s = bare_state("push_red");
    env::Block red;
    red.x = env::kZoneX;
    red.y = env::kZoneY;
    s.blocks = {red};
    const env::Action a = env::scripted_expert(s, "push_red");
    REQUIRE(a.dx == 0.0f);
    REQUIRE(a.dy == 0.0f);
    REQUIRE(a.grip == 0.0f);
}

TEST_CASE("chained subtasks from one persistent world") {
    env::EnvState s = env::reset(7, "push_red");
    for (const char* task : {"push_red", "place_green", "lift_red"}) {
        s.task_id = task;
        env::release_in_place(s);
        bool done = env::subtask_done(s);
        for (int i = 0; i < 80 && !done; ++i) {
            done = env::step(s, env::scripted_expert(s, task)).done;
        }
        REQUIRE(done);
    }
}

TEST_CASE("instructions and tokenizer") {
    REQUIRE(env::instruction_for("push_red") == "push the red block to the target");
    REQUIRE(env::instruction_for("lift_green") == "lift the green block");
    REQUIRE(env::instruction_for("place_blue") == "place the blue block on the target");
    REQUIRE_THROWS_AS(env::instruction_for("push_purple"), std::invalid_argument);

    const auto& vocab = env::vocabulary();
    REQUIRE(std::is_sorted(vocab.begin(), vocab.end()));
    REQUIRE(std::set<std::string>(vocab.begin(), vocab.end()).size() == vocab.size());
    REQUIRE(env::vocab_size() == static_cast<std::int64_t>(vocab.size()) + 1);

    for (const auto& task : env::task_vocabulary()) {
        const auto ids = env::tokenize(env::instruction_for(task));
        REQUIRE(static_cast<int>(ids.size()) == env::kLangTokens);
        for (const std::int64_t id : ids) {
            REQUIRE(id >= 0);
            REQUIRE(id < env::vocab_size());
        }
        REQUIRE(ids[0] > 0);  // instructions are non-empty, padding is trailing
    }
    // Distinct instructions give distinct token sequences.
    REQUIRE(env::tokenize(env::instruction_for("push_red")) !=
            env::tokenize(env::instruction_for("push_blue")));
    REQUIRE_THROWS_AS(env::tokenize("open the pod bay doors"), std::invalid_argument);
}

TEST_CASE("episode write/read round trip") {
    TempDir tmp;
    const env::RolloutResult r = env::run_expert(3, "place_red", 80);
    REQUIRE(r.success);
    const fs::path dir = tmp.path / "ep0000";
    env::write_episode(dir, r.episode);

    const env::Episode back = env::read_episode(dir);
    REQUIRE(back.task_id == r.episode.task_id);
    REQUIRE(back.instruction == r.episode.instruction);
    REQUIRE(back.seed == r.episode.seed);
    REQUIRE(back.rgb == r.episode.rgb);
    REQUIRE(back.depth == r.episode.depth);
    REQUIRE(back.actions == r.episode.actions);
    REQUIRE(back.length() == back.actions.dim(0) + 1);
}

TEST_CASE("episode reader rejects malformed directories") {
    TempDir tmp;
    const env::RolloutResult r = env::run_expert(4, "lift_red", 80);
    const fs::path dir = tmp.path / "ep";
    env::write_episode(dir, r.episode);

    SECTION("truncated tensor payload") {
        const auto sz = fs::file_size(dir / "rgb.ssvt");
        fs::resize_file(dir / "rgb.ssvt", sz - 5);
        REQUIRE_THROWS_AS(env::read_episode(dir), io::FormatError);
    }
    SECTION("unsupported schema version") {
        auto meta = io::load_json(dir / "meta.json");
        meta["schema_version"] = env::kEpisodeSchemaVersion + 1;
        io::save_json(dir / "meta.json", meta);
        REQUIRE_THROWS_AS(env::read_episode(dir), io::FormatError);
    }
    SECTION("length disagrees with tensors") {
        auto meta = io::load_json(dir / "meta.json");
        meta["length"] = meta["length"].get<std::int64_t>() + 1;
        io::save_json(dir / "meta.json", meta);
        REQUIRE_THROWS_AS(env::read_episode(dir), io::FormatError);
    }
    SECTION("corrupt meta.json") {
        std::ofstream(dir / "meta.json") << "{not json";
        REQUIRE_THROWS_AS(env::read_episode(dir), io::FormatError);
    }
    SECTION("missing actions file") {
        fs::remove(dir / "actions.ssvt");
        REQUIRE_THROWS_AS(env::read_episode(dir), io::FormatError);
    }
}

TEST_CASE("observation shapes and marker visibility") {
    env::EnvState s = env::reset(2, "push_blue");
    env::Observation obs = env::render(s);
    REQUIRE(obs.rgb.shape() == std::vector<std::int64_t>{64, 64, 3});
    REQUIRE(obs.depth.shape() == std::vector<std::int64_t>{64, 64});
    REQUIRE(obs.rgb.all_finite());
    REQUIRE(obs.depth.all_finite());

    const auto marker_at = [&](const env::EnvState& st) {
        const env::Observation o = env::render(st);
        const int ix = static_cast<int>(st.gx);
        const int iy = static_cast<int>(st.gy);
        return o.rgb.at(iy, ix, 0) == 250.0f / 255.0f;
    };
    REQUIRE(marker_at(s));

    // Even while carrying a block the marker stays visible on top of it.
    env::EnvState c = bare_state();
    env::Block b;
    b.x = 30.5f;
    b.y = 30.5f;
    b.z = env::kLiftZ;
    c.blocks = {b};
    c.gx = 30.5f;
    c.gy = 30.5f;
    c.carried = 0;
    REQUIRE(marker_at(c));
    // And the marker pixel is nearer to the camera than the block pixel
    // beside it on the same row (outside the 5x5 marker footprint).
    const env::Observation o = env::render(c);
    REQUIRE(o.depth.at(30, 30) < o.depth.at(30, 34));
}

TEST_CASE("action dimension constant") {
    REQUIRE(env::kActionDim == 3);
    const env::RolloutResult r = env::run_expert(9, "push_green", 80);
    REQUIRE(r.episode.actions.dim(1) == env::kActionDim);
    // Expert actions respect the speed and grip envelopes.
    for (std::int64_t t = 0; t < r.episode.actions.dim(0); ++t) {
        REQUIRE(std::abs(r.episode.actions.at(t, 0)) <= env::kMaxSpeed);
        REQUIRE(std::abs(r.episode.actions.at(t, 1)) <= env::kMaxSpeed);
        REQUIRE(std::abs(r.episode.actions.at(t, 2)) <= 1.0f);
    }
}
