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

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/core/tensor.hpp"

namespace ssmvla::env {

// PushWorld: a deterministic top-down 2D table with colored blocks, a point
// gripper, and a fixed target zone. Kinematic pushing, grasping, and lifting.
// All dynamics and rendering use plain IEEE float arithmetic (no libm except
// sqrt), so trajectories and frames are bit-stable across machines.

inline constexpr int kSize = 64;
inline constexpr float kBlockHalf = 5.0f;
inline constexpr float kBlockH = 0.25f;
inline constexpr float kMarkerH = 0.1f;
inline constexpr float kMarkerHalf = 2.5f;
inline constexpr float kLiftZ = 0.5f;
inline constexpr float kMaxSpeed = 2.0f;
inline constexpr float kGraspRadius = 6.0f;
inline constexpr float kZoneX = 16.0f;
inline constexpr float kZoneY = 16.0f;
inline constexpr float kZoneR = 6.0f;
inline constexpr float kGripMin = 3.0f;
inline constexpr float kGripMax = 61.0f;
inline constexpr float kBlockMin = 6.0f;
inline constexpr float kBlockMax = 58.0f;
inline constexpr float kCamBase = 2.0f;
inline constexpr float kCamTilt = 0.15f;
inline constexpr int kActionDim = 3;

struct Action {
    float dx = 0.0f;
    float dy = 0.0f;
    float grip = 0.0f;
};

struct Observation {
    Tensor<float> rgb;    // kSize x kSize x 3 in [0,1]
    Tensor<float> depth;  // kSize x kSize, strictly positive
    int step_index = 0;
};

struct Block {
    float x = 0.0f;
    float y = 0.0f;
    float z = 0.0f;  // base elevation: 0 on table, stacked, or kLiftZ carried
    int color = 0;   // palette index
};

struct EnvState {
    std::string task_id;
    std::vector<Block> blocks;
    float gx = 32.0f;
    float gy = 32.0f;
    int carried = -1;
    int step_index = 0;
};

// Palette as exact u8 triples; floats are u8/255, so frames survive a u8
// round trip losslessly. Index 0..2 are the task colors.
inline constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette = {{
    {200, 40, 40},    // 0 red block
    {40, 180, 40},    // 1 green block
    {40, 80, 220},    // 2 blue block
    {220, 200, 40},   // 3 yellow distractor
    {160, 40, 200},   // 4 purple distractor
    {160, 160, 160},  // 5 table
    {130, 130, 135},  // 6 target zone
    {30, 30, 30},     // 7 gripper marker
}};
inline constexpr std::array<std::uint8_t, 3> kMarkerCenter = {250, 250, 250};

inline const std::vector<std::string>& task_vocabulary() {
    static const std::vector<std::string> kTasks = {
        "push_red",  "push_green",  "push_blue", "lift_red",
        "lift_green", "place_red",  "place_green", "place_blue",
    };
    return kTasks;
}

inline bool task_registered(const std::string& task_id) {
    for (const auto& t : task_vocabulary()) {
        if (t == task_id) return true;
    }
    return false;
}

inline int task_color(const std::string& task_id) {
    if (task_id.ends_with("red")) return 0;
    if (task_id.ends_with("green")) return 1;
    if (task_id.ends_with("blue")) return 2;
    throw std::invalid_argument("task_color: unknown color in " + task_id);
}

inline bool task_is_push(const std::string& t) { return t.rfind("push_", 0) == 0; }
inline bool task_is_lift(const std::string& t) { return t.rfind("lift_", 0) == 0; }
inline bool task_is_place(const std::string& t) { return t.rfind("place_", 0) == 0; }

inline std::string instruction_for(const std::string& task_id) {
    if (!task_registered(task_id)) throw std::invalid_argument("unknown task_id: " + task_id);
    static const char* kColorNames[3] = {"red", "green", "blue"};
    const std::string color = kColorNames[task_color(task_id)];
    if (task_is_push(task_id)) return "push the " + color + " block to the target";
    if (task_is_lift(task_id)) return "lift the " + color + " block";
    return "place the " + color + " block on the target";
}

inline int block_of_color(const EnvState& s, int color) {
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
        if (s.blocks[i].color == color) return static_cast<int>(i);
    }
    throw std::logic_error("block_of_color: color not present");
}

inline float clampf(float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); }

inline EnvState reset(std::uint64_t seed, const std::string& task_id) {
    if (!task_registered(task_id)) throw std::invalid_argument("unknown task_id: " + task_id);
    Rng rng(mix_seed(seed, fnv1a(task_id)));
    EnvState s;
    s.task_id = task_id;
    const int extra = static_cast<int>(rng.uniform_int(3));  // 0..2 distractors
    const int count = 3 + extra;
    for (int i = 0; i < count; ++i) {
        Block b;
        b.color = i;  // 0,1,2 task colors; 3,4 distractors
        for (int attempt = 0; attempt < 1000; ++attempt) {
            b.x = static_cast<float>(rng.uniform(10.0, 54.0));
            b.y = static_cast<float>(rng.uniform(10.0, 54.0));
            const float zx = b.x - kZoneX, zy = b.y - kZoneY;
            if (zx * zx + zy * zy < 13.0f * 13.0f) continue;  // keep tasks non-trivial
            bool clear = true;
            for (const Block& other : s.blocks) {
                if (std::abs(b.x - other.x) < 12.0f && std::abs(b.y - other.y) < 12.0f) {
                    clear = false;
                    break;
                }
            }
            if (clear) break;
        }
        s.blocks.push_back(b);
    }
    for (int attempt = 0; attempt < 1000; ++attempt) {
        s.gx = static_cast<float>(rng.uniform(6.0, 58.0));
        s.gy = static_cast<float>(rng.uniform(6.0, 58.0));
        bool clear = true;
        for (const Block& b : s.blocks) {
            const float dx = s.gx - b.x, dy = s.gy - b.y;
            if (dx * dx + dy * dy < 8.0f * 8.0f) {
                clear = false;
                break;
            }
        }
        if (clear) break;
    }
    return s;
}

inline bool subtask_done(const EnvState& s) {
    const int idx = block_of_color(s, task_color(s.task_id));
    const Block& b = s.blocks[static_cast<std::size_t>(idx)];
    if (task_is_lift(s.task_id)) return s.carried == idx;
    const float dx = b.x - kZoneX, dy = b.y - kZoneY;
    return s.carried != idx && dx * dx + dy * dy <= kZoneR * kZoneR;
}

/// Kinematic update. Per-component velocity clipping to the max speed is the
/// documented out-of-range behavior (no error). Pushing applies only when the
/// gripper actually moves, so a zero action changes nothing but step_index.
inline void step_state(EnvState& s, const Action& a) {
    if (!std::isfinite(a.dx) || !std::isfinite(a.dy) || !std::isfinite(a.grip)) {
        throw std::invalid_argument("step: non-finite action");
    }
    const float dx = clampf(a.dx, -kMaxSpeed, kMaxSpeed);
    const float dy = clampf(a.dy, -kMaxSpeed, kMaxSpeed);
    const float g = clampf(a.grip, -1.0f, 1.0f);
    s.gx = clampf(s.gx + dx, kGripMin, kGripMax);
    s.gy = clampf(s.gy + dy, kGripMin, kGripMax);

    if (s.carried >= 0) {
        Block& b = s.blocks[static_cast<std::size_t>(s.carried)];
        b.x = s.gx;
        b.y = s.gy;
        b.z = kLiftZ;
    } else if (dx != 0.0f || dy != 0.0f) {
        // Minimum-translation push of any on-table block the gripper entered.
        for (Block& b : s.blocks) {
            if (b.z != 0.0f) continue;
            const float ox = s.gx - b.x, oy = s.gy - b.y;
            if (std::abs(ox) < kBlockHalf && std::abs(oy) < kBlockHalf) {
                const float px = kBlockHalf - std::abs(ox);
                const float py = kBlockHalf - std::abs(oy);
                if (px <= py) {
                    b.x += (ox < 0.0f ? px : -px);
                } else {
                    b.y += (oy < 0.0f ? py : -py);
                }
                b.x = clampf(b.x, kBlockMin, kBlockMax);
                b.y = clampf(b.y, kBlockMin, kBlockMax);
            }
        }
    }

    if (g > 0.5f && s.carried < 0) {
        // Grasp the topmost block within reach; at equal height prefer the
        // nearest, and on exact ties the lowest index.
        int best = -1;
        float best_top = -1.0f;
        float best_d2 = 0.0f;
        for (std::size_t i = 0; i < s.blocks.size(); ++i) {
            const Block& b = s.blocks[i];
            const float ox = s.gx - b.x, oy = s.gy - b.y;
            const float d2 = ox * ox + oy * oy;
            if (d2 <= kGraspRadius * kGraspRadius) {
                const float top = b.z + kBlockH;
                if (top > best_top || (top == best_top && d2 < best_d2)) {
                    best_top = top;
                    best_d2 = d2;
                    best = static_cast<int>(i);
                }
            }
        }
        if (best >= 0) {
            s.carried = best;
            Block& b = s.blocks[static_cast<std::size_t>(best)];
            b.x = s.gx;
            b.y = s.gy;
            b.z = kLiftZ;
        }
    } else if (g < -0.5f && s.carried >= 0) {
        Block& b = s.blocks[static_cast<std::size_t>(s.carried)];
        float support = 0.0f;
        for (std::size_t i = 0; i < s.blocks.size(); ++i) {
            if (static_cast<int>(i) == s.carried) continue;
            const Block& o = s.blocks[i];
            if (std::abs(b.x - o.x) < kBlockHalf && std::abs(b.y - o.y) < kBlockHalf) {
                support = std::max(support, o.z + kBlockH);
            }
        }
        b.z = support;
        s.carried = -1;
    }
    s.step_index += 1;
}

/// Renders RGB and depth in one pass. Depth is an analytic distance field for
/// a camera looking down at a slight tilt: kCamBase + kCamTilt*(row fraction)
/// minus the top-surface elevation at the pixel.
inline Observation render(const EnvState& s) {
    Observation obs;
    obs.step_index = s.step_index;
    obs.rgb = Tensor<float>({kSize, kSize, 3});
    obs.depth = Tensor<float>({kSize, kSize});
    std::array<float, kSize * kSize> elev{};
    std::array<std::uint8_t, kSize * kSize> color{};

    for (int iy = 0; iy < kSize; ++iy) {
        const float py = static_cast<float>(iy) + 0.5f;
        for (int ix = 0; ix < kSize; ++ix) {
            const float px = static_cast<float>(ix) + 0.5f;
            const float zx = px - kZoneX, zy = py - kZoneY;
            color[static_cast<std::size_t>(iy * kSize + ix)] =
                (zx * zx + zy * zy <= kZoneR * kZoneR) ? 6 : 5;
        }
    }

    // Lower tops first so higher surfaces overwrite; stable order for ties.
    std::vector<std::size_t> order(s.blocks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 1; i < order.size(); ++i) {  // insertion sort, stable
        std::size_t j = i;
        while (j > 0 && s.blocks[order[j - 1]].z > s.blocks[order[j]].z) {
            std::swap(order[j - 1], order[j]);
            --j;
        }
    }
    for (std::size_t oi : order) {
        const Block& b = s.blocks[oi];
        const float top = b.z + kBlockH;
        const int x0 = std::max(0, static_cast<int>(b.x - kBlockHalf));
        const int x1 = std::min(kSize - 1, static_cast<int>(b.x + kBlockHalf));
        const int y0 = std::max(0, static_cast<int>(b.y - kBlockHalf));
        const int y1 = std::min(kSize - 1, static_cast<int>(b.y + kBlockHalf));
        for (int iy = y0; iy <= y1; ++iy) {
            const float py = static_cast<float>(iy) + 0.5f;
            if (std::abs(py - b.y) >= kBlockHalf) continue;
            for (int ix = x0; ix <= x1; ++ix) {
                const float px = static_cast<float>(ix) + 0.5f;
                if (std::abs(px - b.x) >= kBlockHalf) continue;
                const std::size_t p = static_cast<std::size_t>(iy * kSize + ix);
                if (top >= elev[p]) {
                    elev[p] = top;
                    color[p] = static_cast<std::uint8_t>(b.color);
                }
            }
        }
    }

    // Gripper marker rides kMarkerH above whatever is underneath it.
    {
        const int x0 = std::max(0, static_cast<int>(s.gx - kMarkerHalf));
        const int x1 = std::min(kSize - 1, static_cast<int>(s.gx + kMarkerHalf));
        const int y0 = std::max(0, static_cast<int>(s.gy - kMarkerHalf));
        const int y1 = std::min(kSize - 1, static_cast<int>(s.gy + kMarkerHalf));
        for (int iy = y0; iy <= y1; ++iy) {
            const float py = static_cast<float>(iy) + 0.5f;
            if (std::abs(py - s.gy) >= kMarkerHalf) continue;
            for (int ix = x0; ix <= x1; ++ix) {
                const float px = static_cast<float>(ix) + 0.5f;
                if (std::abs(px - s.gx) >= kMarkerHalf) continue;
                const std::size_t p = static_cast<std::size_t>(iy * kSize + ix);
                elev[p] += kMarkerH;
                color[p] = 7;
                if (std::abs(px - s.gx) < 0.5f && std::abs(py - s.gy) < 0.5f) color[p] = 8;
            }
        }
    }

    for (int iy = 0; iy < kSize; ++iy) {
        const float rowfrac = (static_cast<float>(iy) + 0.5f) / static_cast<float>(kSize);
        for (int ix = 0; ix < kSize; ++ix) {
            const std::size_t p = static_cast<std::size_t>(iy * kSize + ix);
            obs.depth[static_cast<std::int64_t>(p)] = kCamBase + kCamTilt * rowfrac - elev[p];
            const std::uint8_t c = color[p];
            const std::uint8_t* rgb8 = (c == 8) ? kMarkerCenter.data() : kPalette[c].data();
            for (int ch = 0; ch < 3; ++ch) {
                obs.rgb[static_cast<std::int64_t>(p * 3 + static_cast<std::size_t>(ch))] =
                    static_cast<float>(rgb8[ch]) / 255.0f;
            }
        }
    }
    return obs;
}

inline Tensor<float> render_depth(const EnvState& s) { return render(s).depth; }

struct StepOut {
    Observation obs;
    bool done = false;
};

inline StepOut step(EnvState& s, const Action& a) {
    step_state(s, a);
    StepOut out;
    out.obs = render(s);
    out.done = subtask_done(s);
    return out;
}

namespace detail {

inline Action toward(float gx, float gy, float tx, float ty) {
    float vx = tx - gx, vy = ty - gy;
    const float m = std::max(std::abs(vx), std::abs(vy));
    if (m > kMaxSpeed) {
        const float scale = kMaxSpeed / m;
        vx *= scale;
        vy *= scale;
    }
    return {vx, vy, 0.0f};
}

inline bool segment_hits_box(float ax, float ay, float bx, float by, float cx, float cy,
                             float half) {
    for (int i = 0; i <= 8; ++i) {
        const float t = static_cast<float>(i) / 8.0f;
        const float px = ax + (bx - ax) * t;
        const float py = ay + (by - ay) * t;
        if (std::abs(px - cx) < half && std::abs(py - cy) < half) return true;
    }
    return false;
}

inline float seg_len(float ax, float ay, float bx, float by) {
    const float dx = bx - ax, dy = by - ay;
    return std::sqrt(dx * dx + dy * dy);
}

/// Proportional move toward dest, detouring around the given block if the
/// straight path would plow through it. Routes through up to two corners of
/// an expanded square around the block, requiring every leg to clear the box
/// so waypoints never deadlock against missing line-of-sight.
inline Action navigate(const EnvState& s, float dx, float dy, const Block& avoid) {
    const float half = kBlockHalf + 0.5f;
    const auto clear = [&](float ax, float ay, float bx, float by) {
        return !segment_hits_box(ax, ay, bx, by, avoid.x, avoid.y, half);
    };
    if (clear(s.gx, s.gy, dx, dy)) return toward(s.gx, s.gy, dx, dy);
    if (std::abs(dx - avoid.x) < half && std::abs(dy - avoid.y) < half) {
        // The waypoint itself sits against the block (wall-clamped contact
        // point): no route can clear, so drive at it directly.
        return toward(s.gx, s.gy, dx, dy);
    }

    const float r = kBlockHalf + 4.0f;
    float cx[4], cy[4];
    cx[0] = avoid.x - r; cy[0] = avoid.y - r;
    cx[1] = avoid.x + r; cy[1] = avoid.y - r;
    cx[2] = avoid.x - r; cy[2] = avoid.y + r;
    cx[3] = avoid.x + r; cy[3] = avoid.y + r;
    for (int i = 0; i < 4; ++i) {
        cx[i] = clampf(cx[i], kGripMin, kGripMax);
        cy[i] = clampf(cy[i], kGripMin, kGripMax);
    }
    static constexpr int kAdj[4][2] = {{1, 2}, {0, 3}, {0, 3}, {1, 2}};
    int first = -1;
    float best = 1e30f;
    for (int i = 0; i < 4; ++i) {
        if (!clear(s.gx, s.gy, cx[i], cy[i])) continue;
        const float leg0 = seg_len(s.gx, s.gy, cx[i], cy[i]);
        if (clear(cx[i], cy[i], dx, dy)) {
            const float cost = leg0 + seg_len(cx[i], cy[i], dx, dy);
            if (cost < best) { best = cost; first = i; }
        }
        for (int j : kAdj[i]) {
            if (!clear(cx[j], cy[j], dx, dy)) continue;
            const float cost = leg0 + seg_len(cx[i], cy[i], cx[j], cy[j]) +
                               seg_len(cx[j], cy[j], dx, dy);
            if (cost < best) { best = cost; first = i; }
        }
    }
    if (first >= 0) return toward(s.gx, s.gy, cx[first], cy[first]);
    // Boxed in (e.g. mid-push replan): back straight off the block.
    float ex = s.gx - avoid.x, ey = s.gy - avoid.y;
    const float n = std::sqrt(ex * ex + ey * ey);
    if (n < 1e-6f) { ex = 1.0f; ey = 0.0f; }
    else { ex /= n; ey /= n; }
    return toward(s.gx, s.gy, clampf(s.gx + ex * kMaxSpeed, kGripMin, kGripMax),
                  clampf(s.gy + ey * kMaxSpeed, kGripMin, kGripMax));
}

inline Action approach_and_grasp(const EnvState& s, const Block& b) {
    Action a = toward(s.gx, s.gy, b.x, b.y);
    const float nx = s.gx + a.dx - b.x, ny = s.gy + a.dy - b.y;
    const float d2 = nx * nx + ny * ny;
    if (d2 <= 5.9f * 5.9f) a.grip = 1.0f;
    return a;
}

}  // namespace detail

/// Greedy proportional controller for the given task. Near-zero action once
/// the subtask predicate already holds.
inline Action scripted_expert(const EnvState& s, const std::string& task_id) {
    if (!task_registered(task_id)) throw std::invalid_argument("unknown task_id: " + task_id);
    EnvState probe = s;
    probe.task_id = task_id;
    if (subtask_done(probe)) return {0.0f, 0.0f, 0.0f};

    const int idx = block_of_color(s, task_color(task_id));
    const Block& b = s.blocks[static_cast<std::size_t>(idx)];
    if (s.carried >= 0 && s.carried != idx) return {0.0f, 0.0f, -1.0f};

    if (task_is_lift(task_id)) {
        return detail::approach_and_grasp(s, b);
    }

    // push/place share the goal "target block inside the zone". Carrying the
    // block (place style, or inherited from a previous subtask) flies it in;
    // otherwise place picks it up first and push shoves it.
    if (s.carried == idx) {
        const float dx = s.gx - kZoneX, dy = s.gy - kZoneY;
        if (dx * dx + dy * dy <= 1.2f * 1.2f) return {0.0f, 0.0f, -1.0f};
        return detail::toward(s.gx, s.gy, kZoneX, kZoneY);
    }
    if (task_is_place(task_id)) {
        return detail::approach_and_grasp(s, b);
    }

    // push: overlap resolution moves blocks axis-by-axis, so push along the
    // x offset until it is closed, then along y; each leg advances at full
    // speed with no lateral drift.
    const float zdx = kZoneX - b.x, zdy = kZoneY - b.y;
    float dirx = 0.0f, diry = 0.0f;
    if (std::abs(zdx) >= 1.0f) {
        dirx = zdx >= 0.0f ? 1.0f : -1.0f;
    } else {
        diry = zdy >= 0.0f ? 1.0f : -1.0f;
    }
    const float rx = s.gx - b.x, ry = s.gy - b.y;
    const float behind = -(rx * dirx + ry * diry);
    const float lateral = std::abs(rx * diry - ry * dirx);
    if (behind > 3.0f && lateral <= 2.0f) {
        // Aim past the back face: the overlap resolution turns the incursion
        // into forward block motion and self-centers the contact.
        return detail::toward(s.gx, s.gy, b.x - dirx * (kBlockHalf - 2.0f),
                              b.y - diry * (kBlockHalf - 2.0f));
    }
    const float t_out = kBlockHalf + 1.5f;
    const float contact_x = clampf(b.x - dirx * t_out, kGripMin, kGripMax);
    const float contact_y = clampf(b.y - diry * t_out, kGripMin, kGripMax);
    return detail::navigate(s, contact_x, contact_y, b);
}

/// Drops any carried block in place. The chain evaluation protocol calls this
/// at subtask boundaries so each subtask starts from a static scene.
inline void release_in_place(EnvState& s) {
    if (s.carried < 0) return;
    Block& b = s.blocks[static_cast<std::size_t>(s.carried)];
    float support = 0.0f;
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
        if (static_cast<int>(i) == s.carried) continue;
        const Block& o = s.blocks[i];
        if (std::abs(b.x - o.x) < kBlockHalf && std::abs(b.y - o.y) < kBlockHalf) {
            support = std::max(support, o.z + kBlockH);
        }
    }
    b.z = support;
    s.carried = -1;
}

}  // namespace ssmvla::env
