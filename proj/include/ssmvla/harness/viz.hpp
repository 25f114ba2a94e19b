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

#include "ssmvla/core/io.hpp"
#include "ssmvla/core/png.hpp"
#include "ssmvla/env/pushworld.hpp"
#include "ssmvla/harness/eval.hpp"
#include "ssmvla/lam/model.hpp"

namespace ssmvla::harness {

/// Side-by-side decoder comparison built from an evaluation trace: one column
/// per anchor, three rows — the true next frame, the decoder driven by the
/// encoder's codes, and the decoder driven by the policy's inferred codes.
struct VizGrid {
    std::int64_t cols = 0;
    std::int64_t rows = 3;
    std::int64_t width = 0;   // full grid, pixels
    std::int64_t height = 0;  // full grid, pixels
    std::vector<std::uint8_t> rgb;        // width * height * 3
    bool has_depth = false;
    std::vector<std::uint8_t> depth_rgb;  // grayscale grid, same dims
    std::vector<std::string> warnings;
};

namespace detail {

inline constexpr std::int64_t kVizPad = 2;

inline void blit_rgb(std::vector<std::uint8_t>& buf, std::int64_t grid_w, std::int64_t x0,
                     std::int64_t y0, const Tensor<float>& img) {
    const std::int64_t h = img.dim(0), w = img.dim(1);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (std::int64_t c = 0; c < 3; ++c) {
                const float v = std::clamp(img.at(y, x, c), 0.0f, 1.0f);
                buf[static_cast<std::size_t>(((y0 + y) * grid_w + x0 + x) * 3 + c)] =
                    static_cast<std::uint8_t>(v * 255.0f + 0.5f);
            }
        }
    }
}

inline void blit_gray(std::vector<std::uint8_t>& buf, std::int64_t grid_w, std::int64_t x0,
                      std::int64_t y0, const Tensor<float>& img, float lo, float hi) {
    const std::int64_t h = img.dim(0), w = img.dim(1);
    const float span = hi > lo ? hi - lo : 1.0f;
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const float v = std::clamp((img.at(y, x) - lo) / span, 0.0f, 1.0f);
            const auto g = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
            for (std::int64_t c = 0; c < 3; ++c) {
                buf[static_cast<std::size_t>(((y0 + y) * grid_w + x0 + x) * 3 + c)] = g;
            }
        }
    }
}

/// Codebook rows for one latent block out of a stored index table.
inline Tensor<float> z_block_from_ids(const Tensor<std::int64_t>& ids, std::int64_t anchor,
                                      std::int64_t block, std::int64_t t_z,
                                      const Tensor<float>& codes) {
    Tensor<float> z({t_z, codes.dim(1)});
    for (std::int64_t j = 0; j < t_z; ++j) {
        const std::int64_t id = ids.at(anchor, block * t_z + j);
        if (id < 0 || id >= codes.dim(0)) {
            throw std::runtime_error("viz: code index " + std::to_string(id) +
                                     " outside the codebook");
        }
        for (std::int64_t d = 0; d < codes.dim(1); ++d) z.at(j, d) = codes.at(id, d);
    }
    return z;
}

}  // namespace detail

/// Renders the comparison grid from a trace directory. A trace without a
/// depth channel is handled by feeding the decoder a constant-depth anchor
/// observation and skipping the depth grid, with a warning.
inline VizGrid render_viz_grid(const std::filesystem::path& trace_dir,
                               const lam::LamModel& lam) {
    namespace fs = std::filesystem;
    if (!fs::exists(trace_dir / "meta.json")) {
        throw std::runtime_error("viz: no trace at " + trace_dir.string() +
                                 "; run eval first");
    }
    const json meta = io::load_json(trace_dir / "meta.json");
    if (meta.at("schema_version").get<int>() != kTraceSchemaVersion) {
        throw std::runtime_error("viz: unsupported trace schema_version");
    }
    const auto anchors = meta.at("anchors").get<std::int64_t>();
    const auto n_future = meta.at("n_future").get<std::int64_t>();
    const auto t_z = meta.at("tokens_per_step").get<std::int64_t>();
    const bool has_depth = meta.at("has_depth").get<bool>();
    if (anchors < 1) throw std::runtime_error("viz: trace holds no anchors");
    const lam::LamConfig& lcfg = lam.config();
    if (t_z != lcfg.tokens_per_step || n_future != lcfg.n_future) {
        throw std::runtime_error("viz: trace latent geometry does not match the model");
    }

    const Tensor<float> trace_rgb = io::load_tensor<float>(trace_dir / "frames_rgb.ssvt");
    const auto lam_z = io::load_tensor<std::int64_t>(trace_dir / "lam_z.ssvt");
    const auto policy_z = io::load_tensor<std::int64_t>(trace_dir / "policy_z.ssvt");
    Tensor<float> trace_depth;
    if (has_depth) trace_depth = io::load_tensor<float>(trace_dir / "frames_depth.ssvt");

    const std::int64_t size = env::kSize;
    const std::int64_t frame_px = size * size;
    const auto frame_rgb = [&](std::int64_t a, std::int64_t k) {
        Tensor<float> img({size, size, 3});
        const std::int64_t base = (a * (n_future + 1) + k) * frame_px * 3;
        for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = trace_rgb[base + i];
        return img;
    };
    const auto frame_depth = [&](std::int64_t a, std::int64_t k) {
        Tensor<float> img({size, size});
        if (!has_depth) {
            img = Tensor<float>::full({size, size}, env::kCamBase);
            return img;
        }
        const std::int64_t base = (a * (n_future + 1) + k) * frame_px;
        for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = trace_depth[base + i];
        return img;
    };

    VizGrid grid;
    grid.cols = anchors;
    grid.has_depth = has_depth;
    const std::int64_t pad = detail::kVizPad;
    grid.width = pad + anchors * (size + pad);
    grid.height = pad + grid.rows * (size + pad);
    grid.rgb.assign(static_cast<std::size_t>(grid.width * grid.height * 3), 255);
    if (!has_depth) {
        grid.warnings.push_back(
            "trace has no depth channel; decoding from a constant-depth anchor and "
            "skipping the depth grid");
    }

    const Tensor<float>& codes = lam.codebook().codes->value;
    std::vector<Tensor<float>> depth_cells;  // row-major, only when has_depth
    for (std::int64_t a = 0; a < anchors; ++a) {
        const Tensor<float> anchor_rgb = frame_rgb(a, 0);
        const Tensor<float> anchor_depth = frame_depth(a, 0);
        const lam::DecodedFrame from_enc = lam.decode(
            anchor_rgb, anchor_depth, detail::z_block_from_ids(lam_z, a, 0, t_z, codes));
        const lam::DecodedFrame from_pol = lam.decode(
            anchor_rgb, anchor_depth, detail::z_block_from_ids(policy_z, a, 0, t_z, codes));
        const std::int64_t x0 = pad + a * (size + pad);
        detail::blit_rgb(grid.rgb, grid.width, x0, pad, frame_rgb(a, 1));
        detail::blit_rgb(grid.rgb, grid.width, x0, pad + (size + pad), from_enc.rgb);
        detail::blit_rgb(grid.rgb, grid.width, x0, pad + 2 * (size + pad), from_pol.rgb);
        if (has_depth) {
            depth_cells.push_back(frame_depth(a, 1));
            depth_cells.push_back(from_enc.depth);
            depth_cells.push_back(from_pol.depth);
        }
    }

    if (has_depth) {
        float lo = depth_cells[0][0], hi = lo;
        for (const Tensor<float>& cell : depth_cells) {
            for (std::int64_t i = 0; i < cell.numel(); ++i) {
                lo = std::min(lo, cell[i]);
                hi = std::max(hi, cell[i]);
            }
        }
        grid.depth_rgb.assign(static_cast<std::size_t>(grid.width * grid.height * 3), 255);
        for (std::int64_t a = 0; a < anchors; ++a) {
            const std::int64_t x0 = pad + a * (size + pad);
            for (std::int64_t r = 0; r < 3; ++r) {
                detail::blit_gray(grid.depth_rgb, grid.width, x0, pad + r * (size + pad),
                                  depth_cells[static_cast<std::size_t>(a * 3 + r)], lo, hi);
            }
        }
    }
    return grid;
}

/// Renders and writes grid_rgb.png (and grid_depth.png when the trace has a
/// depth channel) into out_dir. Returns the grid with any warnings.
inline VizGrid write_viz(const std::filesystem::path& trace_dir, const lam::LamModel& lam,
                         const std::filesystem::path& out_dir) {
    VizGrid grid = render_viz_grid(trace_dir, lam);
    io::ensure_dir(out_dir);
    png::write_rgb((out_dir / "grid_rgb.png").string(), grid.rgb.data(),
                   static_cast<int>(grid.width), static_cast<int>(grid.height));
    if (grid.has_depth) {
        png::write_rgb((out_dir / "grid_depth.png").string(), grid.depth_rgb.data(),
                       static_cast<int>(grid.width), static_cast<int>(grid.height));
    }
    return grid;
}

}  // namespace ssmvla::harness
