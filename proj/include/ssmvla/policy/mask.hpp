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

#include <stdexcept>
#include <string>

#include "ssmvla/core/autodiff.hpp"

namespace ssmvla::policy {

namespace ag = ssmvla::ag;

/// Token segments of the unified policy sequence, in their fixed order.
enum class Segment {
    kHistoryVisual = 0,  // (H+1) frames x P patch tokens
    kLanguage = 1,       // L_tok instruction tokens
    kVisionQuery = 2,    // P_q next-frame prediction queries
    kLatentQuery = 3,    // N x T_z latent plan queries
    kActionQuery = 4,    // single action-context aggregator
};

inline const char* segment_name(Segment s) {
    switch (s) {
        case Segment::kHistoryVisual: return "history_visual";
        case Segment::kLanguage: return "language";
        case Segment::kVisionQuery: return "vision_query";
        case Segment::kLatentQuery: return "latent_query";
        case Segment::kActionQuery: return "action_query";
    }
    return "?";
}

/// Token bookkeeping for the policy sequence. Segment order is fixed:
/// history_visual, language, vision_query, latent_query, action_query.
struct SegmentLayout {
    std::int64_t history_frames = 2;       // H+1 observed frames
    std::int64_t frame_tokens = 64;        // P patch tokens per frame
    std::int64_t language_tokens = 8;      // L_tok
    std::int64_t vision_query_tokens = 64; // P_q
    std::int64_t latent_blocks = 3;        // N
    std::int64_t block_tokens = 4;         // T_z

    void validate() const {
        if (history_frames < 1 || frame_tokens < 1 || language_tokens < 1 ||
            vision_query_tokens < 1 || latent_blocks < 1 || block_tokens < 1) {
            throw std::invalid_argument("SegmentLayout: all token counts must be positive");
        }
    }

    std::int64_t count(Segment s) const {
        switch (s) {
            case Segment::kHistoryVisual: return history_frames * frame_tokens;
            case Segment::kLanguage: return language_tokens;
            case Segment::kVisionQuery: return vision_query_tokens;
            case Segment::kLatentQuery: return latent_blocks * block_tokens;
            case Segment::kActionQuery: return 1;
        }
        return 0;
    }

    std::int64_t offset(Segment s) const {
        std::int64_t off = 0;
        for (int i = 0; i < static_cast<int>(s); ++i) off += count(static_cast<Segment>(i));
        return off;
    }

    std::int64_t total() const {
        return offset(Segment::kActionQuery) + count(Segment::kActionQuery);
    }

    Segment segment_of(std::int64_t token) const {
        if (token < 0 || token >= total()) {
            throw std::out_of_range("SegmentLayout: token index out of range");
        }
        for (int i = 4; i >= 0; --i) {
            const auto s = static_cast<Segment>(i);
            if (token >= offset(s)) return s;
        }
        return Segment::kHistoryVisual;
    }

    /// 0-based latent block index of a token inside the latent_query segment.
    std::int64_t latent_block_of(std::int64_t token) const {
        if (segment_of(token) != Segment::kLatentQuery) {
            throw std::invalid_argument("latent_block_of: token not in latent_query");
        }
        return (token - offset(Segment::kLatentQuery)) / block_tokens;
    }
};

/// How a source segment may attend to a target segment.
enum class Attend {
    kNone,         // no access
    kFull,         // every source token sees every target token
    kBlockCausal,  // latent plan: block k sees blocks j <= k
};

/// The structured-attention rule table. The perception core (history frames +
/// language) is bidirectional and sealed off from every query; vision queries
/// read only the core and themselves; latent queries additionally read the
/// predicted-frame (vision query) states, with block-causal order among
/// themselves; the action query reads everything and is read by nothing.
inline Attend attend_rule(Segment src, Segment dst) {
    if (src == Segment::kActionQuery) return Attend::kFull;
    if (dst == Segment::kActionQuery) return Attend::kNone;
    const bool src_core = src == Segment::kHistoryVisual || src == Segment::kLanguage;
    const bool dst_core = dst == Segment::kHistoryVisual || dst == Segment::kLanguage;
    if (src_core) return dst_core ? Attend::kFull : Attend::kNone;
    if (src == Segment::kVisionQuery) {
        return (dst_core || dst == Segment::kVisionQuery) ? Attend::kFull : Attend::kNone;
    }
    // src == kLatentQuery
    if (dst == Segment::kLatentQuery) return Attend::kBlockCausal;
    return Attend::kFull;  // core and vision queries are visible to the plan
}

/// Compiles the rule table into a boolean attention mask.
inline ag::BoolMask build_mask(const SegmentLayout& layout) {
    layout.validate();
    const std::int64_t S = layout.total();
    ag::BoolMask mask(S, S);
    for (std::int64_t i = 0; i < S; ++i) {
        const Segment si = layout.segment_of(i);
        for (std::int64_t j = 0; j < S; ++j) {
            const Segment sj = layout.segment_of(j);
            switch (attend_rule(si, sj)) {
                case Attend::kNone: break;
                case Attend::kFull: mask.set(i, j, true); break;
                case Attend::kBlockCausal:
                    if (layout.latent_block_of(j) <= layout.latent_block_of(i)) {
                        mask.set(i, j, true);
                    }
                    break;
            }
        }
    }
    return mask;
}

/// Ablation mask: plain token-level lower-triangular causality over the same
/// sequence, ignoring segment structure.
inline ag::BoolMask build_token_causal_mask(const SegmentLayout& layout) {
    layout.validate();
    const std::int64_t S = layout.total();
    ag::BoolMask mask(S, S);
    for (std::int64_t i = 0; i < S; ++i) {
        for (std::int64_t j = 0; j <= i; ++j) mask.set(i, j, true);
    }
    return mask;
}

}  // namespace ssmvla::policy
