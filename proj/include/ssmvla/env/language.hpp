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
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/env/pushworld.hpp"

namespace ssmvla::env {

inline constexpr int kLangTokens = 8;
inline constexpr std::int64_t kPadToken = 0;

/// Closed vocabulary: the sorted unique words of every task instruction,
/// with id 0 reserved for padding.
inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> kVocab = [] {
        std::vector<std::string> words;
        for (const auto& task : task_vocabulary()) {
            std::istringstream in(instruction_for(task));
            std::string w;
            while (in >> w) words.push_back(w);
        }
        std::sort(words.begin(), words.end());
        words.erase(std::unique(words.begin(), words.end()), words.end());
        return words;
    }();
    return kVocab;
}

inline std::int64_t vocab_size() { return static_cast<std::int64_t>(vocabulary().size()) + 1; }

/// Fixed-length token ids (padded with 0). Unknown words are an error: the
/// vocabulary is closed by construction.
inline std::vector<std::int64_t> tokenize(const std::string& instruction) {
    std::vector<std::int64_t> ids;
    std::istringstream in(instruction);
    std::string w;
    const auto& vocab = vocabulary();
    while (in >> w) {
        const auto it = std::lower_bound(vocab.begin(), vocab.end(), w);
        if (it == vocab.end() || *it != w) {
            throw std::invalid_argument("tokenize: unknown word '" + w + "'");
        }
        ids.push_back(static_cast<std::int64_t>(it - vocab.begin()) + 1);
    }
    if (static_cast<int>(ids.size()) > kLangTokens) {
        throw std::invalid_argument("tokenize: instruction longer than " +
                                    std::to_string(kLangTokens) + " tokens");
    }
    ids.resize(kLangTokens, kPadToken);
    return ids;
}

}  // namespace ssmvla::env
