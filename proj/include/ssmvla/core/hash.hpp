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
#include <cstring>
#include <iomanip>
#include <sstream>
#include <string>

#include "ssmvla/core/tensor.hpp"

namespace ssmvla {

/// FNV-1a over raw bytes. Used for content fingerprints in manifests and for
/// frozen-parameter hashes; not cryptographic.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

template <typename T>
std::uint64_t tensor_hash(const Tensor<T>& t, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (std::int64_t d = 0; d < t.ndim(); ++d) {
        const std::int64_t dim = t.dim(d);
        h = fnv1a(&dim, sizeof(dim), h);
    }
    return fnv1a(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(T), h);
}

inline std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace ssmvla
