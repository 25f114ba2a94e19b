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

#include <cmath>
#include <cstdint>
#include <random>

#include "ssmvla/core/tensor.hpp"

namespace ssmvla {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Mix an arbitrary list of stream identifiers into one seed. Used to derive
/// independent deterministic streams (per step, per sample, per purpose).
inline std::uint64_t mix_seed(std::uint64_t seed) { return splitmix64(seed); }

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t next, Rest... rest) {
    return mix_seed(splitmix64(seed ^ splitmix64(next)), rest...);
}

/// Deterministic RNG wrapper. The engine (mt19937_64) is specified exactly by
/// the standard; the distributions here are hand-rolled because the standard
/// library's are implementation-defined and would break cross-platform
/// reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer uniform in [0, n) via rejection-free modulo of a wide draw.
    std::int64_t uniform_int(std::int64_t n) {
        // 64-bit draw modulo n; bias is negligible for the small n used here
        // and the result is identical on every platform.
        return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
    }

    /// Standard normal via Box-Muller on explicit uniform bits.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double stddev = 1.0) {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            t[i] = static_cast<T>(normal() * stddev);
        }
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            t[i] = static_cast<T>(uniform(lo, hi));
        }
    }

    template <typename It>
    void shuffle(It first, It last) {
        const std::int64_t n = static_cast<std::int64_t>(last - first);
        for (std::int64_t i = n - 1; i > 0; --i) {
            std::swap(first[i], first[uniform_int(i + 1)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ssmvla
