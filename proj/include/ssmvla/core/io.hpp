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
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmvla/core/tensor.hpp"

namespace ssmvla::io {

using json = nlohmann::json;

/// Raised for unreadable, truncated, or wrongly-versioned tensor files.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Self-describing binary tensor file:
//   magic "SSVT" | u32 version | u8 dtype | u8 ndim | u16 reserved(0)
//   | u64 dims[ndim] | payload (little-endian, row-major)
// dtype: 1 = float32, 2 = float64, 3 = int64, 4 = uint8.
inline constexpr char kTensorMagic[4] = {'S', 'S', 'V', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

template <typename T>
struct DtypeCode;
template <>
struct DtypeCode<float> {
    static constexpr std::uint8_t value = 1;
};
template <>
struct DtypeCode<double> {
    static constexpr std::uint8_t value = 2;
};
template <>
struct DtypeCode<std::int64_t> {
    static constexpr std::uint8_t value = 3;
};
template <>
struct DtypeCode<std::uint8_t> {
    static constexpr std::uint8_t value = 4;
};

namespace detail {

inline bool is_little_endian() {
    const std::uint16_t probe = 1;
    std::uint8_t b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

template <typename U>
void write_le(std::ostream& os, U v) {
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    if (!is_little_endian()) {
        for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(buf[i], buf[sizeof(U) - 1 - i]);
    }
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const std::string& path, const char* what) {
    std::uint8_t buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
        throw FormatError(path + ": truncated while reading " + what);
    }
    if (!is_little_endian()) {
        for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(buf[i], buf[sizeof(U) - 1 - i]);
    }
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
}

}  // namespace detail

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError(path + ": cannot open for writing");
    os.write(kTensorMagic, 4);
    detail::write_le<std::uint32_t>(os, kTensorVersion);
    os.put(static_cast<char>(DtypeCode<T>::value));
    os.put(static_cast<char>(t.ndim()));
    detail::write_le<std::uint16_t>(os, 0);
    for (std::int64_t d = 0; d < t.ndim(); ++d) {
        detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.dim(d)));
    }
    for (std::int64_t i = 0; i < t.numel(); ++i) detail::write_le<T>(os, t[i]);
    if (!os) throw FormatError(path + ": write failed");
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path, ec);
    if (ec) throw FormatError(path + ": cannot stat");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path + ": cannot open");
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw FormatError(path + ": bad magic, not a tensor file");
    }
    const auto version = detail::read_le<std::uint32_t>(is, path, "version");
    if (version != kTensorVersion) {
        throw FormatError(path + ": unsupported tensor file version " + std::to_string(version));
    }
    const auto dtype = detail::read_le<std::uint8_t>(is, path, "dtype");
    if (dtype != DtypeCode<T>::value) {
        throw FormatError(path + ": dtype code " + std::to_string(dtype) + " does not match requested type");
    }
    const auto ndim = detail::read_le<std::uint8_t>(is, path, "ndim");
    if (ndim == 0 || ndim > 8) throw FormatError(path + ": implausible ndim " + std::to_string(ndim));
    detail::read_le<std::uint16_t>(is, path, "reserved");
    std::vector<std::int64_t> dims(ndim);
    std::uint64_t numel = 1;
    for (auto& d : dims) {
        const auto v = detail::read_le<std::uint64_t>(is, path, "dims");
        if (v == 0 || v > (1ull << 32)) throw FormatError(path + ": implausible dimension");
        d = static_cast<std::int64_t>(v);
        numel *= v;
        if (numel > (1ull << 34)) throw FormatError(path + ": tensor too large");
    }
    // The header fully determines the payload size; reject before allocating
    // if the file cannot possibly hold it.
    const std::uint64_t header_bytes = 4 + 4 + 1 + 1 + 2 + 8ull * ndim;
    const std::uint64_t expect = header_bytes + numel * sizeof(T);
    if (file_size < expect) throw FormatError(path + ": truncated payload");
    if (file_size > expect) throw FormatError(path + ": trailing bytes after payload");
    Tensor<T> t(dims);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = detail::read_le<T>(is, path, "payload");
    return t;
}

inline json load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": invalid JSON: " + e.what());
    }
    return j;
}

inline void save_json(const std::string& path, const json& j, int indent = 2) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError(path + ": cannot open for writing");
    os << j.dump(indent) << "\n";
    if (!os) throw FormatError(path + ": write failed");
}

inline void save_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError(path + ": cannot open for writing");
    os << text;
    if (!os) throw FormatError(path + ": write failed");
}

inline std::string load_text(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return s;
}

inline void append_line(const std::string& path, const std::string& line) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw FormatError(path + ": cannot open for append");
    os << line << "\n";
    if (!os) throw FormatError(path + ": write failed");
}

inline void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw FormatError(path + ": cannot create directory: " + ec.message());
}

}  // namespace ssmvla::io
