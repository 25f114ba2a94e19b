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

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmvla/core/io.hpp"

namespace ssmvla::harness {

using io::json;

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsRecord {
    std::int64_t step = 0;
    double wall_ms = 0;
    std::map<std::string, double> scalars;
};

/// Append-only JSONL stream: a header line embedding schema version and
/// config hash, then one record per logged step with strictly increasing step
/// numbers (enforced across resumes by re-reading the tail).
class MetricsWriter {
public:
    MetricsWriter(std::filesystem::path path, std::uint64_t config_hash, bool resume)
        : path_(std::move(path)), start_(std::chrono::steady_clock::now()) {
        namespace fs = std::filesystem;
        if (resume && fs::exists(path_)) {
            std::ifstream in(path_);
            std::string line, last_record;
            std::getline(in, line);  // header
            while (std::getline(in, line)) {
                if (!line.empty()) last_record = line;
            }
            if (!last_record.empty()) {
                last_step_ = json::parse(last_record).at("step").get<std::int64_t>();
            }
            return;
        }
        json header;
        header["schema_version"] = kMetricsSchemaVersion;
        header["config_hash"] = config_hash;
        std::ofstream out(path_, std::ios::trunc);
        if (!out) throw std::runtime_error("metrics: cannot open " + path_.string());
        out << header.dump() << "\n";
    }

    void append(std::int64_t step, const std::map<std::string, double>& scalars) {
        if (last_step_ >= 0 && step <= last_step_) {
            throw std::invalid_argument("metrics: step " + std::to_string(step) +
                                        " is not after " + std::to_string(last_step_));
        }
        json rec;
        rec["step"] = step;
        rec["wall_ms"] = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - start_)
                             .count();
        rec["scalars"] = scalars;
        io::append_line(path_.string(), rec.dump());
        last_step_ = step;
    }

    std::int64_t last_step() const { return last_step_; }

private:
    std::filesystem::path path_;
    std::chrono::steady_clock::time_point start_;
    std::int64_t last_step_ = -1;
};

/// Reads a metrics stream back; validates the header and step monotonicity.
inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path,
                                               std::uint64_t* config_hash = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("metrics: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("metrics: empty file");
    const json header = json::parse(line);
    if (header.at("schema_version").get<int>() != kMetricsSchemaVersion) {
        throw std::runtime_error("metrics: unsupported schema_version");
    }
    if (config_hash != nullptr) *config_hash = header.at("config_hash").get<std::uint64_t>();
    std::vector<MetricsRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        MetricsRecord r;
        r.step = j.at("step").get<std::int64_t>();
        r.wall_ms = j.at("wall_ms").get<double>();
        for (auto it = j.at("scalars").begin(); it != j.at("scalars").end(); ++it) {
            r.scalars[it.key()] = it.value().get<double>();
        }
        if (!records.empty() && r.step <= records.back().step) {
            throw std::runtime_error("metrics: non-monotone steps in " + path.string());
        }
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace ssmvla::harness
