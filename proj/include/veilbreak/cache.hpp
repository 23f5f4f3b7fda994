// Copyright 2026 The Veilbreak Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
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
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/hash.hpp"

namespace veilbreak {

struct CacheEntry {
  std::string raw;
  std::string question;
  nlohmann::json meta = nlohmann::json::object();
  std::int64_t timestamp = 0;

  bool operator==(const CacheEntry&) const = default;
};

/// Content-addressed store of rephrase results: one `<key>.json` file per
/// entry. Reads may run concurrently; writes are serialized.
class CacheStore {
 public:
  explicit CacheStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const noexcept { return dir_; }

  std::filesystem::path path_for(const std::string& key) const {
    return dir_ / (key + ".json");
  }

  std::optional<CacheEntry> get(const std::string& key) const {
    const auto path = path_for(key);
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("question")) {
      return std::nullopt;  // unreadable entries are treated as misses
    }
    CacheEntry entry;
    entry.raw = j.value("raw", "");
    entry.question = j.at("question").get<std::string>();
    entry.meta = j.value("meta", nlohmann::json::object());
    entry.timestamp = j.value("timestamp", std::int64_t{0});
    return entry;
  }

  void put(const std::string& key, const CacheEntry& entry) {
    nlohmann::json j;
    j["raw"] = entry.raw;
    j["question"] = entry.question;
    j["meta"] = entry.meta;
    j["timestamp"] = entry.timestamp;
    const std::string text = j.dump() + "\n";

    std::lock_guard<std::mutex> lock(write_mu_);
    const auto final_path = path_for(key);
    auto tmp = final_path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("IoError", "cannot write cache entry " + tmp.string());
      out << text;
    }
    std::filesystem::rename(tmp, final_path);
  }

 private:
  std::filesystem::path dir_;
  std::mutex write_mu_;
};

}  // namespace veilbreak
