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

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/hash.hpp"

namespace veilbreak {

using json = nlohmann::json;

inline constexpr std::array<char, 4> kLetters{'A', 'B', 'C', 'D'};

/// One four-choice question with its gold answer.
struct MCQItem {
  std::string id;
  std::string question;
  std::array<std::string, 4> choices;
  int answer_index = 0;
  /// Free-form per-item metadata, passed through untouched. Always a JSON
  /// object (possibly empty).
  json meta = json::object();

  bool operator==(const MCQItem&) const = default;
};

struct Dataset {
  std::string name;
  std::string source_path;
  std::vector<MCQItem> items;
  /// Serialized AttackSpec for attacked variants; null for originals.
  json provenance;
  /// 1-based line numbers dropped in lenient mode.
  std::vector<std::size_t> skipped_lines;

  std::size_t size() const noexcept { return items.size(); }
};

enum class FormatHint { kJsonl, kAuto };

struct LoadOptions {
  FormatHint hint = FormatHint::kAuto;
  bool lenient = false;
};

namespace detail {

inline bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n\f\v") == std::string_view::npos;
}

}  // namespace detail

/// Returns the first invariant an item violates, or nullopt when valid.
inline std::optional<std::string> validate_item(const MCQItem& item) {
  if (item.id.empty()) return "empty id";
  for (std::size_t i = 0; i < item.choices.size(); ++i) {
    if (detail::is_blank(item.choices[i])) {
      return "choice " + std::string(1, kLetters[i]) + " is empty";
    }
  }
  if (item.answer_index < 0 || item.answer_index > 3) {
    return "answer index " + std::to_string(item.answer_index) +
           " outside [0,3]";
  }
  if (!item.meta.is_object()) return "meta is not an object";
  return std::nullopt;
}

inline MCQItem item_from_json(const json& j, std::size_t line) {
  auto fail = [line](const std::string& why) -> MalformedRecord {
    return MalformedRecord(line, why);
  };
  if (!j.is_object()) throw fail("record is not a JSON object");
  for (const char* key : {"id", "question", "choices", "answer"}) {
    if (!j.contains(key)) throw fail(std::string("missing field '") + key + "'");
  }
  MCQItem item;
  const json& id = j.at("id");
  if (!id.is_string()) throw fail("id must be a string");
  item.id = id.get<std::string>();
  if (!j.at("question").is_string()) throw fail("question must be a string");
  item.question = j.at("question").get<std::string>();

  const json& choices = j.at("choices");
  if (!choices.is_array() || choices.size() != 4) {
    throw fail("choices must be an array of exactly 4 strings");
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (!choices[i].is_string()) throw fail("choices must be strings");
    item.choices[i] = choices[i].get<std::string>();
  }
  const json& answer = j.at("answer");
  if (!answer.is_number_integer()) throw fail("answer must be an integer");
  const auto raw = answer.get<long long>();
  if (raw < 0 || raw > 3) {
    throw fail("answer index " + std::to_string(raw) + " outside [0,3]");
  }
  item.answer_index = static_cast<int>(raw);
  if (j.contains("meta")) {
    if (!j.at("meta").is_object()) throw fail("meta must be an object");
    item.meta = j.at("meta");
  }
  if (auto why = validate_item(item)) throw fail(*why);
  return item;
}

inline json item_to_json(const MCQItem& item) {
  json j;
  j["id"] = item.id;
  j["question"] = item.question;
  j["choices"] = item.choices;
  j["answer"] = item.answer_index;
  if (!item.meta.empty()) j["meta"] = item.meta;
  return j;
}

/// Parses dataset text. `name`/`source_path` are recorded as given.
inline Dataset parse_dataset(std::string_view text, std::string name,
                             std::string source_path,
                             const LoadOptions& opts = {}) {
  Dataset ds;
  ds.name = std::move(name);
  ds.source_path = std::move(source_path);

  std::unordered_set<std::string> seen;
  auto accept = [&](const json& record, std::size_t line) {
    try {
      MCQItem item = item_from_json(record, line);
      if (!seen.insert(item.id).second) throw DuplicateId(item.id);
      ds.items.push_back(std::move(item));
    } catch (const Error&) {
      if (!opts.lenient) throw;
      ds.skipped_lines.push_back(line);
    }
  };

  const auto first = text.find_first_not_of(" \t\r\n");
  const bool array_form = opts.hint == FormatHint::kAuto &&
                          first != std::string_view::npos &&
                          text[first] == '[';
  if (array_form) {
    json doc = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded() || !doc.is_array()) {
      throw MalformedRecord(1, "not a JSON array");
    }
    for (std::size_t i = 0; i < doc.size(); ++i) accept(doc[i], i + 1);
  } else {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      std::string_view line = text.substr(
          pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      ++line_no;
      if (!detail::is_blank(line)) {
        json record = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (record.is_discarded()) {
          if (!opts.lenient) throw MalformedRecord(line_no, "invalid JSON");
          ds.skipped_lines.push_back(line_no);
        } else {
          accept(record, line_no);
        }
      }
      if (nl == std::string_view::npos) break;
      pos = nl + 1;
    }
  }
  if (ds.items.empty()) throw EmptyDataset(ds.source_path);
  return ds;
}

inline Dataset load_dataset(const std::string& path,
                            const LoadOptions& opts = {}) {
  if (!std::filesystem::is_regular_file(path)) {
    throw Error("IoError", "dataset not found: " + path);
  }
  return parse_dataset(read_file_bytes(path),
                       std::filesystem::path(path).stem().string(), path, opts);
}

/// Canonical JSONL serialization, one record per line, `\n` terminated.
inline std::string serialize_dataset(const Dataset& ds) {
  std::string out;
  for (const auto& item : ds.items) {
    out += item_to_json(item).dump();
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::string& path, std::string_view text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("IoError", "cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  write_text_file(path, serialize_dataset(ds));
}

inline std::string dataset_content_hash(const Dataset& ds) {
  return sha256_hex(serialize_dataset(ds));
}

/// Aligns attacked items with their originals by id. The attacked copy in
/// each pair carries the original's choices and answer.
inline std::vector<std::pair<MCQItem, MCQItem>> pair_with_original(
    const Dataset& attacked, const Dataset& original) {
  std::unordered_map<std::string_view, const MCQItem*> by_id;
  by_id.reserve(original.items.size());
  for (const auto& item : original.items) by_id.emplace(item.id, &item);

  std::vector<std::pair<MCQItem, MCQItem>> pairs;
  pairs.reserve(attacked.items.size());
  for (const auto& item : attacked.items) {
    auto it = by_id.find(item.id);
    if (it == by_id.end()) throw MissingCounterpart(item.id);
    MCQItem aligned = item;
    aligned.choices = it->second->choices;
    aligned.answer_index = it->second->answer_index;
    pairs.emplace_back(std::move(aligned), *it->second);
  }
  return pairs;
}

}  // namespace veilbreak
