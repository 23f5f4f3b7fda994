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
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"

namespace veilbreak {

/// Log-probability sentinel for an option letter missing from the top-K.
inline constexpr double kMissingLogit = -std::numeric_limits<double>::infinity();

enum class FormatClass { kRightFormat, kWrongFormat };

/// Right format iff the token, minus one optional leading space, is exactly
/// one of "A".."D". Case-sensitive.
inline FormatClass classify_format(std::string_view next_token_text) {
  std::string_view t = next_token_text;
  if (!t.empty() && t.front() == ' ') t.remove_prefix(1);
  if (t.size() == 1 && t[0] >= 'A' && t[0] <= 'D') {
    return FormatClass::kRightFormat;
  }
  return FormatClass::kWrongFormat;
}

/// Letter index of a right-format token, nullopt otherwise.
inline std::optional<int> output_letter(std::string_view next_token_text) {
  if (classify_format(next_token_text) != FormatClass::kRightFormat) {
    return std::nullopt;
  }
  return next_token_text.back() - 'A';
}

/// Argmax over the option log-probabilities; ties go to the lowest index.
/// Nullopt when all four are the missing sentinel.
inline std::optional<int> logit_argmax(const std::array<double, 4>& logits) {
  std::optional<int> best;
  for (int i = 0; i < 4; ++i) {
    if (logits[i] == kMissingLogit) continue;
    if (!best || logits[i] > logits[*best]) best = i;
  }
  return best;
}

struct ModelResponse {
  std::string item_id;
  std::string next_token_text;
  std::array<double, 4> option_logits{kMissingLogit, kMissingLogit,
                                      kMissingLogit, kMissingLogit};
  /// Output letter and logit pick as recorded when the response was taken.
  std::optional<int> answer;
  std::optional<int> logit_pick;
  nlohmann::json raw;
  std::int64_t latency_ms = 0;

  bool operator==(const ModelResponse&) const = default;
};

/// One line of a ResponseSet: a response, or the error that replaced it.
struct ResponseRecord {
  std::string item_id;
  std::optional<ModelResponse> response;
  std::string error_kind;
  std::string error_message;

  bool ok() const noexcept { return response.has_value(); }
  bool operator==(const ResponseRecord&) const = default;
};

struct RunManifest {
  std::string endpoint_url;
  std::string model;
  std::string dataset_name;
  std::string dataset_path;
  std::string dataset_hash;
  std::string attack;
  std::size_t shots_k = 0;
  std::uint64_t shots_seed = 0;
  std::vector<std::string> shot_ids;
  std::string template_hash;
  std::int64_t timestamp = 0;
  nlohmann::json request;

  /// Equality over everything that defines the run (not the timestamp).
  bool same_run(const RunManifest& o) const {
    return endpoint_url == o.endpoint_url && model == o.model &&
           dataset_name == o.dataset_name && dataset_hash == o.dataset_hash &&
           attack == o.attack && shots_k == o.shots_k &&
           shots_seed == o.shots_seed && shot_ids == o.shot_ids &&
           template_hash == o.template_hash && request == o.request;
  }
  bool operator==(const RunManifest&) const = default;
};

struct ResponseSet {
  RunManifest manifest;
  std::vector<ResponseRecord> records;

  std::size_t ok_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.ok() ? 1 : 0;
    return n;
  }
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
  return {{"endpoint_url", m.endpoint_url},
          {"model", m.model},
          {"dataset", m.dataset_name},
          {"dataset_path", m.dataset_path},
          {"dataset_hash", m.dataset_hash},
          {"attack", m.attack},
          {"shots_k", m.shots_k},
          {"shots_seed", m.shots_seed},
          {"shot_ids", m.shot_ids},
          {"template_hash", m.template_hash},
          {"timestamp", m.timestamp},
          {"request", m.request}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.endpoint_url = j.at("endpoint_url").get<std::string>();
    m.model = j.at("model").get<std::string>();
    m.dataset_name = j.at("dataset").get<std::string>();
    m.dataset_path = j.value("dataset_path", "");
    m.dataset_hash = j.at("dataset_hash").get<std::string>();
    m.attack = j.at("attack").get<std::string>();
    m.shots_k = j.value("shots_k", std::size_t{0});
    m.shots_seed = j.value("shots_seed", std::uint64_t{0});
    m.shot_ids = j.value("shot_ids", std::vector<std::string>{});
    m.template_hash = j.value("template_hash", "");
    m.timestamp = j.value("timestamp", std::int64_t{0});
    m.request = j.value("request", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw MalformedRecord(1, std::string("manifest: ") + e.what());
  }
  return m;
}

namespace detail {

inline nlohmann::json letter_or_null(const std::optional<int>& idx) {
  if (!idx) return nullptr;
  return std::string(1, kLetters[static_cast<std::size_t>(*idx)]);
}

inline std::optional<int> letter_from_json(const nlohmann::json& j,
                                           std::size_t line) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_string() || j.get<std::string>().size() != 1) {
    throw MalformedRecord(line, "letter field must be A-D or null");
  }
  const char c = j.get<std::string>()[0];
  if (c < 'A' || c > 'D') throw MalformedRecord(line, "letter outside A-D");
  return c - 'A';
}

}  // namespace detail

inline nlohmann::json record_to_json(const ResponseRecord& r) {
  nlohmann::json j;
  j["id"] = r.item_id;
  if (!r.ok()) {
    j["status"] = "failed";
    j["error_kind"] = r.error_kind;
    j["error"] = r.error_message;
    return j;
  }
  const ModelResponse& m = *r.response;
  j["status"] = "ok";
  j["next_token_text"] = m.next_token_text;
  auto logits = nlohmann::json::array();
  for (double v : m.option_logits) {
    if (v == kMissingLogit) {
      logits.push_back(nullptr);
    } else {
      logits.push_back(v);
    }
  }
  j["option_logits"] = logits;
  j["answer"] = detail::letter_or_null(m.answer);
  j["logit_pick"] = detail::letter_or_null(m.logit_pick);
  j["latency_ms"] = m.latency_ms;
  j["raw"] = m.raw;
  return j;
}

inline ResponseRecord record_from_json(const nlohmann::json& j,
                                       std::size_t line) {
  if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
    throw MalformedRecord(line, "response record needs a string id");
  }
  ResponseRecord r;
  r.item_id = j["id"].get<std::string>();
  const std::string status = j.value("status", "");
  if (status == "failed") {
    r.error_kind = j.value("error_kind", "");
    r.error_message = j.value("error", "");
    return r;
  }
  if (status != "ok") throw MalformedRecord(line, "unknown status '" + status + "'");
  ModelResponse m;
  m.item_id = r.item_id;
  if (!j.contains("next_token_text") || !j["next_token_text"].is_string()) {
    throw MalformedRecord(line, "next_token_text must be a string");
  }
  m.next_token_text = j["next_token_text"].get<std::string>();
  const auto& logits = j.value("option_logits", nlohmann::json());
  if (!logits.is_array() || logits.size() != 4) {
    throw MalformedRecord(line, "option_logits must hold 4 entries");
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (logits[i].is_null()) {
      m.option_logits[i] = kMissingLogit;
    } else if (logits[i].is_number()) {
      m.option_logits[i] = logits[i].get<double>();
      if (!std::isfinite(m.option_logits[i])) {
        throw MalformedRecord(line, "option logit is not finite");
      }
    } else {
      throw MalformedRecord(line, "option logit must be a number or null");
    }
  }
  m.answer = detail::letter_from_json(j.value("answer", nlohmann::json()), line);
  m.logit_pick =
      detail::letter_from_json(j.value("logit_pick", nlohmann::json()), line);
  m.latency_ms = j.value("latency_ms", std::int64_t{0});
  m.raw = j.value("raw", nlohmann::json());
  r.response = std::move(m);
  return r;
}

/// Manifest on line 1, then one record per line, `\n` terminated.
inline std::string serialize_response_set(const ResponseSet& rs) {
  std::string out = nlohmann::json{{"manifest", manifest_to_json(rs.manifest)}}.dump();
  out += '\n';
  for (const auto& r : rs.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline ResponseSet parse_response_set(std::string_view text) {
  ResponseSet rs;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool have_manifest = false;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = text.substr(
        pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    if (!detail::is_blank(line)) {
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) throw MalformedRecord(line_no, "invalid JSON");
      if (!have_manifest) {
        if (!j.is_object() || !j.contains("manifest")) {
          throw MalformedRecord(line_no, "first line must hold the manifest");
        }
        rs.manifest = manifest_from_json(j["manifest"]);
        have_manifest = true;
      } else {
        rs.records.push_back(record_from_json(j, line_no));
      }
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  if (!have_manifest) throw MalformedRecord(1, "missing manifest line");
  return rs;
}

inline ResponseSet load_response_set(const std::string& path) {
  return parse_response_set(read_file_bytes(path));
}

inline void save_response_set(const ResponseSet& rs, const std::string& path) {
  write_text_file(path, serialize_response_set(rs));
}

}  // namespace veilbreak
