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

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/hash.hpp"

namespace veilbreak {

/// Layout of an evaluation prompt. `question_header` takes `{question}`,
/// `choice_line_format` takes `{letter}` and `{choice}`.
struct PromptTemplate {
  std::string question_header = "{question}";
  std::string choice_line_format = "{letter}. {choice}";
  std::string answer_cue = "Answer:";
  std::string shot_separator = "\n\n";

  bool operator==(const PromptTemplate&) const = default;
};

inline nlohmann::json template_to_json(const PromptTemplate& tpl) {
  return {{"question_header", tpl.question_header},
          {"choice_line_format", tpl.choice_line_format},
          {"answer_cue", tpl.answer_cue},
          {"shot_separator", tpl.shot_separator}};
}

/// Applies config overrides on top of the defaults.
inline PromptTemplate template_from_json(const nlohmann::json& j) {
  PromptTemplate tpl;
  if (j.is_null()) return tpl;
  tpl.question_header = j.value("question_header", tpl.question_header);
  tpl.choice_line_format = j.value("choice_line_format", tpl.choice_line_format);
  tpl.answer_cue = j.value("answer_cue", tpl.answer_cue);
  tpl.shot_separator = j.value("shot_separator", tpl.shot_separator);
  return tpl;
}

inline std::string template_hash(const PromptTemplate& tpl) {
  return sha256_hex(template_to_json(tpl).dump());
}

struct ShotSet {
  std::vector<MCQItem> exemplars;

  std::size_t k() const noexcept { return exemplars.size(); }
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(exemplars.size());
    for (const auto& e : exemplars) out.push_back(e.id);
    return out;
  }
};

namespace detail {

// Single left-to-right pass so substituted text is never rescanned.
inline std::string fill_fields(
    std::string_view format,
    std::initializer_list<std::pair<std::string_view, std::string_view>> fields) {
  std::string out;
  out.reserve(format.size() + 64);
  std::size_t i = 0;
  while (i < format.size()) {
    bool matched = false;
    if (format[i] == '{') {
      for (const auto& [name, value] : fields) {
        if (format.compare(i, name.size(), name) == 0) {
          out.append(value);
          i += name.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) out.push_back(format[i++]);
  }
  return out;
}

inline std::string render_block(const MCQItem& item, const PromptTemplate& tpl) {
  std::string out = fill_fields(tpl.question_header, {{"{question}", item.question}});
  for (std::size_t i = 0; i < item.choices.size(); ++i) {
    const std::string letter(1, kLetters[i]);
    out += '\n';
    out += fill_fields(tpl.choice_line_format,
                       {{"{letter}", letter}, {"{choice}", item.choices[i]}});
  }
  out += '\n';
  out += tpl.answer_cue;
  return out;
}

}  // namespace detail

/// Renders exemplars (each closed with its gold letter) followed by the
/// target item with the answer cue left open.
inline std::string render_prompt(const MCQItem& item, const ShotSet& shots,
                                 const PromptTemplate& tpl = {}) {
  std::string out;
  for (const auto& shot : shots.exemplars) {
    out += detail::render_block(shot, tpl);
    out += ' ';
    out += kLetters[static_cast<std::size_t>(shot.answer_index)];
    out += tpl.shot_separator;
  }
  out += detail::render_block(item, tpl);
  return out;
}

/// Draws k distinct exemplars from `pool`, skipping `exclude_ids`.
/// Candidates keep pool order; a partial Fisher-Yates shuffle seeded with
/// `seed` picks them.
inline ShotSet select_shots(const Dataset& pool, std::size_t k,
                            const std::unordered_set<std::string>& exclude_ids,
                            std::uint64_t seed) {
  std::vector<const MCQItem*> candidates;
  candidates.reserve(pool.items.size());
  for (const auto& item : pool.items) {
    if (!exclude_ids.contains(item.id)) candidates.push_back(&item);
  }
  if (candidates.size() < k) throw InsufficientPool(candidates.size(), k);

  std::mt19937_64 rng(seed);
  ShotSet shots;
  shots.exemplars.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + draw_below(rng, candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
    shots.exemplars.push_back(*candidates[i]);
  }
  return shots;
}

}  // namespace veilbreak
