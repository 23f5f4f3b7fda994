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

#include <boost/rational.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/response.hpp"

namespace veilbreak {

using Rational = boost::rational<std::int64_t>;

inline double to_double(const Rational& r) {
  return boost::rational_cast<double>(r);
}

/// Ratio, or nullopt for a zero denominator (never reported as 0).
inline std::optional<Rational> rate(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return Rational(num, den);
}

inline constexpr double kChanceScore = 0.25;

/// Output score with wrong-format answers imputed at chance.
inline double figure_output_score(double acc_answered, double frac_answered) {
  return frac_answered * acc_answered + (1.0 - frac_answered) * kChanceScore;
}

inline Rational figure_output_score(const std::optional<Rational>& acc_answered,
                                    const Rational& frac_answered) {
  const Rational chance(1, 4);
  const Rational answered_part =
      acc_answered ? frac_answered * *acc_answered : Rational(0);
  return answered_part + (Rational(1) - frac_answered) * chance;
}

/// Rescales so chance (0.25) maps to 0 and a perfect score stays 1.
inline double chance_adjust(double acc) {
  return (acc - kChanceScore) / (1.0 - kChanceScore);
}

inline Rational chance_adjust(const Rational& acc) {
  return (acc - Rational(1, 4)) / Rational(3, 4);
}

/// Binomial standard error sqrt(p(1-p)/n).
inline double std_error(double p, std::int64_t n) {
  if (n < 1) throw std::invalid_argument("std_error needs n >= 1");
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

/// Exact counts behind one ScoreRow.
struct ScoreCounts {
  std::int64_t n = 0;              // items with a response
  std::int64_t right = 0;          // right-format items
  std::int64_t correct = 0;        // recorded answer == gold
  std::int64_t correct_right = 0;  // right-format and output letter == gold

  std::int64_t logit_n = 0;      // items with at least one observable letter
  std::int64_t logit_right = 0;  // ... of which right-format
  std::int64_t logit_correct = 0;        // recorded logit pick == gold
  std::int64_t logit_correct_right = 0;  // argmax == gold, right-format
  std::int64_t logit_correct_wrong = 0;  // argmax == gold, wrong-format
  std::int64_t logit_missing = 0;        // all four letters unobservable

  bool operator==(const ScoreCounts&) const = default;
};

struct OutputScore {
  std::int64_t n = 0;
  Rational acc;
  std::optional<Rational> acc_answered;
  Rational frac_answered;
};

struct LogitScore {
  std::optional<Rational> acc_logits;
  std::optional<Rational> acc_logits_right;
  std::optional<Rational> acc_logits_wrong;
  std::int64_t missing = 0;
};

/// Gold answer index per item id.
inline std::unordered_map<std::string, int> answer_key(const Dataset& keys) {
  std::unordered_map<std::string, int> gold;
  gold.reserve(keys.items.size());
  for (const auto& item : keys.items) gold.emplace(item.id, item.answer_index);
  return gold;
}

/// Folds a ResponseSet into exact counts. Records must match key ids.
inline ScoreCounts count_responses(const ResponseSet& rs, const Dataset& keys) {
  const auto gold = answer_key(keys);
  std::unordered_set<std::string> seen;
  ScoreCounts c;
  for (const auto& rec : rs.records) {
    auto it = gold.find(rec.item_id);
    if (it == gold.end()) {
      throw AlignmentError("response id '" + rec.item_id +
                           "' not in dataset '" + keys.name + "'");
    }
    if (!seen.insert(rec.item_id).second) {
      throw AlignmentError("response id '" + rec.item_id + "' appears twice");
    }
    if (!rec.ok()) continue;
    const ModelResponse& r = *rec.response;
    const int answer = it->second;
    const bool right =
        classify_format(r.next_token_text) == FormatClass::kRightFormat;

    ++c.n;
    c.right += right ? 1 : 0;
    c.correct += (r.answer && *r.answer == answer) ? 1 : 0;
    if (right && *output_letter(r.next_token_text) == answer) ++c.correct_right;

    const auto pick = logit_argmax(r.option_logits);
    if (!pick) {
      ++c.logit_missing;
      continue;
    }
    ++c.logit_n;
    c.logit_correct += (r.logit_pick && *r.logit_pick == answer) ? 1 : 0;
    if (right) {
      ++c.logit_right;
      c.logit_correct_right += (*pick == answer) ? 1 : 0;
    } else {
      c.logit_correct_wrong += (*pick == answer) ? 1 : 0;
    }
  }
  return c;
}

inline OutputScore output_score_from_counts(const ScoreCounts& c) {
  if (c.n == 0) throw EmptyRun();
  return {c.n, Rational(c.correct, c.n), rate(c.correct_right, c.right),
          Rational(c.right, c.n)};
}

inline LogitScore logit_score_from_counts(const ScoreCounts& c) {
  return {rate(c.logit_correct, c.logit_n),
          rate(c.logit_correct_right, c.logit_right),
          rate(c.logit_correct_wrong, c.logit_n - c.logit_right),
          c.logit_missing};
}

/// Output-based accuracy, answered accuracy and answered fraction.
inline OutputScore score_output(const ResponseSet& rs, const Dataset& keys) {
  return output_score_from_counts(count_responses(rs, keys));
}

/// Logit-based accuracy overall and split by output format. Items with no
/// observable option letter are excluded and counted in `missing`.
inline LogitScore score_logits(const ResponseSet& rs, const Dataset& keys) {
  return logit_score_from_counts(count_responses(rs, keys));
}

struct ScoreRow {
  std::string model;
  std::string dataset;
  std::string attack;
  ScoreCounts counts;

  std::int64_t n = 0;
  Rational acc;
  std::optional<Rational> acc_answered;
  Rational frac_answered;
  std::optional<Rational> acc_logits;
  std::optional<Rational> acc_logits_right;
  std::optional<Rational> acc_logits_wrong;
  Rational figure_output_score;
  Rational adjusted_acc;
  double se = 0.0;

  bool operator==(const ScoreRow&) const = default;
};

namespace detail {

inline std::string show(const std::optional<Rational>& r) {
  if (!r) return "undefined";
  std::ostringstream os;
  os << r->numerator() << "/" << r->denominator();
  return os.str();
}

}  // namespace detail

/// Both exact identities, checked on rationals before any rounding.
inline void check_identities(const ScoreRow& row) {
  const std::string where = row.model + "/" + row.dataset + "/" + row.attack;
  const Rational expected_acc =
      row.acc_answered ? *row.acc_answered * row.frac_answered : Rational(0);
  if (row.acc != expected_acc) {
    throw IdentityViolation(
        where + ": acc " + detail::show(row.acc) + " != acc(answered) " +
        detail::show(row.acc_answered) + " x %-acc " +
        detail::show(row.frac_answered));
  }
  const ScoreCounts& c = row.counts;
  if (c.logit_n > 0) {
    const Rational frac(c.logit_right, c.logit_n);
    const Rational right_part =
        row.acc_logits_right ? frac * *row.acc_logits_right : Rational(0);
    const Rational wrong_part = row.acc_logits_wrong
                                    ? (Rational(1) - frac) * *row.acc_logits_wrong
                                    : Rational(0);
    if (!row.acc_logits || *row.acc_logits != right_part + wrong_part) {
      throw IdentityViolation(
          where + ": acc(logits) " + detail::show(row.acc_logits) +
          " != right/wrong split " + detail::show(right_part + wrong_part));
    }
  }
}

inline ScoreRow score_row_from_counts(std::string model, std::string dataset,
                                      std::string attack, const ScoreCounts& c) {
  const OutputScore out = output_score_from_counts(c);
  const LogitScore logits = logit_score_from_counts(c);
  ScoreRow row;
  row.model = std::move(model);
  row.dataset = std::move(dataset);
  row.attack = std::move(attack);
  row.counts = c;
  row.n = out.n;
  row.acc = out.acc;
  row.acc_answered = out.acc_answered;
  row.frac_answered = out.frac_answered;
  row.acc_logits = logits.acc_logits;
  row.acc_logits_right = logits.acc_logits_right;
  row.acc_logits_wrong = logits.acc_logits_wrong;
  row.figure_output_score = figure_output_score(out.acc_answered, out.frac_answered);
  row.adjusted_acc = chance_adjust(out.acc);
  row.se = std_error(to_double(out.acc), out.n);
  check_identities(row);
  return row;
}

inline ScoreRow build_score_row(std::string model, std::string dataset,
                                std::string attack, const ResponseSet& rs,
                                const Dataset& keys) {
  return score_row_from_counts(std::move(model), std::move(dataset),
                               std::move(attack), count_responses(rs, keys));
}

/// Column names shared by the JSON and table forms of a ScoreRow.
inline constexpr const char* kColAcc = "acc";
inline constexpr const char* kColAccAnswered = "acc (answered)";
inline constexpr const char* kColFracAnswered = "%-acc";
inline constexpr const char* kColAccLogits = "acc (logits)";
inline constexpr const char* kColAccLogitsRight = "acc (logits) (right format)";
inline constexpr const char* kColAccLogitsWrong = "acc (logits) (wrong format)";
inline constexpr const char* kColOutputScore = "output score";
inline constexpr const char* kColAdjusted = "adjusted acc";
inline constexpr const char* kColSe = "se";

inline nlohmann::json counts_to_json(const ScoreCounts& c) {
  return {{"n", c.n},
          {"right", c.right},
          {"correct", c.correct},
          {"correct_right", c.correct_right},
          {"logit_n", c.logit_n},
          {"logit_right", c.logit_right},
          {"logit_correct", c.logit_correct},
          {"logit_correct_right", c.logit_correct_right},
          {"logit_correct_wrong", c.logit_correct_wrong},
          {"logit_missing", c.logit_missing}};
}

inline ScoreCounts counts_from_json(const nlohmann::json& j) {
  ScoreCounts c;
  c.n = j.at("n").get<std::int64_t>();
  c.right = j.at("right").get<std::int64_t>();
  c.correct = j.at("correct").get<std::int64_t>();
  c.correct_right = j.at("correct_right").get<std::int64_t>();
  c.logit_n = j.at("logit_n").get<std::int64_t>();
  c.logit_right = j.at("logit_right").get<std::int64_t>();
  c.logit_correct = j.at("logit_correct").get<std::int64_t>();
  c.logit_correct_right = j.at("logit_correct_right").get<std::int64_t>();
  c.logit_correct_wrong = j.at("logit_correct_wrong").get<std::int64_t>();
  c.logit_missing = j.at("logit_missing").get<std::int64_t>();
  return c;
}

namespace detail {

inline nlohmann::json rate_json(const std::optional<Rational>& r) {
  if (!r) return nullptr;
  return to_double(*r);
}

}  // namespace detail

/// Rates serialize as doubles, undefined ones as null. The exact counts
/// ride along so a row can be rebuilt bit-identically.
inline nlohmann::json score_row_to_json(const ScoreRow& row) {
  nlohmann::json j;
  j["model"] = row.model;
  j["dataset"] = row.dataset;
  j["attack"] = row.attack;
  j["n"] = row.n;
  j[kColAcc] = to_double(row.acc);
  j[kColAccAnswered] = detail::rate_json(row.acc_answered);
  j[kColFracAnswered] = to_double(row.frac_answered);
  j[kColAccLogits] = detail::rate_json(row.acc_logits);
  j[kColAccLogitsRight] = detail::rate_json(row.acc_logits_right);
  j[kColAccLogitsWrong] = detail::rate_json(row.acc_logits_wrong);
  j[kColOutputScore] = to_double(row.figure_output_score);
  j[kColAdjusted] = to_double(row.adjusted_acc);
  j[kColSe] = row.se;
  j["counts"] = counts_to_json(row.counts);
  return j;
}

inline ScoreRow score_row_from_json(const nlohmann::json& j) {
  return score_row_from_counts(j.at("model").get<std::string>(),
                               j.at("dataset").get<std::string>(),
                               j.at("attack").get<std::string>(),
                               counts_from_json(j.at("counts")));
}

}  // namespace veilbreak
