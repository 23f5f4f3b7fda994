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
#include <array>
#include <atomic>
#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/http.hpp"
#include "veilbreak/parallel.hpp"
#include "veilbreak/prompt.hpp"
#include "veilbreak/response.hpp"

namespace veilbreak {

inline constexpr int kDefaultTopLogprobs = 20;

/// Generated token plus the token->logprob map at that position.
struct CompletionReply {
  std::string text;
  std::map<std::string, double> top_logprobs;
  nlohmann::json raw;
};

/// The evaluated model. Implementations request one greedy token with
/// top-K log-probabilities.
class EvalEndpoint {
 public:
  virtual ~EvalEndpoint() = default;
  /// Throws TransportError or LogprobsUnsupported.
  virtual CompletionReply complete(const std::string& prompt) = 0;
  virtual std::string url() const = 0;
  virtual std::string model() const = 0;
  virtual int top_logprobs() const { return kDefaultTopLogprobs; }
};

/// Parses an OpenAI-style text completion reply. Accepts `top_logprobs[0]`
/// either as a {token: logprob} object or as a list of {token, logprob}.
inline CompletionReply parse_completion_reply(const nlohmann::json& reply) {
  if (!reply.contains("choices") || !reply["choices"].is_array() ||
      reply["choices"].empty()) {
    throw TransportError(200, "completion reply has no choices");
  }
  const auto& choice = reply["choices"][0];
  CompletionReply out;
  out.raw = reply;
  out.text = choice.value("text", "");

  const auto logprobs = choice.value("logprobs", nlohmann::json());
  if (!logprobs.is_object() || !logprobs.contains("top_logprobs") ||
      !logprobs["top_logprobs"].is_array() ||
      logprobs["top_logprobs"].empty()) {
    throw LogprobsUnsupported();
  }
  const auto& top = logprobs["top_logprobs"][0];
  if (top.is_object()) {
    for (const auto& [token, lp] : top.items()) {
      if (lp.is_number()) out.top_logprobs[token] = lp.get<double>();
    }
  } else if (top.is_array()) {
    for (const auto& entry : top) {
      if (entry.is_object() && entry.contains("token") &&
          entry.contains("logprob") && entry["logprob"].is_number()) {
        out.top_logprobs[entry["token"].get<std::string>()] =
            entry["logprob"].get<double>();
      }
    }
  } else {
    throw LogprobsUnsupported();
  }
  return out;
}

class HttpEvalEndpoint final : public EvalEndpoint {
 public:
  HttpEvalEndpoint(std::string url, std::string model,
                   int top_k = kDefaultTopLogprobs, HttpOptions opts = {})
      : url_(std::move(url)),
        model_(std::move(model)),
        top_k_(top_k),
        opts_(std::move(opts)) {
    if (opts_.bearer_token.empty()) {
      opts_.bearer_token = env_or_empty("VEILBREAK_EVAL_KEY");
    }
  }

  static nlohmann::json request_body(const std::string& model,
                                     const std::string& prompt, int top_k) {
    return {{"model", model},
            {"prompt", prompt},
            {"max_tokens", 1},
            {"temperature", 0},
            {"logprobs", top_k}};
  }

  CompletionReply complete(const std::string& prompt) override {
    return parse_completion_reply(
        post_json(url_, request_body(model_, prompt, top_k_), opts_));
  }

  std::string url() const override { return url_; }
  std::string model() const override { return model_; }
  int top_logprobs() const override { return top_k_; }

 private:
  std::string url_;
  std::string model_;
  int top_k_;
  HttpOptions opts_;
};

/// Token surface forms that count as each option letter.
using LetterVariants = std::array<std::vector<std::string>, 4>;

inline LetterVariants default_letter_variants() {
  LetterVariants v;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string letter(1, kLetters[i]);
    v[i] = {letter, " " + letter};
  }
  return v;
}

/// Max log-probability over the letter's variants present in the map;
/// kMissingLogit when none is present.
inline double extract_option_logits(const std::map<std::string, double>& logprobs,
                                    int letter,
                                    const LetterVariants& variants =
                                        default_letter_variants()) {
  double best = kMissingLogit;
  for (const auto& surface : variants[static_cast<std::size_t>(letter)]) {
    auto it = logprobs.find(surface);
    if (it != logprobs.end()) best = std::max(best, it->second);
  }
  return best;
}

struct QueryOptions {
  RetryPolicy retry;
  LetterVariants variants = default_letter_variants();
  /// Record latency as 0 so output is byte-reproducible.
  bool reproducible = false;
};

inline ModelResponse query_item(const std::string& prompt, EvalEndpoint& endpoint,
                                const QueryOptions& opts = {}) {
  if (prompt.empty()) throw std::invalid_argument("empty prompt");
  const auto start = std::chrono::steady_clock::now();
  CompletionReply reply = with_retries<TransportError>(
      opts.retry, [&] { return endpoint.complete(prompt); });
  const auto elapsed = std::chrono::steady_clock::now() - start;

  ModelResponse r;
  r.next_token_text = std::move(reply.text);
  for (int i = 0; i < 4; ++i) {
    r.option_logits[static_cast<std::size_t>(i)] =
        extract_option_logits(reply.top_logprobs, i, opts.variants);
  }
  r.answer = output_letter(r.next_token_text);
  r.logit_pick = logit_argmax(r.option_logits);
  r.raw = std::move(reply.raw);
  r.latency_ms =
      opts.reproducible
          ? 0
          : std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count();
  return r;
}

struct EvalOptions {
  std::size_t parallelism = 4;
  QueryOptions query;
  /// Previous ResponseSet to resume from; its ok records are kept.
  std::optional<ResponseSet> resume_from;
};

struct EvalOutcome {
  ResponseSet responses;
  std::size_t requests_issued = 0;  // items queried in this run
};

inline nlohmann::json request_params(const EvalEndpoint& endpoint) {
  return {{"max_tokens", 1},
          {"temperature", 0},
          {"logprobs", endpoint.top_logprobs()}};
}

/// Queries every item of `d` and returns one record per item in dataset
/// order. `manifest` must describe this run; resuming from a ResponseSet
/// of a different run raises ManifestMismatch.
inline EvalOutcome run_evaluation(const Dataset& d, const ShotSet& shots,
                                  const PromptTemplate& tpl,
                                  EvalEndpoint& endpoint, RunManifest manifest,
                                  const EvalOptions& opts = {}) {
  if (opts.parallelism < 1) throw ConfigError("parallelism must be >= 1");

  std::unordered_map<std::string, const ResponseRecord*> done;
  if (opts.resume_from) {
    if (!opts.resume_from->manifest.same_run(manifest)) {
      throw ManifestMismatch("cannot resume: existing ResponseSet for " +
                             manifest.dataset_name + "/" + manifest.attack +
                             " was produced by a different run configuration");
    }
    for (const auto& r : opts.resume_from->records) {
      if (r.ok()) done.emplace(r.item_id, &r);
    }
  }

  EvalOutcome outcome;
  outcome.responses.manifest = std::move(manifest);
  auto& records = outcome.responses.records;
  records.resize(d.items.size());

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < d.items.size(); ++i) {
    auto it = done.find(d.items[i].id);
    if (it != done.end()) {
      records[i] = *it->second;
    } else {
      pending.push_back(i);
    }
  }

  parallel_for(pending.size(), opts.parallelism, [&](std::size_t p) {
    const std::size_t i = pending[p];
    const MCQItem& item = d.items[i];
    ResponseRecord& rec = records[i];
    rec.item_id = item.id;
    try {
      ModelResponse r = query_item(render_prompt(item, shots, tpl), endpoint,
                                   opts.query);
      r.item_id = item.id;
      rec.response = std::move(r);
    } catch (const Error& e) {
      rec.error_kind = e.kind();
      rec.error_message = e.what();
    }
  });
  outcome.requests_issued = pending.size();
  return outcome;
}

}  // namespace veilbreak
