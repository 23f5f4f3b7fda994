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

// Synthetic datasets, scripted replies and activation dumps for tests.

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "support/mock_server.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/eval_client.hpp"
#include "veilbreak/probe.hpp"
#include "veilbreak/response.hpp"

namespace veilbreak::testing {

inline std::string item_id(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "q%05zu", i);
  return buf;
}

inline MCQItem make_item(const std::string& id, int answer, const std::string& topic = "") {
  MCQItem item;
  item.id = id;
  item.question = "[" + id + "] Which option is correct" +
                  (topic.empty() ? std::string() : " about " + topic) + "?";
  item.choices = {"alpha " + id, "beta " + id, "gamma " + id, "delta " + id};
  item.answer_index = answer;
  return item;
}

/// n items with ids q00000.., answers drawn from `seed`.
inline Dataset synthetic_dataset(std::size_t n, std::uint64_t seed,
                                 const std::string& name = "synthetic",
                                 std::size_t first_id = 0) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.name = name;
  d.source_path = name + ".jsonl";
  for (std::size_t i = 0; i < n; ++i) {
    d.items.push_back(make_item(item_id(first_id + i), static_cast<int>(rng() % 4)));
  }
  return d;
}

/// Aggregate outcome to script: how many items answer in the right format,
/// how many of those are correct, and how many logit picks are correct in
/// each format group.
struct ReplayPlan {
  std::size_t n = 0;
  std::size_t right = 0;
  std::size_t correct = 0;
  std::size_t logit_correct_right = 0;
  std::size_t logit_correct_wrong = 0;
};

struct ScriptedReply {
  std::string text;
  std::map<std::string, double> top;
};

inline std::string letter(int i) { return std::string(1, kLetters[static_cast<std::size_t>(i)]); }

/// One scripted reply per item of `d` realizing `plan`. Roles are assigned
/// through a seeded permutation so they are spread across the dataset.
inline std::map<std::string, ScriptedReply> script_replies(const Dataset& d,
                                                           const ReplayPlan& plan,
                                                           std::uint64_t seed = 7) {
  std::vector<std::size_t> order(d.items.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));

  std::map<std::string, ScriptedReply> out;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const MCQItem& item = d.items[order[rank]];
    const int gold = item.answer_index;
    ScriptedReply r;
    int pick;
    if (rank < plan.right) {
      const int said = rank < plan.correct ? gold : (gold + 1) % 4;
      r.text = " " + letter(said);
      pick = rank < plan.logit_correct_right ? gold : (gold + 2) % 4;
    } else {
      r.text = " The";
      r.top[" The"] = -0.2;
      pick = (rank - plan.right) < plan.logit_correct_wrong ? gold : (gold + 3) % 4;
    }
    double lp = -3.0;
    for (int l = 0; l < 4; ++l) {
      if (l == pick) continue;
      r.top[" " + letter(l)] = lp;
      lp -= 0.5;
    }
    r.top[" " + letter(pick)] = -1.0;
    r.top[letter(pick)] = -6.0;  // bare variant, lower than the spaced one
    out[item.id] = std::move(r);
  }
  return out;
}

/// Serves `/v1/completions` from a script keyed by the `[id]` tag of the
/// prompt's target item.
inline void serve_script(MockServer& server, std::map<std::string, ScriptedReply> script) {
  server.route("/v1/completions", [script = std::move(script)](const nlohmann::json& req) {
    const auto prompt = req.value("prompt", std::string());
    auto it = script.find(last_tag(prompt));
    if (it == script.end()) return MockReply{404, {{"error", "unknown item"}}};
    return MockReply{200, completion_json(it->second.text, it->second.top)};
  });
}

/// Answers every chat request deterministically from the request content.
inline MockHandler echo_rephraser() {
  return [](const nlohmann::json& req) {
    const std::string content = req["messages"][0]["content"].get<std::string>();
    const auto tag = last_tag(content);
    std::string reply;
    if (content.find("variables of the type") != std::string::npos) {
      reply = "X = option\nY = correct\n[" + tag + "] Which X is Y?";
    } else {
      reply = "[" + tag + "] (rephrased, " + std::to_string(content.size()) + " chars)";
    }
    return MockReply{200, chat_json(reply)};
  };
}

/// Four Gaussian clusters, one per label, at every layer. `separation`
/// scales the class means; labels are shuffled when `shuffle_labels`.
inline ActivationSet cluster_dump(std::size_t per_class, std::size_t dim, double separation,
                                  std::uint64_t seed, std::vector<int> layers = {0},
                                  bool shuffle_labels = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  ActivationSet a;
  a.model_id = "synthetic";
  a.layer_indices = std::move(layers);
  a.hidden_dim = dim;
  a.prompt_hash = "none";
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t k = 0; k < per_class; ++k) {
      a.item_ids.push_back(item_id(c * per_class + k));
      a.labels.push_back(static_cast<int>(c));
    }
  }
  std::vector<std::vector<double>> means(4, std::vector<double>(dim));
  for (auto& m : means) {
    for (auto& v : m) v = separation * noise(rng);
  }
  a.tensor.resize(a.num_layers() * a.num_items() * dim);
  for (std::size_t l = 0; l < a.num_layers(); ++l) {
    for (std::size_t i = 0; i < a.num_items(); ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double mean = means[static_cast<std::size_t>(a.labels[i])][d] *
                            (1.0 + static_cast<double>(l));
        a.tensor[(l * a.num_items() + i) * dim + d] = static_cast<float>(mean + noise(rng));
      }
    }
  }
  if (shuffle_labels) std::shuffle(a.labels.begin(), a.labels.end(), rng);
  return a;
}

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "vb") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const {
    return child.empty() ? path_.string() : (path_ / child).string();
  }

 private:
  std::filesystem::path path_;
};

}  // namespace veilbreak::testing
