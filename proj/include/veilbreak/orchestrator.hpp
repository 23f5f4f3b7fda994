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
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "veilbreak/attack.hpp"
#include "veilbreak/cache.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/eval_client.hpp"
#include "veilbreak/metrics.hpp"
#include "veilbreak/probe.hpp"
#include "veilbreak/prompt.hpp"
#include "veilbreak/report.hpp"
#include "veilbreak/response.hpp"

namespace veilbreak {

namespace fs = std::filesystem;

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPartial = 3;
inline constexpr int kExitEndpoint = 4;
inline constexpr int kExitIdentity = 5;
inline constexpr int kExitEmptyReport = 6;

inline constexpr std::string_view kOriginalAttack = "original";

// ---------------------------------------------------------------------------
// Config

struct EndpointConfig {
  std::string url;
  std::string model;
  std::size_t parallelism = 4;
  int top_logprobs = kDefaultTopLogprobs;
  int timeout_s = 60;
};

struct NamedAttack {
  std::string name;
  std::optional<AttackSpec> spec;  // nullopt: the unmodified dataset
};

struct ProbeDump {
  std::string name;
  std::string attack{kOriginalAttack};
  std::string path;
};

struct RunConfig {
  fs::path base_dir;
  std::vector<std::pair<std::string, std::string>> datasets;  // name, path
  std::vector<NamedAttack> attacks;
  std::optional<EndpointConfig> eval_endpoint;
  std::optional<EndpointConfig> rephraser_endpoint;
  std::size_t shots_k = 0;
  std::uint64_t shots_seed = 0;
  std::string shots_pool;
  PromptTemplate tpl;
  LetterVariants letter_variants = default_letter_variants();
  std::vector<ProbeDump> probe_dumps;
  ProbeHyper probe_hyper;
  std::size_t probe_parallelism = 1;
  fs::path output_dir;
  RetryPolicy retry;
  bool reproducible = false;
  bool lenient = false;
};

namespace detail {

inline std::string resolve_path(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal().string();
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& ctx) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(ctx + "." + key + ": wrong type");
  }
}

inline EndpointConfig endpoint_from_json(const nlohmann::json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": must be an object");
  EndpointConfig e;
  e.url = get_or<std::string>(j, "url", "", ctx);
  e.model = get_or<std::string>(j, "model", "", ctx);
  if (e.url.empty()) throw ConfigError(ctx + ".url: required");
  if (e.model.empty()) throw ConfigError(ctx + ".model: required");
  split_url(e.url);
  const auto par = get_or<std::int64_t>(j, "parallelism", 4, ctx);
  if (par < 1) throw ConfigError(ctx + ".parallelism: must be >= 1");
  e.parallelism = static_cast<std::size_t>(par);
  e.top_logprobs = get_or<int>(j, "top_logprobs", kDefaultTopLogprobs, ctx);
  if (e.top_logprobs < 1) throw ConfigError(ctx + ".top_logprobs: must be >= 1");
  e.timeout_s = get_or<int>(j, "timeout_s", 60, ctx);
  if (e.timeout_s < 1) throw ConfigError(ctx + ".timeout_s: must be >= 1");
  return e;
}

}  // namespace detail

/// Parses a run config. Relative paths resolve against `base_dir`.
inline RunConfig parse_config(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  cfg.base_dir = base_dir;

  if (!j.contains("datasets") || !j["datasets"].is_object() || j["datasets"].empty()) {
    throw ConfigError("datasets: need at least one name -> path entry");
  }
  for (const auto& [name, path] : j["datasets"].items()) {
    if (!path.is_string()) throw ConfigError("datasets." + name + ": must be a path");
    if (name.find("__") != std::string::npos || name.find('/') != std::string::npos) {
      throw ConfigError("datasets." + name + ": name may not contain '__' or '/'");
    }
    cfg.datasets.emplace_back(name, detail::resolve_path(base_dir, path.get<std::string>()));
  }

  std::map<std::string, std::string> filler_sources;
  if (j.contains("filler_sources")) {
    if (!j["filler_sources"].is_object()) throw ConfigError("filler_sources: must be an object");
    for (const auto& [lang, path] : j["filler_sources"].items()) {
      if (!path.is_string()) throw ConfigError("filler_sources." + lang + ": must be a path");
      filler_sources[lang] = detail::resolve_path(base_dir, path.get<std::string>());
    }
  }

  const auto registry = builtin_attack_registry();
  const nlohmann::json attacks =
      j.contains("attacks") ? j["attacks"] : nlohmann::json::array({kOriginalAttack});
  if (!attacks.is_array() || attacks.empty()) {
    throw ConfigError("attacks: must be a non-empty list");
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const auto& a = attacks[i];
    const std::string ctx = "attacks[" + std::to_string(i) + "]";
    NamedAttack named;
    if (a.is_string()) {
      named.name = a.get<std::string>();
      if (named.name != kOriginalAttack) {
        auto it = registry.find(named.name);
        if (it == registry.end()) {
          throw ConfigError(ctx + ": unknown attack '" + named.name + "'");
        }
        named.spec = it->second;
      }
    } else if (a.is_object()) {
      named.name = detail::get_or<std::string>(a, "name", "", ctx);
      if (named.name.empty()) throw ConfigError(ctx + ".name: required");
      if (named.name == kOriginalAttack) throw ConfigError(ctx + ".name: reserved");
      try {
        named.spec = attack_spec_from_json(a);
      } catch (const ConfigError& e) {
        throw ConfigError(ctx + ": " + e.what());
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(ctx + ": wrong field type");
      }
    } else {
      throw ConfigError(ctx + ": must be a name or an object");
    }
    if (named.name.find('/') != std::string::npos) {
      throw ConfigError(ctx + ": name may not contain '/'");
    }
    if (!seen.insert(named.name).second) {
      throw ConfigError(ctx + ": duplicate attack '" + named.name + "'");
    }
    if (named.spec && named.spec->kind == AttackKind::kFiller) {
      auto& src = named.spec->filler_source;
      if (src.empty()) {
        auto it = filler_sources.find(named.spec->language);
        if (it == filler_sources.end()) {
          throw ConfigError(ctx + ": '" + named.name + "' needs filler_sources." +
                            named.spec->language);
        }
        src = it->second;
      } else if (!src.starts_with("builtin:")) {
        src = detail::resolve_path(base_dir, src);
      }
    }
    cfg.attacks.push_back(std::move(named));
  }

  if (j.contains("eval_endpoint")) {
    cfg.eval_endpoint = detail::endpoint_from_json(j["eval_endpoint"], "eval_endpoint");
  }
  if (j.contains("rephraser_endpoint")) {
    cfg.rephraser_endpoint =
        detail::endpoint_from_json(j["rephraser_endpoint"], "rephraser_endpoint");
  }

  if (j.contains("shots")) {
    const auto& s = j["shots"];
    const auto k = detail::get_or<std::int64_t>(s, "k", 0, "shots");
    if (k < 0) throw ConfigError("shots.k: must be >= 0");
    cfg.shots_k = static_cast<std::size_t>(k);
    cfg.shots_seed = detail::get_or<std::uint64_t>(s, "seed", 0, "shots");
    cfg.shots_pool =
        detail::resolve_path(base_dir, detail::get_or<std::string>(s, "pool", "", "shots"));
    if (cfg.shots_k > 0 && cfg.shots_pool.empty()) {
      throw ConfigError("shots.pool: required when shots.k > 0");
    }
  }

  if (j.contains("template")) {
    try {
      cfg.tpl = template_from_json(j["template"]);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("template: wrong field type");
    }
  }

  if (j.contains("letter_variants")) {
    const auto& lv = j["letter_variants"];
    if (!lv.is_object()) throw ConfigError("letter_variants: must be an object");
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string letter(1, kLetters[i]);
      if (!lv.contains(letter)) continue;
      cfg.letter_variants[i] = detail::get_or<std::vector<std::string>>(
          lv, letter.c_str(), {}, "letter_variants");
      if (cfg.letter_variants[i].empty()) {
        throw ConfigError("letter_variants." + letter + ": must not be empty");
      }
    }
  }

  if (j.contains("probe")) {
    const auto& p = j["probe"];
    if (!p.is_object()) throw ConfigError("probe: must be an object");
    ProbeHyper& h = cfg.probe_hyper;
    h.train_fraction = detail::get_or<double>(p, "train_fraction", h.train_fraction, "probe");
    h.l2 = detail::get_or<double>(p, "l2", h.l2, "probe");
    h.steps = detail::get_or<int>(p, "steps", h.steps, "probe");
    h.learning_rate = detail::get_or<double>(p, "learning_rate", h.learning_rate, "probe");
    h.seed = detail::get_or<std::uint64_t>(p, "seed", h.seed, "probe");
    const auto par = detail::get_or<std::int64_t>(p, "parallelism", 1, "probe");
    if (par < 1) throw ConfigError("probe.parallelism: must be >= 1");
    cfg.probe_parallelism = static_cast<std::size_t>(par);
    if (!(h.train_fraction > 0 && h.train_fraction < 1)) {
      throw ConfigError("probe.train_fraction: must be in (0, 1)");
    }
    if (h.l2 < 0) throw ConfigError("probe.l2: must be >= 0");
    if (h.steps < 1) throw ConfigError("probe.steps: must be >= 1");
    if (!(h.learning_rate > 0)) throw ConfigError("probe.learning_rate: must be > 0");
    const auto dumps = p.value("dumps", nlohmann::json::array());
    if (!dumps.is_array()) throw ConfigError("probe.dumps: must be a list");
    std::unordered_set<std::string> names;
    for (std::size_t i = 0; i < dumps.size(); ++i) {
      const std::string ctx = "probe.dumps[" + std::to_string(i) + "]";
      ProbeDump d;
      d.path = detail::get_or<std::string>(dumps[i], "path", "", ctx);
      if (d.path.empty()) throw ConfigError(ctx + ".path: required");
      d.path = detail::resolve_path(base_dir, d.path);
      d.name = detail::get_or<std::string>(dumps[i], "name",
                                           fs::path(d.path).stem().string(), ctx);
      d.attack = detail::get_or<std::string>(dumps[i], "attack", d.attack, ctx);
      if (d.name.empty() || d.name.find('/') != std::string::npos) {
        throw ConfigError(ctx + ".name: invalid");
      }
      if (!names.insert(d.name).second) {
        throw ConfigError(ctx + ".name: duplicate '" + d.name + "'");
      }
      cfg.probe_dumps.push_back(std::move(d));
    }
  }

  if (j.contains("retry")) {
    const auto& r = j["retry"];
    cfg.retry.attempts = detail::get_or<int>(r, "attempts", cfg.retry.attempts, "retry");
    if (cfg.retry.attempts < 1) throw ConfigError("retry.attempts: must be >= 1");
    const auto delay = detail::get_or<std::int64_t>(
        r, "base_delay_ms", cfg.retry.base_delay.count(), "retry");
    if (delay < 0) throw ConfigError("retry.base_delay_ms: must be >= 0");
    cfg.retry.base_delay = std::chrono::milliseconds(delay);
  }

  cfg.output_dir = detail::resolve_path(
      base_dir, detail::get_or<std::string>(j, "output_dir", "veilbreak-out", "config"));
  cfg.reproducible = detail::get_or<bool>(j, "reproducible", false, "config");
  cfg.lenient = detail::get_or<bool>(j, "lenient", false, "config");
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file_bytes(path);
  } catch (const std::runtime_error&) {
    throw ConfigError("config not readable: " + path);
  }
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
  return parse_config(j, fs::absolute(path).parent_path());
}

namespace detail {

inline void require_file(const std::string& key, const std::string& path) {
  if (!fs::is_regular_file(path)) throw ConfigError(key + ": file not found: " + path);
}

}  // namespace detail

/// Checks that the files a subcommand reads exist.
inline void validate_for(const RunConfig& cfg, std::string_view command) {
  const bool all = command == "all";
  for (const auto& [name, path] : cfg.datasets) {
    if (command != "report" && command != "probe") detail::require_file("datasets." + name, path);
  }
  if (command == "transform" || all) {
    bool needs_rephraser = false;
    for (const auto& a : cfg.attacks) {
      if (!a.spec) continue;
      if (a.spec->kind == AttackKind::kFiller) {
        if (!a.spec->filler_source.starts_with("builtin:")) {
          detail::require_file("attacks." + a.name + ".filler_source", a.spec->filler_source);
        }
      } else {
        needs_rephraser = true;
      }
    }
    if (needs_rephraser && !cfg.rephraser_endpoint) {
      throw ConfigError("rephraser_endpoint: required by the configured attacks");
    }
  }
  if (command == "evaluate" || all) {
    if (!cfg.eval_endpoint) throw ConfigError("eval_endpoint: required");
    if (cfg.shots_k > 0) detail::require_file("shots.pool", cfg.shots_pool);
  }
  if (command == "probe" || (all && !cfg.probe_dumps.empty())) {
    if (cfg.probe_dumps.empty()) throw ConfigError("probe.dumps: nothing to probe");
    for (const auto& d : cfg.probe_dumps) detail::require_file("probe.dumps." + d.name, d.path);
  }
}

// ---------------------------------------------------------------------------
// Output layout

struct OutputLayout {
  fs::path root;

  fs::path cache() const { return root / ".veilbreak-cache"; }
  fs::path datasets() const { return root / "datasets"; }
  fs::path responses() const { return root / "responses"; }
  fs::path scores() const { return root / "scores"; }
  fs::path probes() const { return root / "probes"; }
  fs::path report() const { return root / "report"; }

  static std::string stem(const std::string& dataset, const std::string& attack) {
    return dataset + "__" + attack;
  }
  fs::path attacked_dataset(const std::string& dataset, const std::string& attack) const {
    return datasets() / (stem(dataset, attack) + ".jsonl");
  }
  fs::path transform_report(const std::string& dataset, const std::string& attack) const {
    return datasets() / (stem(dataset, attack) + ".report.json");
  }
  fs::path response_set(const std::string& dataset, const std::string& attack) const {
    return responses() / (stem(dataset, attack) + ".jsonl");
  }

  /// Paths under the output root are stored relative to it so that two
  /// runs into different directories produce identical files.
  std::string portable(const fs::path& p) const {
    const auto rel = p.lexically_normal().lexically_relative(root.lexically_normal());
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.lexically_normal().string();
  }
  std::string resolve(const std::string& stored) const {
    const fs::path p(stored);
    return p.is_relative() ? (root / p).lexically_normal().string() : stored;
  }
};

// ---------------------------------------------------------------------------
// Commands

/// Endpoint factories; tests swap these for in-process fakes.
struct Services {
  std::function<std::unique_ptr<EvalEndpoint>(const EndpointConfig&)> make_eval =
      [](const EndpointConfig& e) -> std::unique_ptr<EvalEndpoint> {
    HttpOptions opts;
    opts.timeout = std::chrono::seconds(e.timeout_s);
    return std::make_unique<HttpEvalEndpoint>(e.url, e.model, e.top_logprobs, opts);
  };
  std::function<std::unique_ptr<RephraserEndpoint>(const EndpointConfig&)>
      make_rephraser = [](const EndpointConfig& e) -> std::unique_ptr<RephraserEndpoint> {
    HttpOptions opts;
    opts.timeout = std::chrono::seconds(e.timeout_s);
    return std::make_unique<HttpRephraser>(e.url, e.model, opts);
  };
  std::ostream* log = &std::cerr;
};

struct CommandOptions {
  bool resume = false;
};

/// Timestamp recorded in manifests and cache entries.
inline std::int64_t run_timestamp(const RunConfig& cfg) {
  if (!cfg.reproducible) return unix_now();
  const std::string epoch = env_or_empty("SOURCE_DATE_EPOCH");
  if (epoch.empty()) return 0;
  try {
    return std::stoll(epoch);
  } catch (const std::exception&) {
    throw ConfigError("SOURCE_DATE_EPOCH is not an integer");
  }
}

namespace detail {

inline Dataset load_named(const std::string& name, const std::string& path, bool lenient) {
  LoadOptions lo;
  lo.lenient = lenient;
  Dataset d = load_dataset(path, lo);
  d.name = name;
  return d;
}

inline std::string pretty(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline int worse(int a, int b) {
  auto rank = [](int c) { return c == kExitPartial ? 1 : (c == kExitOk ? 0 : 2); };
  return rank(b) > rank(a) ? b : a;
}

}  // namespace detail

/// Applies every configured attack to every dataset.
/// Returns 0, or 3 when some items failed to transform.
inline int cmd_transform(const RunConfig& cfg, Services& svc) {
  validate_for(cfg, "transform");
  const OutputLayout out{cfg.output_dir};
  CacheStore cache(out.cache());
  std::unique_ptr<RephraserEndpoint> rephraser;
  if (cfg.rephraser_endpoint) rephraser = svc.make_rephraser(*cfg.rephraser_endpoint);

  TransformOptions topts;
  topts.retry = cfg.retry;
  if (cfg.rephraser_endpoint) topts.parallelism = cfg.rephraser_endpoint->parallelism;
  if (cfg.reproducible) topts.fixed_timestamp = run_timestamp(cfg);

  int code = kExitOk;
  for (const auto& [ds_name, ds_path] : cfg.datasets) {
    const Dataset d = detail::load_named(ds_name, ds_path, cfg.lenient);
    for (const auto& a : cfg.attacks) {
      if (!a.spec) continue;
      TransformResult r = transform_dataset(
          d, a.name, *a.spec,
          a.spec->kind == AttackKind::kFiller ? nullptr : rephraser.get(), cache, topts);
      write_dataset(r.dataset, out.attacked_dataset(ds_name, a.name).string());

      nlohmann::json sidecar;
      sidecar["dataset"] = ds_name;
      sidecar["attack"] = a.name;
      sidecar["spec"] = r.dataset.provenance;
      sidecar["items_in"] = d.items.size();
      sidecar["items_out"] = r.dataset.items.size();
      sidecar["failed"] = nlohmann::json::array();
      for (const auto& f : r.failures) {
        sidecar["failed"].push_back(
            {{"id", f.id}, {"kind", f.kind}, {"status", f.status}, {"message", f.message}});
      }
      write_text_file(out.transform_report(ds_name, a.name).string(),
                      detail::pretty(sidecar));

      *svc.log << "transform " << ds_name << "/" << a.name << ": "
               << r.dataset.items.size() << "/" << d.items.size() << " items";
      if (a.spec->kind != AttackKind::kFiller) {
        *svc.log << " (" << r.client_calls << " calls, " << r.cache_hits << " cached)";
      }
      *svc.log << "\n";
      if (!r.failures.empty()) {
        *svc.log << "  " << r.failures.size() << " items failed; see "
                 << out.transform_report(ds_name, a.name).string() << "\n";
        code = detail::worse(code, r.dataset.items.empty() ? kExitEndpoint : kExitPartial);
      }
    }
  }
  return code;
}

/// Queries the eval endpoint for every (dataset, attack) pair.
/// Returns 0, 3 when some items failed, 4 when a whole set failed.
inline int cmd_evaluate(const RunConfig& cfg, Services& svc, const CommandOptions& copts = {}) {
  validate_for(cfg, "evaluate");
  const OutputLayout out{cfg.output_dir};
  auto endpoint = svc.make_eval(*cfg.eval_endpoint);

  std::vector<Dataset> originals;
  for (const auto& [name, path] : cfg.datasets) {
    originals.push_back(detail::load_named(name, path, cfg.lenient));
  }

  ShotSet shots;
  if (cfg.shots_k > 0) {
    std::unordered_set<std::string> exclude;
    for (const auto& d : originals) {
      for (const auto& item : d.items) exclude.insert(item.id);
    }
    const Dataset pool = detail::load_named("pool", cfg.shots_pool, cfg.lenient);
    shots = select_shots(pool, cfg.shots_k, exclude, cfg.shots_seed);
  }

  EvalOptions eopts;
  eopts.parallelism = cfg.eval_endpoint->parallelism;
  eopts.query.retry = cfg.retry;
  eopts.query.variants = cfg.letter_variants;
  eopts.query.reproducible = cfg.reproducible;
  const std::int64_t timestamp = run_timestamp(cfg);

  int code = kExitOk;
  for (const auto& original : originals) {
    for (const auto& a : cfg.attacks) {
      std::string path;
      Dataset d;
      if (!a.spec) {
        path = cfg.datasets[static_cast<std::size_t>(&original - originals.data())].second;
        d = original;
      } else {
        path = out.attacked_dataset(original.name, a.name).string();
        if (!fs::is_regular_file(path)) {
          throw ConfigError("no transformed dataset for " + original.name + "/" + a.name +
                            " (" + path + "); run transform first");
        }
        try {
          d = detail::load_named(original.name, path, cfg.lenient);
        } catch (const EmptyDataset&) {
          *svc.log << "evaluate " << original.name << "/" << a.name
                   << ": transformed dataset is empty, skipped\n";
          code = detail::worse(code, kExitPartial);
          continue;
        }
      }

      RunManifest m;
      m.endpoint_url = endpoint->url();
      m.model = endpoint->model();
      m.dataset_name = original.name;
      m.dataset_path = out.portable(path);
      m.dataset_hash = dataset_content_hash(d);
      m.attack = a.name;
      m.shots_k = shots.k();
      m.shots_seed = cfg.shots_seed;
      m.shot_ids = shots.ids();
      m.template_hash = template_hash(cfg.tpl);
      m.timestamp = timestamp;
      m.request = request_params(*endpoint);

      const auto target = out.response_set(original.name, a.name);
      eopts.resume_from.reset();
      if (copts.resume && fs::is_regular_file(target)) {
        eopts.resume_from = load_response_set(target.string());
      }
      EvalOutcome outcome = run_evaluation(d, shots, cfg.tpl, *endpoint, m, eopts);
      save_response_set(outcome.responses, target.string());

      const std::size_t ok = outcome.responses.ok_count();
      const std::size_t total = outcome.responses.records.size();
      *svc.log << "evaluate " << original.name << "/" << a.name << ": " << ok << "/"
               << total << " ok (" << outcome.requests_issued << " queried)\n";
      if (ok < total) {
        for (const auto& rec : outcome.responses.records) {
          if (!rec.ok()) {
            *svc.log << "  first failure: " << rec.item_id << ": " << rec.error_message
                     << "\n";
            break;
          }
        }
        code = detail::worse(code, ok == 0 ? kExitEndpoint : kExitPartial);
      }
    }
  }
  return code;
}

namespace detail {

inline std::vector<fs::path> list_files(const fs::path& dir, std::string_view ext) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ext) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace detail

/// Scores every stored ResponseSet. Rows follow config order.
/// Raises IdentityViolation / AlignmentError on inconsistent inputs.
inline int cmd_score(const RunConfig& cfg, Services& svc) {
  const OutputLayout out{cfg.output_dir};
  const auto files = detail::list_files(out.responses(), ".jsonl");
  if (files.empty()) {
    throw ConfigError("no response sets under " + out.responses().string() +
                      "; run evaluate first");
  }

  auto order = [&](const RunManifest& m) {
    std::size_t di = cfg.datasets.size(), ai = cfg.attacks.size();
    for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
      if (cfg.datasets[i].first == m.dataset_name) di = i;
    }
    for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
      if (cfg.attacks[i].name == m.attack) ai = i;
    }
    return std::pair{di, ai};
  };

  struct Scored {
    std::pair<std::size_t, std::size_t> key;
    std::string file;
    ScoreRow row;
  };
  std::vector<Scored> scored;
  for (const auto& file : files) {
    const ResponseSet rs = load_response_set(file.string());
    const std::string keys_path = out.resolve(rs.manifest.dataset_path);
    LoadOptions lo;
    lo.lenient = cfg.lenient;
    const Dataset keys = load_dataset(keys_path, lo);
    if (dataset_content_hash(keys) != rs.manifest.dataset_hash) {
      throw AlignmentError(file.filename().string() + ": dataset " + keys_path +
                           " changed since evaluation (hash mismatch)");
    }
    if (rs.ok_count() == 0) {
      *svc.log << "score " << file.filename().string() << ": no successful responses, skipped\n";
      continue;
    }
    try {
      scored.push_back({order(rs.manifest), file.filename().string(),
                        build_score_row(rs.manifest.model, rs.manifest.dataset_name,
                                        rs.manifest.attack, rs, keys)});
    } catch (const IdentityViolation& e) {
      throw IdentityViolation(file.filename().string() + ": " + e.what());
    }
  }
  if (scored.empty()) throw EmptyReport();
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Scored& a, const Scored& b) { return a.key < b.key; });

  std::vector<ScoreRow> rows;
  nlohmann::json rows_json = nlohmann::json::array();
  for (auto& s : scored) {
    rows_json.push_back(score_row_to_json(s.row));
    rows.push_back(std::move(s.row));
  }
  write_text_file((out.scores() / "scores.json").string(), detail::pretty(rows_json));
  write_text_file((out.scores() / "scores.csv").string(), emit_table(rows, TableFormat::kCsv));
  write_text_file((out.scores() / "scores.md").string(),
                  emit_table(rows, TableFormat::kMarkdown));
  *svc.log << "score: " << rows.size() << " rows -> " << (out.scores() / "scores.csv").string()
           << "\n";
  return kExitOk;
}

inline std::vector<ScoreRow> load_score_rows(const fs::path& path) {
  auto j = nlohmann::json::parse(read_file_bytes(path.string()), nullptr, false);
  if (j.is_discarded() || !j.is_array()) {
    throw MalformedRecord(1, path.string() + ": expected a JSON array of rows");
  }
  std::vector<ScoreRow> rows;
  for (const auto& r : j) rows.push_back(score_row_from_json(r));
  return rows;
}

/// Trains per-layer probes on each configured activation dump.
inline int cmd_probe(const RunConfig& cfg, Services& svc) {
  validate_for(cfg, "probe");
  const OutputLayout out{cfg.output_dir};
  std::vector<ProbeCurve> curves;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& dump : cfg.probe_dumps) {
    const ActivationSet a = load_activations(dump.path);
    ProbeCurve c{dump.name, dump.attack, probe_curve(a, cfg.probe_hyper, cfg.probe_parallelism)};
    const std::string csv_name = dump.name + ".csv";
    write_text_file((out.probes() / csv_name).string(), curve_to_csv(c.points));
    index.push_back({{"name", dump.name},
                     {"attack", dump.attack},
                     {"model_id", a.model_id},
                     {"items", a.item_ids.size()},
                     {"csv", csv_name}});
    double best = 0;
    for (const auto& p : c.points) best = std::max(best, p.accuracy);
    *svc.log << "probe " << dump.name << ": " << c.points.size()
             << " layers, best accuracy " << format_fixed4(best) << "\n";
    curves.push_back(std::move(c));
  }
  write_text_file((out.probes() / "curves.json").string(), detail::pretty(index));
  write_text_file((out.probes() / "curves.svg").string(), emit_line_chart(curves));
  return kExitOk;
}

inline std::vector<ProbeCurve> load_probe_curves(const fs::path& probes_dir) {
  std::vector<ProbeCurve> curves;
  const auto index_path = probes_dir / "curves.json";
  if (!fs::is_regular_file(index_path)) return curves;
  auto index = nlohmann::json::parse(read_file_bytes(index_path.string()), nullptr, false);
  if (index.is_discarded() || !index.is_array()) {
    throw MalformedRecord(1, index_path.string() + ": expected a JSON array");
  }
  for (const auto& e : index) {
    ProbeCurve c;
    c.name = e.value("name", "");
    c.attack = e.value("attack", std::string(kOriginalAttack));
    c.points = parse_curve_csv(read_file_bytes((probes_dir / e.value("csv", "")).string()));
    curves.push_back(std::move(c));
  }
  return curves;
}

/// Collects scores, probe curves and run manifests into report/.
inline int cmd_report(const RunConfig& cfg, Services& svc) {
  const OutputLayout out{cfg.output_dir};
  ReportBundle bundle;
  bundle.footnotes = default_footnotes(cfg.tpl);
  const auto scores_path = out.scores() / "scores.json";
  if (fs::is_regular_file(scores_path)) bundle.rows = load_score_rows(scores_path);
  bundle.curves = load_probe_curves(out.probes());
  for (const auto& file : detail::list_files(out.responses(), ".jsonl")) {
    bundle.manifests.push_back(load_response_set(file.string()).manifest);
  }
  if (bundle.rows.empty() && bundle.curves.empty()) throw EmptyReport();

  const auto dir = out.report();
  write_text_file((dir / "report.md").string(), render_report_markdown(bundle));
  if (!bundle.rows.empty()) {
    write_text_file((dir / "table.csv").string(), emit_table(bundle.rows, TableFormat::kCsv));
    write_text_file((dir / "table.md").string(),
                    emit_table(bundle.rows, TableFormat::kMarkdown));
    write_text_file((dir / "output_score.svg").string(),
                    emit_bar_chart(bundle.rows, "figure_output_score", 0.25));
    write_text_file((dir / "logit_accuracy.svg").string(),
                    emit_bar_chart(bundle.rows, "acc_logits", 0.25));
    write_text_file((dir / "adjusted_accuracy.svg").string(),
                    emit_bar_chart(bundle.rows, "adjusted_acc", 0.0));
  }
  if (!bundle.curves.empty()) {
    write_text_file((dir / "probe_curves.svg").string(), emit_line_chart(bundle.curves));
  }
  *svc.log << "report: " << (dir / "report.md").string() << "\n";
  return kExitOk;
}

/// transform -> evaluate -> score -> probe (when dumps are configured) ->
/// report. Partial results (3) carry on; any other failure stops the run.
inline int cmd_all(const RunConfig& cfg, Services& svc, const CommandOptions& copts = {}) {
  validate_for(cfg, "all");
  int code = kExitOk;
  for (auto step : {+[](const RunConfig& c, Services& s, const CommandOptions&) {
                      return cmd_transform(c, s);
                    },
                    +[](const RunConfig& c, Services& s, const CommandOptions& o) {
                      return cmd_evaluate(c, s, o);
                    },
                    +[](const RunConfig& c, Services& s, const CommandOptions&) {
                      return cmd_score(c, s);
                    },
                    +[](const RunConfig& c, Services& s, const CommandOptions&) {
                      return c.probe_dumps.empty() ? kExitOk : cmd_probe(c, s);
                    },
                    +[](const RunConfig& c, Services& s, const CommandOptions&) {
                      return cmd_report(c, s);
                    }}) {
    const int rc = step(cfg, svc, copts);
    if (rc != kExitOk && rc != kExitPartial) return rc;
    code = detail::worse(code, rc);
  }
  return code;
}

/// Maps a library error onto the process exit code.
inline int exit_code_for(const Error& e) {
  const std::string& k = e.kind();
  if (k == "IdentityViolation" || k == "AlignmentError") return kExitIdentity;
  if (k == "EmptyReport" || k == "EmptyRun") return kExitEmptyReport;
  if (k == "Transport" || k == "EndpointError" || k == "LogprobsUnsupported") {
    return kExitEndpoint;
  }
  if (k == "Divergence" || k == "UnknownMetric") return kExitFailure;
  return kExitConfig;
}

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"transform", "evaluate", "score",
                                              "probe",     "report",   "all"};
  return names;
}

/// Runs one subcommand and converts errors into exit codes.
inline int run_command(std::string_view command, const RunConfig& cfg, Services& svc,
                       const CommandOptions& copts = {}) {
  try {
    if (command == "transform") return cmd_transform(cfg, svc);
    if (command == "evaluate") return cmd_evaluate(cfg, svc, copts);
    if (command == "score") return cmd_score(cfg, svc);
    if (command == "probe") return cmd_probe(cfg, svc);
    if (command == "report") return cmd_report(cfg, svc);
    if (command == "all") return cmd_all(cfg, svc, copts);
    *svc.log << "error: unknown subcommand '" << command << "'\n";
    return kExitConfig;
  } catch (const Error& e) {
    *svc.log << "error [" << e.kind() << "]: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    *svc.log << "error [IoError]: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace veilbreak
