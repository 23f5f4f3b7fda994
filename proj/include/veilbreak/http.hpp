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
#include <cstdlib>
#include <string>
#include <thread>
#include <utility>

#include "httplib.h"
// <resolv.h> (pulled in by httplib) defines `_res`, which collides with
// Eigen parameter names.
#ifdef _res
#undef _res
#endif
#include "json.hpp"
#include "veilbreak/errors.hpp"

namespace veilbreak {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;    // always starts with '/'
};

inline Url split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("endpoint url lacks a scheme: '" + url + "'");
  }
  const auto path_begin = url.find('/', scheme_end + 3);
  if (path_begin == std::string::npos) return {url, "/"};
  return {url.substr(0, path_begin), url.substr(path_begin)};
}

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{1000};
};

/// Calls `fn` up to `policy.attempts` times. Waits base, 2*base, ...
/// between attempts. Only `Retryable` exceptions are retried; the last one
/// is rethrown.
template <typename Retryable, typename Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  auto delay = policy.base_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const Retryable&) {
      if (attempt >= policy.attempts) throw;
      if (delay.count() > 0) std::this_thread::sleep_for(delay);
      delay *= 2;
    }
  }
}

inline std::string env_or_empty(const char* name) {
  const char* value = std::getenv(name);
  return value ? std::string(value) : std::string();
}

struct HttpOptions {
  std::chrono::seconds timeout{60};
  std::string bearer_token;
};

/// POSTs a JSON body and returns the parsed JSON reply. Raises
/// TransportError for connection failures, non-2xx statuses and
/// unparseable bodies.
inline nlohmann::json post_json(const std::string& url,
                                const nlohmann::json& body,
                                const HttpOptions& opts) {
  const Url target = split_url(url);
  httplib::Client client(target.origin);
  client.set_connection_timeout(opts.timeout);
  client.set_read_timeout(opts.timeout);
  client.set_write_timeout(opts.timeout);
  httplib::Headers headers;
  if (!opts.bearer_token.empty()) {
    headers.emplace("Authorization", "Bearer " + opts.bearer_token);
  }
  auto res = client.Post(target.path, headers, body.dump(), "application/json");
  if (!res) {
    throw TransportError(0, url + ": " + httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw TransportError(res->status, url + ": HTTP " +
                                          std::to_string(res->status));
  }
  auto parsed = nlohmann::json::parse(res->body, nullptr, false);
  if (parsed.is_discarded()) {
    throw TransportError(res->status, url + ": response is not JSON");
  }
  return parsed;
}

}  // namespace veilbreak
