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

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace veilbreak {

// Base for every error the harness raises. `kind()` is a stable short name
// used in failure records and sidecar reports.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// corpus

class MalformedRecord : public Error {
 public:
  MalformedRecord(std::size_t line, const std::string& reason)
      : Error("MalformedRecord",
              "line " + std::to_string(line) + ": " + reason),
        line_(line),
        reason_(reason) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t line_;
  std::string reason_;
};

class EmptyDataset : public Error {
 public:
  explicit EmptyDataset(const std::string& path)
      : Error("EmptyDataset", "no valid items in " + path) {}
};

class DuplicateId : public Error {
 public:
  explicit DuplicateId(const std::string& id)
      : Error("DuplicateId", "duplicate item id '" + id + "'"), id_(id) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class MissingCounterpart : public Error {
 public:
  explicit MissingCounterpart(const std::string& id)
      : Error("MissingCounterpart",
              "attacked item '" + id + "' has no original"),
        id_(id) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

// attack-engine

class EmptyFiller : public Error {
 public:
  EmptyFiller() : Error("EmptyFiller", "filler text is empty") {}
};

class UnresolvedPlaceholder : public Error {
 public:
  explicit UnresolvedPlaceholder(const std::string& placeholder)
      : Error("UnresolvedPlaceholder",
              "template placeholder not resolved: " + placeholder) {}
};

class EmptyRephrase : public Error {
 public:
  EmptyRephrase() : Error("EmptyRephrase", "rephraser returned no text") {}
};

class EndpointError : public Error {
 public:
  EndpointError(const std::string& id, int status, const std::string& detail)
      : Error("EndpointError", "item '" + id + "': status " +
                                   std::to_string(status) + ": " + detail),
        id_(id),
        status_(status) {}
  const std::string& id() const noexcept { return id_; }
  int status() const noexcept { return status_; }

 private:
  std::string id_;
  int status_;
};

// eval-client

class TransportError : public Error {
 public:
  TransportError(int status, const std::string& detail)
      : Error("Transport", detail), status_(status) {}
  // HTTP status, or 0 when no response was received.
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class LogprobsUnsupported : public Error {
 public:
  LogprobsUnsupported()
      : Error("LogprobsUnsupported",
              "endpoint response carries no token log-probabilities") {}
};

class ManifestMismatch : public Error {
 public:
  explicit ManifestMismatch(const std::string& detail)
      : Error("ManifestMismatch", detail) {}
};

// metrics

class AlignmentError : public Error {
 public:
  explicit AlignmentError(const std::string& detail)
      : Error("AlignmentError", detail) {}
};

class EmptyRun : public Error {
 public:
  EmptyRun() : Error("EmptyRun", "response set has no scored items") {}
};

class IdentityViolation : public Error {
 public:
  explicit IdentityViolation(const std::string& detail)
      : Error("IdentityViolation", detail) {}
};

// probe-lab

class BadMagic : public Error {
 public:
  explicit BadMagic(const std::string& path)
      : Error("BadMagic", path + ": not an ACTV0001 dump") {}
};

class HeaderMismatch : public Error {
 public:
  HeaderMismatch(std::size_t expected, std::size_t actual)
      : Error("HeaderMismatch",
              "tensor byte length: expected " + std::to_string(expected) +
                  ", got " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}
  explicit HeaderMismatch(const std::string& detail)
      : Error("HeaderMismatch", detail), expected_(0), actual_(0) {}
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

class NonFiniteValue : public Error {
 public:
  explicit NonFiniteValue(std::size_t index)
      : Error("NonFiniteValue",
              "non-finite activation at flat index " + std::to_string(index)),
        index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class TooFewItems : public Error {
 public:
  explicit TooFewItems(int label)
      : Error("TooFewItems", "class " + std::to_string(label) +
                                 " has fewer than 2 items") {}
};

class Divergence : public Error {
 public:
  explicit Divergence(int step)
      : Error("Divergence",
              "probe loss became non-finite at step " + std::to_string(step)) {}
};

class DimMismatch : public Error {
 public:
  DimMismatch(std::size_t expected, std::size_t actual)
      : Error("DimMismatch", "hidden dim " + std::to_string(actual) +
                                 " does not match probe dim " +
                                 std::to_string(expected)) {}
};

class InsufficientPool : public Error {
 public:
  InsufficientPool(std::size_t available, std::size_t k)
      : Error("InsufficientPool", "shot pool has " + std::to_string(available) +
                                      " eligible items, need " +
                                      std::to_string(k)) {}
};

// report

class EmptyReport : public Error {
 public:
  EmptyReport() : Error("EmptyReport", "nothing to report") {}
};

class UnknownMetric : public Error {
 public:
  explicit UnknownMetric(const std::string& name)
      : Error("UnknownMetric", "unknown metric '" + name + "'") {}
};

// cli-orchestrator

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& detail)
      : Error("ConfigError", detail) {}
};

}  // namespace veilbreak
