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

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/hash.hpp"
#include "veilbreak/parallel.hpp"

namespace veilbreak {

inline constexpr std::string_view kActvMagic = "ACTV0001";
inline constexpr int kNumClasses = 4;

/// Hidden states at the answer-slot token, layer-major [layer][item][dim].
struct ActivationSet {
  std::string model_id;
  std::vector<int> layer_indices;
  std::size_t hidden_dim = 0;
  std::vector<std::string> item_ids;
  std::vector<int> labels;
  std::string position = "final_prompt_token";
  std::string prompt_hash;
  std::vector<float> tensor;

  std::size_t num_layers() const noexcept { return layer_indices.size(); }
  std::size_t num_items() const noexcept { return item_ids.size(); }

  float at(std::size_t layer_pos, std::size_t item, std::size_t dim) const {
    return tensor[(layer_pos * num_items() + item) * hidden_dim + dim];
  }

  /// Position of `layer` in layer_indices.
  std::size_t layer_position(int layer) const {
    auto it = std::find(layer_indices.begin(), layer_indices.end(), layer);
    if (it == layer_indices.end()) {
      throw std::out_of_range("layer " + std::to_string(layer) + " not in dump");
    }
    return static_cast<std::size_t>(it - layer_indices.begin());
  }
};

namespace detail {

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

inline nlohmann::json activation_header(const ActivationSet& a) {
  return {{"model_id", a.model_id},
          {"layer_indices", a.layer_indices},
          {"hidden_dim", a.hidden_dim},
          {"item_ids", a.item_ids},
          {"labels", a.labels},
          {"position", a.position},
          {"prompt_hash", a.prompt_hash},
          {"dtype", "f32"},
          {"order", "layer-major [layer][item][dim]"}};
}

/// Encodes an ActivationSet as an ACTV0001 dump.
inline std::string serialize_activations(const ActivationSet& a) {
  const std::string header = activation_header(a).dump();
  std::string out(kActvMagic);
  detail::append_u32_le(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out.reserve(out.size() + a.tensor.size() * 4);
  for (float v : a.tensor) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    detail::append_u32_le(out, bits);
  }
  return out;
}

inline void save_activations(const ActivationSet& a, const std::string& path) {
  write_text_file(path, serialize_activations(a));
}

inline ActivationSet parse_activations(std::string_view bytes,
                                       const std::string& origin = "<memory>") {
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kActvMagic.size() + 4 ||
      bytes.substr(0, kActvMagic.size()) != kActvMagic) {
    throw BadMagic(origin);
  }
  const std::size_t header_len = detail::read_u32_le(data + kActvMagic.size());
  const std::size_t tensor_off = kActvMagic.size() + 4 + header_len;
  if (tensor_off > bytes.size()) {
    throw HeaderMismatch("header length " + std::to_string(header_len) +
                         " exceeds file size " + std::to_string(bytes.size()));
  }
  auto header = nlohmann::json::parse(
      bytes.substr(kActvMagic.size() + 4, header_len), nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    throw HeaderMismatch("header is not a JSON object");
  }

  ActivationSet a;
  try {
    a.model_id = header.at("model_id").get<std::string>();
    a.layer_indices = header.at("layer_indices").get<std::vector<int>>();
    a.hidden_dim = header.at("hidden_dim").get<std::size_t>();
    a.item_ids = header.at("item_ids").get<std::vector<std::string>>();
    a.labels = header.at("labels").get<std::vector<int>>();
    a.position = header.value("position", "");
    a.prompt_hash = header.value("prompt_hash", "");
    if (header.value("dtype", "f32") != "f32") {
      throw HeaderMismatch("dtype must be f32");
    }
  } catch (const nlohmann::json::exception& e) {
    throw HeaderMismatch(std::string("header field: ") + e.what());
  }
  if (a.hidden_dim == 0) throw HeaderMismatch("hidden_dim must be positive");
  if (a.labels.size() != a.item_ids.size()) {
    throw HeaderMismatch("labels and item_ids differ in length");
  }
  for (int label : a.labels) {
    if (label < 0 || label >= kNumClasses) {
      throw HeaderMismatch("label " + std::to_string(label) + " outside 0..3");
    }
  }
  std::unordered_set<std::string> ids(a.item_ids.begin(), a.item_ids.end());
  if (ids.size() != a.item_ids.size()) throw HeaderMismatch("duplicate item ids");

  const std::size_t count = a.num_layers() * a.num_items() * a.hidden_dim;
  const std::size_t actual = bytes.size() - tensor_off;
  if (actual != count * 4) throw HeaderMismatch(count * 4, actual);

  a.tensor.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::read_u32_le(data + tensor_off + 4 * i);
    float v;
    std::memcpy(&v, &bits, sizeof v);
    if (!std::isfinite(v)) throw NonFiniteValue(i);
    a.tensor[i] = v;
  }
  return a;
}

inline ActivationSet load_activations(const std::string& path) {
  return parse_activations(read_file_bytes(path), path);
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified train/test split. Each present class keeps
/// round(train_fraction * count) items for training, clamped so both sides
/// get at least one.
inline Split split_items(const ActivationSet& a, double train_fraction,
                         std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train_fraction must lie in (0, 1)");
  }
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    by_class[static_cast<std::size_t>(a.labels[i])].push_back(i);
  }
  std::mt19937_64 rng(seed);
  Split split;
  for (int c = 0; c < kNumClasses; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    if (members.empty()) continue;
    if (members.size() < 2) throw TooFewItems(c);
    for (std::size_t i = members.size() - 1; i > 0; --i) {
      std::swap(members[i], members[draw_below(rng, i + 1)]);
    }
    const auto wanted = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(members.size())));
    const std::size_t n_train = std::clamp<std::size_t>(wanted, 1, members.size() - 1);
    split.train.insert(split.train.end(), members.begin(), members.begin() + n_train);
    split.test.insert(split.test.end(), members.begin() + n_train, members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

struct ProbeHyper {
  double train_fraction = 0.8;
  double l2 = 1e-3;
  int steps = 500;
  double learning_rate = 0.1;  // cosine-decayed to 0 over `steps`
  std::uint64_t seed = 0;
};

struct TrainMeta {
  std::uint64_t seed = 0;
  double train_fraction = 0.0;
  int steps = 0;
  double l2 = 0.0;
  double learning_rate = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

using ProbeWeights = Eigen::Matrix<double, kNumClasses, Eigen::Dynamic>;
using ProbeBias = Eigen::Matrix<double, kNumClasses, 1>;

/// Linear softmax classifier over standardized hidden states.
struct Probe {
  int layer = 0;
  ProbeWeights weights;  // 4 x hidden_dim
  ProbeBias bias = ProbeBias::Zero();
  /// Train-split standardization; empty means identity.
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_scale;
  TrainMeta train_meta;
};

/// Rows of X are the items' activations at `layer_pos`.
inline Eigen::MatrixXd gather_features(const ActivationSet& a, std::size_t layer_pos,
                                       const std::vector<std::size_t>& items) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(items.size()),
                    static_cast<Eigen::Index>(a.hidden_dim));
  for (std::size_t r = 0; r < items.size(); ++r) {
    for (std::size_t d = 0; d < a.hidden_dim; ++d) {
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) =
          a.at(layer_pos, items[r], d);
    }
  }
  return x;
}

struct LossGrad {
  double loss = 0.0;
  ProbeWeights grad_weights;
  ProbeBias grad_bias;
};

/// Mean cross-entropy of softmax(W x + b) plus l2 * ||W||_F^2, with its
/// gradient. `x` is items x dim.
inline LossGrad probe_loss_and_grad(const Eigen::MatrixXd& x,
                                    const std::vector<int>& labels,
                                    const ProbeWeights& w, const ProbeBias& b,
                                    double l2) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd logits = (w * x.transpose()).colwise() + b;  // 4 x n
  Eigen::MatrixXd delta(kNumClasses, n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double peak = logits.col(i).maxCoeff();
    const Eigen::Vector4d shifted = logits.col(i).array() - peak;
    const double log_norm = std::log(shifted.array().exp().sum());
    const int y = labels[static_cast<std::size_t>(i)];
    loss -= shifted(y) - log_norm;
    delta.col(i) = (shifted.array() - log_norm).exp();
    delta(y, i) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  LossGrad out;
  out.loss = loss * inv_n + l2 * w.squaredNorm();
  out.grad_weights = delta * x * inv_n + 2.0 * l2 * w;
  out.grad_bias = delta.rowwise().sum() * inv_n;
  return out;
}

namespace detail {

inline void fit_standardization(const Eigen::MatrixXd& x, Probe& p) {
  p.feature_mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - p.feature_mean.transpose();
  Eigen::VectorXd var =
      centered.array().square().colwise().sum().transpose() /
      static_cast<double>(x.rows());
  p.feature_scale = var.array().sqrt();
  for (Eigen::Index d = 0; d < p.feature_scale.size(); ++d) {
    if (!(p.feature_scale(d) > 0.0)) p.feature_scale(d) = 1.0;
  }
}

inline Eigen::MatrixXd standardize(const Eigen::MatrixXd& x, const Probe& p) {
  if (p.feature_mean.size() == 0) return x;
  return (x.rowwise() - p.feature_mean.transpose()).array().rowwise() /
         p.feature_scale.transpose().array();
}

}  // namespace detail

/// Full-batch gradient descent from W = 0, b = 0 with a cosine-decayed step.
inline Probe train_probe(const ActivationSet& a, int layer,
                         const std::vector<std::size_t>& train_idx,
                         const ProbeHyper& hyper = {}) {
  if (train_idx.empty()) throw std::invalid_argument("empty training set");
  const std::size_t layer_pos = a.layer_position(layer);
  Probe p;
  p.layer = layer;
  p.weights = ProbeWeights::Zero(kNumClasses, static_cast<Eigen::Index>(a.hidden_dim));
  p.bias = ProbeBias::Zero();

  Eigen::MatrixXd raw = gather_features(a, layer_pos, train_idx);
  detail::fit_standardization(raw, p);
  const Eigen::MatrixXd x = detail::standardize(raw, p);
  std::vector<int> labels;
  labels.reserve(train_idx.size());
  for (auto i : train_idx) labels.push_back(a.labels[i]);

  p.train_meta = {hyper.seed, hyper.train_fraction, hyper.steps, hyper.l2,
                  hyper.learning_rate, 0.0, 0.0};
  LossGrad lg = probe_loss_and_grad(x, labels, p.weights, p.bias, hyper.l2);
  p.train_meta.initial_loss = lg.loss;
  for (int t = 0; t < hyper.steps; ++t) {
    if (!std::isfinite(lg.loss)) throw Divergence(t);
    const double lr = hyper.learning_rate * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * t / hyper.steps));
    p.weights -= lr * lg.grad_weights;
    p.bias -= lr * lg.grad_bias;
    lg = probe_loss_and_grad(x, labels, p.weights, p.bias, hyper.l2);
  }
  if (!std::isfinite(lg.loss)) throw Divergence(hyper.steps);
  p.train_meta.final_loss = lg.loss;
  return p;
}

/// Argmax class for one standardized feature row; ties go to the lowest index.
inline int probe_predict(const Probe& p, const Eigen::RowVectorXd& features) {
  const ProbeBias scores = p.weights * features.transpose() + p.bias;
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (scores(c) > scores(best)) best = c;
  }
  return best;
}

inline double eval_probe(const Probe& p, const ActivationSet& a,
                         const std::vector<std::size_t>& test_idx) {
  if (static_cast<std::size_t>(p.weights.cols()) != a.hidden_dim) {
    throw DimMismatch(static_cast<std::size_t>(p.weights.cols()), a.hidden_dim);
  }
  if (test_idx.empty()) throw std::invalid_argument("empty test set");
  const Eigen::MatrixXd x =
      detail::standardize(gather_features(a, a.layer_position(p.layer), test_idx), p);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test_idx.size(); ++r) {
    if (probe_predict(p, x.row(static_cast<Eigen::Index>(r))) == a.labels[test_idx[r]]) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test_idx.size());
}

struct CurvePoint {
  int layer = 0;
  double accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;

  bool operator==(const CurvePoint&) const = default;
};

/// Probe accuracy per layer, in layer order, over one shared split.
inline std::vector<CurvePoint> probe_curve(const ActivationSet& a,
                                           const ProbeHyper& hyper = {},
                                           std::size_t parallelism = 1) {
  if (a.layer_indices.empty()) throw std::invalid_argument("dump has no layers");
  const Split split = split_items(a, hyper.train_fraction, hyper.seed);
  std::vector<CurvePoint> curve(a.num_layers());
  parallel_for(a.num_layers(), parallelism, [&](std::size_t l) {
    const int layer = a.layer_indices[l];
    const Probe p = train_probe(a, layer, split.train, hyper);
    curve[l] = {layer, eval_probe(p, a, split.test), split.train.size(),
                split.test.size(), hyper.seed};
  });
  return curve;
}

namespace detail {

inline std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline constexpr std::string_view kCurveCsvHeader = "layer,accuracy,n_train,n_test,seed";

inline std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
  std::string out(kCurveCsvHeader);
  out += '\n';
  for (const auto& pt : curve) {
    out += std::to_string(pt.layer) + "," + detail::shortest(pt.accuracy) + "," +
           std::to_string(pt.n_train) + "," + std::to_string(pt.n_test) + "," +
           std::to_string(pt.seed) + "\n";
  }
  return out;
}

inline std::vector<CurvePoint> parse_curve_csv(std::string_view text) {
  std::vector<CurvePoint> curve;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != kCurveCsvHeader) throw MalformedRecord(1, "unexpected curve header");
      continue;
    }
    if (line.empty()) continue;
    CurvePoint pt;
    char comma;
    std::istringstream row(line);
    if (!(row >> pt.layer >> comma >> pt.accuracy >> comma >> pt.n_train >> comma >>
          pt.n_test >> comma >> pt.seed)) {
      throw MalformedRecord(line_no, "bad curve row");
    }
    curve.push_back(pt);
  }
  return curve;
}

}  // namespace veilbreak
