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

#include <gtest/gtest.h>

#include <random>

#include "support/fixtures.hpp"
#include "veilbreak/probe.hpp"

namespace vb = veilbreak;
using vb::testing::cluster_dump;

namespace {

TEST(Actv, RoundTripAndLayout) {
  const auto a = cluster_dump(3, 5, 1.0, 4, {2, 7});
  const std::string bytes = vb::serialize_activations(a);
  ASSERT_EQ(bytes.substr(0, 8), "ACTV0001");
  const auto back = vb::parse_activations(bytes);
  EXPECT_EQ(back.layer_indices, (std::vector<int>{2, 7}));
  EXPECT_EQ(back.item_ids, a.item_ids);
  EXPECT_EQ(back.labels, a.labels);
  EXPECT_EQ(back.tensor, a.tensor);
  // layer-major: second layer starts after items*dim floats
  EXPECT_EQ(back.at(1, 0, 0), a.tensor[12 * 5]);
  EXPECT_EQ(back.layer_position(7), 1u);
}

TEST(Actv, Rejections) {
  const auto a = cluster_dump(2, 3, 1.0, 4);
  std::string bytes = vb::serialize_activations(a);
  EXPECT_THROW(vb::parse_activations("ACTV0002" + bytes.substr(8)), vb::BadMagic);
  EXPECT_THROW(vb::parse_activations("ACT"), vb::BadMagic);
  EXPECT_THROW(vb::parse_activations(bytes.substr(0, bytes.size() - 4)), vb::HeaderMismatch);
  EXPECT_THROW(vb::parse_activations(bytes + "xxxx"), vb::HeaderMismatch);

  std::string bad = bytes;
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(bad.data() + bad.size() - 8, &inf, 4);
  try {
    vb::parse_activations(bad);
    FAIL();
  } catch (const vb::NonFiniteValue& e) {
    EXPECT_EQ(e.index(), a.tensor.size() - 2);
  }

  auto mislabeled = a;
  mislabeled.labels[0] = 4;
  EXPECT_THROW(vb::parse_activations(vb::serialize_activations(mislabeled)), vb::HeaderMismatch);
}

TEST(Split, StratifiedDeterministicDisjoint) {
  const auto a = cluster_dump(10, 2, 1.0, 1);
  const auto s = vb::split_items(a, 0.8, 3);
  EXPECT_EQ(s.train.size(), 32u);
  EXPECT_EQ(s.test.size(), 8u);
  std::array<int, 4> per_class{};
  for (auto i : s.test) ++per_class[static_cast<std::size_t>(a.labels[i])];
  EXPECT_EQ(per_class, (std::array<int, 4>{2, 2, 2, 2}));
  const auto again = vb::split_items(a, 0.8, 3);
  EXPECT_EQ(again.train, s.train);
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end());
  EXPECT_EQ(all.size(), 40u);
}

TEST(Split, TooFewItemsOnlyForPresentClasses) {
  auto a = cluster_dump(3, 2, 1.0, 1);
  a.labels = {0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 2};  // class 2 has one item, 3 none
  EXPECT_THROW(vb::split_items(a, 0.5, 0), vb::TooFewItems);
  a.labels.back() = 1;
  EXPECT_NO_THROW(vb::split_items(a, 0.5, 0));
}

TEST(Probe, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  const int n = 24, dim = 6;
  Eigen::MatrixXd x(n, dim);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < dim; ++d) x(i, d) = g(rng);
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % 4));
  vb::ProbeWeights w(4, dim);
  for (int c = 0; c < 4; ++c)
    for (int d = 0; d < dim; ++d) w(c, d) = 0.3 * g(rng);
  vb::ProbeBias b;
  for (int c = 0; c < 4; ++c) b(c) = 0.1 * g(rng);
  const double l2 = 0.05;

  const auto lg = vb::probe_loss_and_grad(x, labels, w, b, l2);
  const double h = 1e-6;
  auto rel = [](double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); };
  for (int c = 0; c < 4; ++c) {
    for (int d = 0; d < dim; ++d) {
      auto wp = w, wm = w;
      wp(c, d) += h;
      wm(c, d) -= h;
      const double num = (vb::probe_loss_and_grad(x, labels, wp, b, l2).loss -
                          vb::probe_loss_and_grad(x, labels, wm, b, l2).loss) / (2 * h);
      EXPECT_LT(rel(lg.grad_weights(c, d), num), 1e-4) << c << "," << d;
    }
    auto bp = b, bm = b;
    bp(c) += h;
    bm(c) -= h;
    const double num = (vb::probe_loss_and_grad(x, labels, w, bp, l2).loss -
                        vb::probe_loss_and_grad(x, labels, w, bm, l2).loss) / (2 * h);
    EXPECT_LT(rel(lg.grad_bias(c), num), 1e-4) << c;
  }
}

TEST(Probe, LossAtZeroIsLogFour) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(10, 3);
  std::vector<int> labels(10, 2);
  const auto lg = vb::probe_loss_and_grad(x, labels, vb::ProbeWeights::Zero(4, 3),
                                          vb::ProbeBias::Zero(), 1.0);
  EXPECT_NEAR(lg.loss, std::log(4.0), 1e-12);
}

TEST(Probe, SeparableClustersAreLearned) {
  const auto a = cluster_dump(100, 16, 3.0, 5);
  vb::ProbeHyper h;
  h.train_fraction = 0.5;
  const auto split = vb::split_items(a, h.train_fraction, h.seed);
  const auto p = vb::train_probe(a, 0, split.train, h);
  EXPECT_LT(p.train_meta.final_loss, p.train_meta.initial_loss);
  EXPECT_GE(vb::eval_probe(p, a, split.test), 0.99);
}

// Reference classifier: nearest class mean in raw feature space.
double nearest_centroid_accuracy(const vb::ActivationSet& a, const vb::Split& s) {
  std::array<Eigen::VectorXd, 4> mean;
  std::array<int, 4> count{};
  for (auto& m : mean) m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(a.hidden_dim));
  const auto x_train = vb::gather_features(a, 0, s.train);
  for (std::size_t r = 0; r < s.train.size(); ++r) {
    const auto c = static_cast<std::size_t>(a.labels[s.train[r]]);
    mean[c] += x_train.row(static_cast<Eigen::Index>(r)).transpose();
    ++count[c];
  }
  for (std::size_t c = 0; c < 4; ++c) mean[c] /= count[c];
  const auto x_test = vb::gather_features(a, 0, s.test);
  int correct = 0;
  for (std::size_t r = 0; r < s.test.size(); ++r) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < 4; ++c) {
      const double d = (x_test.row(static_cast<Eigen::Index>(r)).transpose() -
                        mean[static_cast<std::size_t>(c)]).squaredNorm();
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == a.labels[s.test[r]];
  }
  return static_cast<double>(correct) / static_cast<double>(s.test.size());
}

TEST(Probe, TracksNearestCentroidOnOverlappingClusters) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto a = cluster_dump(100, 8, 0.5, seed);
    vb::ProbeHyper h;
    h.train_fraction = 0.5;
    const auto split = vb::split_items(a, h.train_fraction, seed);
    const double probe = vb::eval_probe(vb::train_probe(a, 0, split.train, h), a, split.test);
    const double oracle = nearest_centroid_accuracy(a, split);
    EXPECT_GT(oracle, 0.4) << seed;
    EXPECT_NEAR(probe, oracle, 0.06) << seed;
  }
}

TEST(Probe, DimMismatch) {
  const auto a = cluster_dump(5, 4, 2.0, 1);
  const auto b = cluster_dump(5, 6, 2.0, 1);
  const auto split = vb::split_items(a, 0.6, 0);
  const auto p = vb::train_probe(a, 0, split.train);
  EXPECT_THROW(vb::eval_probe(p, b, split.test), vb::DimMismatch);
}

TEST(Probe, DivergenceIsReported) {
  const auto a = cluster_dump(5, 4, 2.0, 1);
  vb::ProbeHyper h;
  h.learning_rate = 1e308;
  const auto split = vb::split_items(a, 0.6, 0);
  EXPECT_THROW(vb::train_probe(a, 0, split.train, h), vb::Divergence);
}

TEST(Curve, OnePointPerLayerAndCsvRoundTrip) {
  const auto a = cluster_dump(20, 6, 1.0, 8, {0, 4, 8});
  vb::ProbeHyper h;
  h.steps = 50;
  const auto curve = vb::probe_curve(a, h, 3);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_EQ(curve[1].layer, 4);
  EXPECT_EQ(curve[0].n_train + curve[0].n_test, 80u);
  EXPECT_EQ(vb::probe_curve(a, h, 1), curve);  // parallelism does not matter
  const std::string csv = vb::curve_to_csv(curve);
  EXPECT_TRUE(csv.starts_with("layer,accuracy,n_train,n_test,seed\n"));
  EXPECT_EQ(vb::parse_curve_csv(csv), curve);
  EXPECT_THROW(vb::parse_curve_csv("layer,acc\n1,2\n"), vb::MalformedRecord);
}

}  // namespace
