// Copyright 2026 The fedproto Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================


#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fedproto/aggregation.hpp"
#include "fedproto/error.hpp"
#include "test_util.hpp"

namespace fedproto {
namespace {

using testing::brute_force;
using testing::random_instance;

PrototypeUpload upload(ClientId client, std::map<ClassId, std::pair<std::vector<double>, std::uint64_t>> entries) {
  PrototypeUpload u{client, PrototypeSet{}};
  for (auto& [c, e] : entries) u.prototypes.insert(c, e.first, e.second);
  return u;
}

TEST(AggregatePrototypes, HandWeightedMean) {
  const std::vector<PrototypeUpload> ups{upload(1, {{7, {{1.0, 0.0}, 10}}}),
                                         upload(2, {{7, {{0.0, 1.0}, 30}}})};
  const auto norm = aggregate_prototypes(ups, AggregationMode::kNormalizedMean);
  EXPECT_EQ(norm.at(7).vector, (std::vector<double>{0.25, 0.75}));
  EXPECT_EQ(norm.at(7).count, 40u);
  const auto scaled = aggregate_prototypes(ups, AggregationMode::kContributorScaled);
  EXPECT_EQ(scaled.at(7).vector, (std::vector<double>{0.125, 0.375}));
}

TEST(AggregatePrototypes, SingleClientUnchanged) {
  const std::vector<PrototypeUpload> ups{
      upload(4, {{0, {{0.1, -3.0}, 5}}, {9, {{2.5, 1e-3}, 2}}})};
  EXPECT_EQ(aggregate_prototypes(ups, AggregationMode::kNormalizedMean), ups[0].prototypes);
}

TEST(AggregatePrototypes, DisjointClassSets) {
  const std::vector<PrototypeUpload> ups{
      upload(0, {{2, {{1.0}, 3}}, {3, {{2.0}, 4}}}),
      upload(1, {{4, {{3.0}, 5}}, {5, {{4.0}, 6}}})};
  const auto out = aggregate_prototypes(ups, AggregationMode::kNormalizedMean);
  EXPECT_EQ(out.class_ids(), (std::vector<ClassId>{2, 3, 4, 5}));
  for (const auto& u : ups) {
    for (const auto& [c, p] : u.prototypes) EXPECT_EQ(out.at(c), p);
  }
}

TEST(AggregatePrototypes, Errors) {
  EXPECT_THROW(aggregate_prototypes({}, AggregationMode::kNormalizedMean), InputError);
  const std::vector<PrototypeUpload> mismatch{upload(0, {{1, {{1.0}, 1}}}),
                                              upload(1, {{1, {{1.0, 2.0}, 1}}})};
  EXPECT_THROW(aggregate_prototypes(mismatch, AggregationMode::kNormalizedMean), ProtocolError);
}

TEST(AggregatePrototypes, EqualContributionsReturnedExactly) {
  const std::vector<PrototypeUpload> ups{upload(0, {{1, {{0.1, 0.7}, 3}}}),
                                         upload(1, {{1, {{0.1, 0.7}, 9}}}),
                                         upload(2, {{1, {{0.1, 0.7}, 1}}})};
  const auto out = aggregate_prototypes(ups, AggregationMode::kNormalizedMean);
  EXPECT_NEAR(out.at(1).vector[0], 0.1, 1e-16);
  EXPECT_NEAR(out.at(1).vector[1], 0.7, 1e-16);
}

TEST(AggregatePrototypes, BruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto ups = random_instance(rng);
    for (bool scaled : {false, true}) {
      const auto want = brute_force(ups, scaled);
      const auto got = aggregate_prototypes(
          ups, scaled ? AggregationMode::kContributorScaled : AggregationMode::kNormalizedMean);
      ASSERT_EQ(got.size(), want.size());
      for (const auto& [c, v] : want) {
        for (std::size_t k = 0; k < v.size(); ++k) {
          EXPECT_NEAR(got.at(c).vector[k], v[k], 1e-12) << "trial " << trial;
        }
      }
    }
  }
}

TEST(AggregatePrototypes, ConvexHullAndWeightSums) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto ups = random_instance(rng);
    // Unit vectors measure the weights: with every contribution set to 1 the
    // output equals the sum of weights.
    for (auto& u : ups) {
      PrototypeSet ones(u.prototypes.dim());
      for (const auto& [c, p] : u.prototypes) {
        ones.insert(c, std::vector<double>(p.vector.size(), 1.0), p.count);
      }
      u.prototypes = ones;
    }
    std::map<ClassId, int> contributors;
    for (const auto& u : ups) {
      for (const auto& [c, p] : u.prototypes) contributors[c] += 1;
    }
    const auto norm = aggregate_prototypes(ups, AggregationMode::kNormalizedMean);
    const auto scaled = aggregate_prototypes(ups, AggregationMode::kContributorScaled);
    for (const auto& [c, n] : contributors) {
      EXPECT_NEAR(norm.at(c).vector[0], 1.0, 1e-12);
      EXPECT_NEAR(scaled.at(c).vector[0], 1.0 / n, 1e-12);
    }
  }
}

TEST(AggregatePrototypes, PermutationInvariant) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto ups = random_instance(rng);
    const auto base = aggregate_prototypes(ups, AggregationMode::kNormalizedMean);
    std::shuffle(ups.begin(), ups.end(), rng);
    EXPECT_EQ(aggregate_prototypes(ups, AggregationMode::kNormalizedMean), base);
  }
}

TEST(AggregationMode, Names) {
  EXPECT_EQ(to_string(AggregationMode::kNormalizedMean), "normalized-mean");
  EXPECT_EQ(parse_aggregation_mode("contributor-scaled"), AggregationMode::kContributorScaled);
  EXPECT_THROW(parse_aggregation_mode("median"), InputError);
}

ModelState scalar_model(double value) {
  // Smallest shape: linear 1 -> 1 embedding, one class.
  ModelState m(ArchSpec{EmbedArch::kLinear, 1, 1, 0}, {0});
  for (double& p : m.params()) p = value;
  return m;
}

TEST(AverageParameters, Midpoint) {
  const auto a = ModelState::initialized(ArchSpec{EmbedArch::kMlp1, 3, 2, 4}, {0, 1}, 1);
  const auto b = ModelState::initialized(ArchSpec{EmbedArch::kMlp1, 3, 2, 4}, {0, 1}, 2);
  const std::vector<ModelUpload> ups{{0, &a, 5.0}, {1, &b, 5.0}};
  const auto avg = average_parameters(ups);
  for (std::size_t k = 0; k < a.num_params(); ++k) {
    EXPECT_DOUBLE_EQ(avg.params()[k], 0.5 * (a.params()[k] + b.params()[k]));
  }
}

TEST(AverageParameters, HandWeighted) {
  const auto a = scalar_model(0.0);
  const auto b = scalar_model(4.0);
  const std::vector<ModelUpload> ups{{0, &a, 1.0}, {1, &b, 3.0}};
  const auto avg = average_parameters(ups);
  for (double p : avg.params()) EXPECT_DOUBLE_EQ(p, 3.0);
}

TEST(AverageParameters, HeterogeneityRejected) {
  const auto a = ModelState::initialized(ArchSpec{EmbedArch::kLinear, 3, 2, 0}, {0, 1}, 1);
  const auto b = ModelState::initialized(ArchSpec{EmbedArch::kMlp1, 3, 2, 4}, {0, 1}, 1);
  const std::vector<ModelUpload> ups{{0, &a, 1.0}, {1, &b, 1.0}};
  try {
    average_parameters(ups);
    FAIL() << "expected HeterogeneityError";
  } catch (const HeterogeneityError& e) {
    EXPECT_NE(std::string(e.what()).find("model heterogeneity unsupported by FedAvg"),
              std::string::npos);
  }
}

TEST(PayloadParams, PrototypeCounts) {
  std::size_t total = 0;
  for (int client = 0; client < 20; ++client) total += prototype_payload_params(4, 50);
  EXPECT_EQ(total, 4000u);
  PrototypeSet p(50);
  EXPECT_EQ(payload_params(p), 0u);
  p.insert(3, std::vector<double>(50, 0.0), 1);
  p.insert(8, std::vector<double>(50, 0.0), 1);
  EXPECT_EQ(payload_params(p), 100u);
}

TEST(PayloadParams, ModelCounts) {
  // 784 -> 25 linear embedding plus a 10-way head on 25 features.
  const ModelState m(ArchSpec{EmbedArch::kLinear, 784, 25, 0}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(payload_params(m), 784u * 25 + 25 + 10 * 25 + 10);
  EXPECT_EQ(20 * std::size_t{21500}, 430000u);
}

}  // namespace
}  // namespace fedproto
