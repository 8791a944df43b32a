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

#include <string>

#include "fedproto/config.hpp"
#include "fedproto/error.hpp"

namespace fedproto {
namespace {

std::string error_of(const std::string& text) {
  try {
    validate(parse_config(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, DefaultsFollowTheUsualSetting) {
  const auto c = parse_config("method = fedproto\n");
  EXPECT_EQ(c.method, Method::kFedProto);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_EQ(c.momentum, 0.5);
  EXPECT_EQ(c.local_epochs, 1u);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.lambda(), 1.0);
  EXPECT_EQ(c.partition.clients, 20u);
  EXPECT_EQ(c.partition.k_avg, 100.0);
  EXPECT_EQ(c.embed_dim, 50u);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, ParsesKeysAndComments) {
  const auto c = parse_config(
      "# a comment\n"
      "method = local   # trailing\n"
      "\n"
      "clients=7\n"
      "lambda = 0, 0.1, 1\n"
      "metric = l1\n"
      "aggregation = contributor-scaled\n"
      "seed = 9\n");
  EXPECT_EQ(c.method, Method::kLocal);
  EXPECT_EQ(c.partition.clients, 7u);
  EXPECT_EQ(c.lambdas, (std::vector<double>{0.0, 0.1, 1.0}));
  EXPECT_EQ(c.metric, Metric::kL1);
  EXPECT_EQ(c.aggregation, AggregationMode::kContributorScaled);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.partition.seed, 9u);
}

TEST(Config, MissingMethodNamesKey) {
  EXPECT_NE(error_of("rounds = 3\n").find("'method'"), std::string::npos);
}

TEST(Config, UnknownKeyAndBadValues) {
  EXPECT_NE(error_of("method = fedproto\nfoo = 1\n").find("'foo'"), std::string::npos);
  EXPECT_NE(error_of("method = fedproto\nrounds = many\n").find("'rounds'"), std::string::npos);
  EXPECT_NE(error_of("method = sgd\n").find("'method'"), std::string::npos);
  EXPECT_NE(error_of("method = fedproto\njust words\n").find("line 2"), std::string::npos);
}

TEST(Config, ValidationRanges) {
  EXPECT_NE(error_of("method = fedproto\nembed_dim = 0\n").find("'embed_dim'"), std::string::npos);
  EXPECT_NE(error_of("method = fedproto\nn_avg = 11\n").find("'n_avg'"), std::string::npos);
  EXPECT_NE(error_of("method = fedproto\nmomentum = 1\n").find("'momentum'"), std::string::npos);
  EXPECT_NE(error_of("method = fedproto\nlambda = -1\n").find("'lambda'"), std::string::npos);
  EXPECT_NE(error_of("method = fedproto\ndataset = idx\n").find("'idx_images'"),
            std::string::npos);
}

TEST(Config, EchoReparsesToSameConfig) {
  auto c = parse_config(
      "method = fedavg\nlambda = 0.1,4\ncluster_spread = 0.3\nlr = 0.05\n"
      "theory_eta = 0.125\nmlp1_fraction = 0.5\noutput_json = out.json\n");
  const auto again = parse_config(render_config(c));
  EXPECT_EQ(echo_config(again), echo_config(c));
  EXPECT_EQ(again.lambdas, c.lambdas);
  EXPECT_EQ(again.theory_eta, c.theory_eta);
  EXPECT_EQ(echo_config(c).at("lr"), "0.05");
}

TEST(Config, ArchitectureMix) {
  ExperimentConfig c;
  c.mlp1_fraction = 0.5;
  int mlp = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    if (c.arch_for_client(i).kind == EmbedArch::kMlp1) ++mlp;
  }
  EXPECT_EQ(mlp, 10);
  EXPECT_NE(c.arch_for_client(0).kind, c.arch_for_client(1).kind);
  c.mlp1_fraction = 0.0;
  EXPECT_EQ(c.arch_for_client(3).kind, EmbedArch::kLinear);
}

}  // namespace
}  // namespace fedproto
