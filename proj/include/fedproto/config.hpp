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


#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedproto/aggregation.hpp"
#include "fedproto/data.hpp"
#include "fedproto/model.hpp"

namespace fedproto {

enum class Method { kFedProto, kFedAvg, kLocal };
std::string_view to_string(Method method);
Method parse_method(std::string_view text);

// Everything a run needs. Defaults follow the usual desk-scale setting:
// SGD lr 0.01 momentum 0.5, one local epoch, batch 8, lambda 1, 20 clients,
// 100 samples per class per client.
struct ExperimentConfig {
  Method method = Method::kFedProto;

  // Data source.
  std::string dataset = "synthetic";  // "synthetic" or "idx"
  std::string idx_images;
  std::string idx_labels;
  std::size_t num_classes = 10;
  std::size_t input_dim = 32;
  std::size_t samples_per_class = 300;
  double cluster_spread = 1.0;
  double centre_scale = 1.0;

  PartitionConfig partition;

  // Models. Client i runs mlp1 for a `mlp1_fraction` share of clients,
  // interleaved; the rest run the linear embedding.
  std::size_t embed_dim = 50;
  std::size_t hidden_width = 64;
  double mlp1_fraction = 1.0;

  // Local solver. batch_size 0 means full batch.
  double lr = 0.01;
  double momentum = 0.5;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 8;
  std::vector<double> lambdas{1.0};  // more than one value = sweep
  Metric metric = Metric::kSquaredL2;
  RegOperand reg_operand = RegOperand::kClassMean;

  std::size_t rounds = 50;
  AggregationMode aggregation = AggregationMode::kNormalizedMean;
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  // Outputs.
  std::string output_json;
  std::string output_csv;
  std::string output_bounds;
  std::string output_shards;
  bool record_timing = false;

  // Communication benchmark: 0 derives the count from the model shape.
  std::size_t model_params = 0;

  // Transport mode.
  std::string host = "127.0.0.1";
  std::uint16_t port = 5555;
  std::size_t expected_clients = 0;
  std::size_t round_timeout_ms = 30000;

  // Bound verification. Unset eta/lambda are chosen inside the admissible
  // region automatically.
  std::optional<double> theory_eta;
  std::optional<double> theory_lambda;
  std::size_t num_probes = 8;

  double lambda() const { return lambdas.front(); }
  ArchSpec arch_for_client(std::size_t client) const;
};

// Parses the flat `key = value` format ('#' starts a comment). Throws
// ConfigError naming the offending key.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);

// Semantic checks shared by every command.
void validate(const ExperimentConfig& config);

// Canonical key/value echo; parse_config(render_config(c)) reproduces c.
std::map<std::string, std::string> echo_config(const ExperimentConfig& config);
std::string render_config(const ExperimentConfig& config);

}  // namespace fedproto
