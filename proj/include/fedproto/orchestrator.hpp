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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedproto/aggregation.hpp"
#include "fedproto/config.hpp"
#include "fedproto/data.hpp"
#include "fedproto/model.hpp"

namespace fedproto {

struct LocalSolver {
  double lr = 0.01;
  double momentum = 0.5;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;  // 0 = full batch
  RegularizerConfig reg;
};

// One client's private state between rounds.
struct ClientState {
  ClientId id = 0;
  ModelState model;
  Shard shard;
  std::shared_ptr<const Dataset> data;
  std::vector<Example> train;
  std::vector<Example> test;

  LocalSolver solver;
  std::vector<double> velocity;  // momentum buffer, same layout as params
  std::uint64_t seed = 0;        // drives per-epoch shuffling

  // Global prototypes most recently downloaded; the regularizer target.
  PrototypeSet reference_global;
  PrototypeSet last_local_prototypes;
};

ClientState make_client(ClientId id, ModelState model, Shard shard,
                        std::shared_ptr<const Dataset> data, LocalSolver solver,
                        std::uint64_t seed);

struct StepMetrics {
  LossParts loss;
  double grad_sq_norm = 0.0;
};

struct LocalUpdateResult {
  PrototypeSet prototypes;  // over the whole training split, after training
  std::vector<StepMetrics> steps;
  // Full-training-set loss right after the new global prototypes were
  // swapped in, before any parameter update.
  LossParts half_step;
};

// E epochs of minibatch SGD with momentum on the local objective. The
// momentum buffer is reset at the start of every call.
LocalUpdateResult local_update(ClientState& client, const PrototypeSet& global,
                               std::uint32_t round);

// Prototypes of the untrained model; the round-0 bootstrap upload.
PrototypeSet bootstrap_prototypes(const ClientState& client);

enum class EvalMode { kPrototype, kDecision };

// Fraction of the client's test split classified correctly.
double evaluate(const ClientState& client, const PrototypeSet& global,
                EvalMode mode);

struct ClientRoundRecord {
  ClientId client = 0;
  bool ok = true;
  std::string error;
  LossParts train;                    // mean over local steps
  std::optional<LossParts> half_step; // loss at the start of the round
  std::optional<LossParts> after;     // loss once the next globals arrived
  std::vector<double> grad_sq_norms;  // per local step
  double acc_prototype = 0.0;
  double acc_decision = 0.0;
};

// Per-client record pieces shared by the in-process loop and remote clients.
void fill_training(ClientRoundRecord& rec, const LocalUpdateResult& res);
void fill_evaluation(ClientRoundRecord& rec, const ClientState& client,
                     const PrototypeSet& global);

struct RoundRecord {
  std::uint32_t round = 0;
  std::vector<ClientRoundRecord> clients;
  std::uint64_t params_up = 0;
  std::uint64_t params_down = 0;
  double wall_ms = 0.0;
  PrototypeSet global_prototypes;  // after this round's aggregation

  std::uint64_t params_communicated() const { return params_up + params_down; }
};

struct ServerState {
  PrototypeSet global_prototypes;
  std::uint32_t round = 0;
  AggregationMode policy = AggregationMode::kNormalizedMean;
  std::vector<RoundRecord> history;
};

struct RoundOptions {
  std::size_t threads = 1;
};

// One FedProto communication round: dispatch, local updates, aggregation,
// evaluation. Failing clients are recorded and left out of the aggregate.
RoundRecord run_round(ServerState& server, std::vector<ClientState>& clients,
                      const RoundOptions& options);

// Round 0: every client uploads prototypes of its untrained model, with no
// regularizer, and the aggregate seeds the global set.
RoundRecord bootstrap_round(ServerState& server, std::vector<ClientState>& clients,
                            const RoundOptions& options);

// Data, shards and clients exactly as run_experiment builds them. Used by
// the socket client so both paths start from identical state.
struct ExperimentSetup {
  std::shared_ptr<const Dataset> data;
  std::vector<Shard> shards;
  std::vector<ClientState> clients;
};
ExperimentSetup build_experiment(const ExperimentConfig& config, double lambda);

struct ExperimentReport {
  std::map<std::string, std::string> config_echo;
  Method method = Method::kFedProto;
  double lambda = 0.0;
  std::vector<RoundRecord> rounds;  // rounds[0] is the untrained evaluation
  std::uint64_t total_params_up = 0;
  std::uint64_t total_params_down = 0;

  // Headline accuracy per client from the last round: prototype inference
  // for fedproto, decision head otherwise.
  std::vector<double> final_accuracies() const;
  double final_mean_accuracy() const;
  double final_std_accuracy() const;
};

ExperimentReport run_experiment(const ExperimentConfig& config);
// Same, with lambda overridden (one point of a sweep).
ExperimentReport run_experiment(const ExperimentConfig& config, double lambda);

std::string report_to_json(const ExperimentReport& report, bool include_timing);
// round, mean_acc, std_acc, mean_loss, params_comm
std::string report_to_csv(const ExperimentReport& report);

double headline_accuracy(Method method, const ClientRoundRecord& record);

// Mean regularizer value over clients, averaged across the last `window`
// rounds.
double converged_regularizer(const ExperimentReport& report, std::size_t window = 5);

struct SweepRow {
  double lambda = 0.0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  double reg_loss = 0.0;
};
SweepRow sweep_row(const ExperimentReport& report);

// Steady-state parameters moved per round, derived from the partition and
// model shapes. A nonzero config.model_params replaces the FedAvg model size.
struct CommRow {
  Method method = Method::kFedProto;
  std::uint64_t params_up = 0;
  std::uint64_t params_down = 0;
};
std::vector<CommRow> bench_comm(const ExperimentConfig& config);

// Linear 296 -> 70 embedding with a 10-way head: 21,500 parameters.
ArchSpec reference_model_arch();
inline constexpr std::size_t kReferenceModelClasses = 10;

}  // namespace fedproto
