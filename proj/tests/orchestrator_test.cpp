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

#include <cmath>
#include <memory>
#include <numeric>
#include <set>

#include "fedproto/error.hpp"
#include "fedproto/orchestrator.hpp"
#include "fedproto/wire.hpp"

namespace fedproto {
namespace {

ExperimentConfig small_config(Method method = Method::kFedProto) {
  ExperimentConfig c;
  c.method = method;
  c.num_classes = 5;
  c.input_dim = 6;
  c.samples_per_class = 60;
  c.cluster_spread = 0.5;
  c.partition.clients = 5;
  c.partition.n_avg = 2;
  c.partition.stdev_n = 1;
  c.partition.k_avg = 12;
  c.embed_dim = 4;
  c.hidden_width = 8;
  c.rounds = 3;
  c.lr = 0.05;
  return c;
}

// Two classes, hand-built shard holding every sample of both.
struct Toy {
  std::shared_ptr<const Dataset> data;
  Shard shard;
};

Toy toy(std::vector<ClassId> classes, std::uint64_t seed = 3) {
  auto ds = std::make_shared<Dataset>(generate_synthetic(10, 3, 10, 0.3, seed));
  Toy t;
  t.shard.class_space = classes;
  for (std::size_t i = 0; i < ds->size(); ++i) {
    if (!std::binary_search(classes.begin(), classes.end(), ds->labels[i])) continue;
    (i % 5 == 0 ? t.shard.test : t.shard.train).push_back(i);
  }
  for (std::size_t i : t.shard.train) t.shard.train_counts[ds->labels[i]] += 1;
  t.data = std::move(ds);
  return t;
}

ClientState toy_client(ClientId id, const Toy& t, LocalSolver solver,
                       EmbedArch arch = EmbedArch::kMlp1, std::uint64_t init = 5) {
  ModelState m = ModelState::initialized(ArchSpec{arch, 3, 4, 6}, t.shard.class_space, init);
  Shard s = t.shard;
  s.client_id = id;
  return make_client(id, std::move(m), std::move(s), t.data, solver, 17);
}

PrototypeSet global_for(const ClientState& c) {
  PrototypeSet g(c.model.embed_dim());
  for (ClassId id : c.shard.class_space) g.insert(id, std::vector<double>(4, 0.1 * id), 1);
  return g;
}

TEST(LocalUpdate, FrozenOptimizer) {
  const Toy t = toy({1, 4});
  LocalSolver solver;
  solver.lr = 0.0;
  solver.batch_size = 0;
  solver.epochs = 3;
  auto c = toy_client(0, t, solver);
  const auto before = compute_local_prototypes(c.model, c.train);
  const auto res = local_update(c, global_for(c), 1);
  EXPECT_EQ(res.prototypes, before);
  ASSERT_EQ(res.steps.size(), 3u);
  for (const auto& s : res.steps) EXPECT_EQ(s.loss.total, res.steps[0].loss.total);
  EXPECT_EQ(res.half_step.total, res.steps[0].loss.total);
}

TEST(LocalUpdate, FullBatchStepIsPlainGradientDescent) {
  const Toy t = toy({0, 2, 7});
  LocalSolver solver;
  solver.lr = 0.3;
  solver.batch_size = 0;
  solver.reg.lambda = 0.0;
  auto c = toy_client(0, t, solver);
  const ModelState start = c.model;
  const auto g = local_loss_gradient(start, c.train, {}, solver.reg);
  local_update(c, {}, 1);
  for (std::size_t k = 0; k < start.num_params(); ++k) {
    EXPECT_EQ(c.model.params()[k], start.params()[k] - 0.3 * g.values[k]) << k;
  }
}

TEST(LocalUpdate, MomentumAccumulatesAcrossSteps) {
  const Toy t = toy({0, 2});
  LocalSolver solver;
  solver.lr = 0.1;
  solver.momentum = 0.5;
  solver.batch_size = 0;
  solver.epochs = 2;
  solver.reg.lambda = 0.0;
  auto c = toy_client(0, t, solver, EmbedArch::kLinear);
  ModelState ref = c.model;
  std::vector<double> v(ref.num_params(), 0.0);
  for (int step = 0; step < 2; ++step) {
    const auto g = local_loss_gradient(ref, c.train, {}, solver.reg);
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = 0.5 * v[k] + g.values[k];
      ref.params()[k] -= 0.1 * v[k];
    }
  }
  local_update(c, {}, 1);
  EXPECT_EQ(c.model, ref);
}

TEST(LocalUpdate, Deterministic) {
  const Toy t = toy({3, 5, 6});
  LocalSolver solver;
  solver.batch_size = 3;
  auto a = toy_client(0, t, solver);
  auto b = toy_client(0, t, solver);
  const auto ra = local_update(a, global_for(a), 4);
  const auto rb = local_update(b, global_for(b), 4);
  EXPECT_EQ(ra.prototypes, rb.prototypes);
  EXPECT_EQ(a.model, b.model);
  ASSERT_EQ(ra.steps.size(), rb.steps.size());
  for (std::size_t s = 0; s < ra.steps.size(); ++s) {
    EXPECT_EQ(ra.steps[s].loss.total, rb.steps[s].loss.total);
  }
}

TEST(LocalUpdate, RecordedLossDecomposes) {
  const Toy t = toy({1, 2});
  LocalSolver solver;
  solver.batch_size = 4;
  solver.reg.lambda = 0.7;
  auto c = toy_client(0, t, solver);
  for (const auto& s : local_update(c, global_for(c), 1).steps) {
    EXPECT_NEAR(s.loss.total, s.loss.supervised + 0.7 * s.loss.regularizer, 1e-9);
  }
}

TEST(RunRound, FrozenClientsAggregateInitialPrototypes) {
  const Toy t = toy({0, 1, 2});
  LocalSolver solver;
  solver.lr = 0.0;
  std::vector<ClientState> clients;
  for (ClientId id = 0; id < 3; ++id) clients.push_back(toy_client(id, t, solver));
  ServerState server;
  bootstrap_round(server, clients, {});
  const auto rec = run_round(server, clients, {});
  std::vector<PrototypeUpload> ups;
  for (const auto& c : clients) {
    ups.push_back({c.id, wire::quantize(compute_local_prototypes(c.model, c.train))});
  }
  EXPECT_EQ(rec.global_prototypes, aggregate_prototypes(ups, AggregationMode::kNormalizedMean));
  EXPECT_EQ(server.global_prototypes, rec.global_prototypes);
}

TEST(RunRound, SoleContributorAndCounter) {
  const Toy a = toy({1, 2});
  const Toy b = toy({2, 9});
  LocalSolver solver;
  std::vector<ClientState> clients{toy_client(0, a, solver), toy_client(1, b, solver)};
  ServerState server;
  bootstrap_round(server, clients, {});
  EXPECT_EQ(server.round, 0u);
  run_round(server, clients, {});
  EXPECT_EQ(server.round, 1u);
  const auto own = wire::quantize(compute_local_prototypes(clients[1].model, clients[1].train));
  EXPECT_EQ(server.global_prototypes.at(9), own.at(9));
  run_round(server, clients, {});
  EXPECT_EQ(server.round, 2u);
  EXPECT_EQ(server.history.size(), 3u);
}

TEST(RunRound, DispatchStaysInsideClassSpace) {
  const Toy a = toy({1, 2});
  const Toy b = toy({3, 4, 5});
  LocalSolver solver;
  std::vector<ClientState> clients{toy_client(0, a, solver), toy_client(1, b, solver)};
  ServerState server;
  bootstrap_round(server, clients, {});
  const auto rec = run_round(server, clients, {});
  for (const auto& c : clients) {
    EXPECT_EQ(c.reference_global.class_ids(), c.shard.class_space);
  }
  EXPECT_EQ(rec.params_down, (2u + 3u) * 4u);
  EXPECT_EQ(rec.params_up, (2u + 3u) * 4u);
}

TEST(RunRound, FailingClientIsExcluded) {
  const Toy a = toy({1, 2});
  const Toy b = toy({2, 3});
  LocalSolver solver;
  std::vector<ClientState> clients{toy_client(0, a, solver), toy_client(1, b, solver)};
  ServerState server;
  bootstrap_round(server, clients, {});
  for (double& p : clients[1].model.params()) p = 1e308;
  const auto rec = run_round(server, clients, {});
  EXPECT_TRUE(rec.clients[0].ok);
  EXPECT_FALSE(rec.clients[1].ok);
  EXPECT_FALSE(rec.clients[1].error.empty());
  EXPECT_EQ(rec.global_prototypes.at(2).count, clients[0].shard.train_counts.at(2));
  // Class 3 had no contributor this round and keeps its bootstrap value.
  EXPECT_EQ(rec.global_prototypes.at(3), server.history[0].global_prototypes.at(3));
}

TEST(RunRound, ThreadedMatchesSequential) {
  const auto cfg = small_config();
  auto a = build_experiment(cfg, 1.0);
  auto b = build_experiment(cfg, 1.0);
  ServerState sa, sb;
  bootstrap_round(sa, a.clients, {1});
  bootstrap_round(sb, b.clients, {4});
  for (int r = 0; r < 2; ++r) {
    const auto ra = run_round(sa, a.clients, {1});
    const auto rb = run_round(sb, b.clients, {4});
    EXPECT_EQ(ra.global_prototypes, rb.global_prototypes);
    for (std::size_t i = 0; i < ra.clients.size(); ++i) {
      EXPECT_EQ(ra.clients[i].train.total, rb.clients[i].train.total);
      EXPECT_EQ(ra.clients[i].acc_prototype, rb.clients[i].acc_prototype);
    }
  }
}

TEST(Evaluate, CollapsedEmbeddingPredictsTieBreakClass) {
  const Toy t = toy({2, 5, 8});
  LocalSolver solver;
  auto c = toy_client(0, t, solver, EmbedArch::kLinear);
  for (double& p : c.model.params()) p = 0.0;
  PrototypeSet g(4);
  for (ClassId id : {2, 5, 8}) g.insert(id, std::vector<double>(4, 1.0), 1);
  std::size_t twos = 0;
  for (const auto& ex : c.test) twos += ex.y == 2;
  const double freq = static_cast<double>(twos) / static_cast<double>(c.test.size());
  EXPECT_EQ(evaluate(c, g, EvalMode::kPrototype), freq);
  EXPECT_EQ(evaluate(c, g, EvalMode::kDecision), freq);
}

TEST(Evaluate, EmptyTestSplitIsInputError) {
  Toy t = toy({1, 2});
  t.shard.test.clear();
  auto c = toy_client(0, t, LocalSolver{});
  EXPECT_THROW(evaluate(c, global_for(c), EvalMode::kDecision), InputError);
}

TEST(Evaluate, UntrainedModelsSitAtChance) {
  const std::size_t n = 4;
  auto ds = std::make_shared<Dataset>(generate_synthetic(n, 3, 30, 1.0, 8));
  Shard s;
  s.class_space = {0, 1, 2, 3};
  for (std::size_t i = 0; i < ds->size(); ++i) {
    (i % 30 < 10 ? s.test : s.train).push_back(i);
  }
  std::vector<double> acc;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ModelState m = ModelState::initialized(ArchSpec{EmbedArch::kMlp1, 3, 4, 6}, s.class_space,
                                           seed + 1000);
    acc.push_back(evaluate(make_client(0, std::move(m), s, ds, {}, 0), {}, EvalMode::kDecision));
  }
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / acc.size();
  double var = 0.0;
  for (double a : acc) var += (a - mean) * (a - mean);
  const double sem = std::sqrt(var / (acc.size() - 1) / acc.size());
  EXPECT_NEAR(mean, 1.0 / n, 3.0 * sem);
}

TEST(Evaluate, SeparableBlobsReachPerfectAccuracy) {
  auto cfg = small_config();
  cfg.cluster_spread = 0.05;
  cfg.rounds = 15;
  cfg.lr = 0.05;
  const auto report = run_experiment(cfg);
  for (double a : report.final_accuracies()) EXPECT_NEAR(a, 1.0, 0.02);
}

TEST(RunExperiment, LocalCommunicatesNothing) {
  const auto report = run_experiment(small_config(Method::kLocal));
  for (const auto& r : report.rounds) EXPECT_EQ(r.params_communicated(), 0u);
  EXPECT_EQ(report.total_params_up + report.total_params_down, 0u);
}

TEST(RunExperiment, CommunicationAccounting) {
  const auto cfg = small_config();
  const auto setup = build_experiment(cfg, 1.0);
  std::uint64_t per_dir = 0;
  for (const auto& s : setup.shards) per_dir += s.class_space.size() * cfg.embed_dim;
  const auto report = run_experiment(cfg);
  EXPECT_EQ(report.rounds[0].params_up, per_dir);
  for (std::size_t r = 1; r < report.rounds.size(); ++r) {
    EXPECT_EQ(report.rounds[r].params_up, per_dir);
    EXPECT_EQ(report.rounds[r].params_down, per_dir);
  }
  const auto avg = run_experiment(small_config(Method::kFedAvg));
  const auto n_params = setup.clients[0].model.num_params();
  const auto head_params = parameter_count(cfg.arch_for_client(0), cfg.num_classes);
  EXPECT_GT(head_params, n_params);
  for (std::size_t r = 1; r < avg.rounds.size(); ++r) {
    EXPECT_EQ(avg.rounds[r].params_communicated(), 2 * cfg.partition.clients * head_params);
  }
}

TEST(RunExperiment, HeterogeneousPopulation) {
  auto cfg = small_config();
  cfg.mlp1_fraction = 0.5;
  const auto report = run_experiment(cfg);
  for (const auto& c : report.rounds.back().clients) EXPECT_TRUE(c.ok) << c.error;
  cfg.method = Method::kFedAvg;
  EXPECT_THROW(run_experiment(cfg), HeterogeneityError);
}

TEST(RunExperiment, ZeroRoundsGivesUntrainedEvaluationOnly) {
  auto cfg = small_config();
  cfg.rounds = 0;
  for (Method m : {Method::kFedProto, Method::kFedAvg, Method::kLocal}) {
    cfg.method = m;
    const auto report = run_experiment(cfg);
    ASSERT_EQ(report.rounds.size(), 1u);
    EXPECT_EQ(report.rounds[0].round, 0u);
  }
}

TEST(RunExperiment, LossIdentityEveryRound) {
  const auto cfg = small_config();
  const auto report = run_experiment(cfg, 0.5);
  for (const auto& r : report.rounds) {
    for (const auto& c : r.clients) {
      ASSERT_TRUE(c.ok);
      EXPECT_NEAR(c.train.total, c.train.supervised + 0.5 * c.train.regularizer, 1e-9);
      if (c.after) {
        EXPECT_NEAR(c.after->total, c.after->supervised + 0.5 * c.after->regularizer, 1e-9);
      }
    }
  }
}

TEST(RunExperiment, ReproducibleJson) {
  const auto cfg = small_config();
  EXPECT_EQ(report_to_json(run_experiment(cfg), false), report_to_json(run_experiment(cfg), false));
  const auto csv = report_to_csv(run_experiment(cfg));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,mean_acc,std_acc,mean_loss,params_comm");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 1 + 3);
}

TEST(RunExperiment, InvalidConfigRejectedUpFront) {
  auto cfg = small_config();
  cfg.embed_dim = 0;
  EXPECT_THROW(run_experiment(cfg), ConfigError);
}

TEST(BenchComm, PrototypeCountsMatchARealRound) {
  ExperimentConfig cfg;
  cfg.num_classes = 10;
  cfg.input_dim = 4;
  cfg.samples_per_class = 40;
  cfg.partition.clients = 20;
  cfg.partition.n_avg = 4;
  cfg.partition.stdev_n = 0;
  cfg.partition.k_avg = 10;
  cfg.embed_dim = 50;
  cfg.hidden_width = 4;
  cfg.rounds = 1;
  const auto rows = bench_comm(cfg);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].params_up, 4000u);
  EXPECT_EQ(rows[0].params_down, 4000u);
  EXPECT_EQ(rows[2].params_up + rows[2].params_down, 0u);
  const auto report = run_experiment(cfg);
  EXPECT_EQ(report.rounds[1].params_up, 4000u);
  EXPECT_EQ(report.rounds[1].params_down, 4000u);

  cfg.method = Method::kFedAvg;
  cfg.mlp1_fraction = 1.0;
  const auto fedavg = run_experiment(cfg);
  EXPECT_EQ(rows[1].params_up, fedavg.rounds[1].params_up);
}

TEST(BenchComm, ReferenceModelShape) {
  std::vector<ClassId> classes(kReferenceModelClasses);
  std::iota(classes.begin(), classes.end(), ClassId{0});
  const ModelState ref(reference_model_arch(), classes);
  EXPECT_EQ(payload_params(ref), 21500u);
  ExperimentConfig cfg;
  cfg.num_classes = 10;
  cfg.input_dim = 4;
  cfg.samples_per_class = 20;
  cfg.partition.clients = 20;
  cfg.partition.k_avg = 5;
  cfg.model_params = payload_params(ref);
  EXPECT_EQ(bench_comm(cfg)[1].params_up, 430000u);
}

}  // namespace
}  // namespace fedproto
