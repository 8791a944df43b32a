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


#include "fedproto/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedproto/error.hpp"
#include "fedproto/wire.hpp"

namespace fedproto {
namespace {

// Runs fn(0..n-1) on up to `threads` workers. fn must not throw.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const std::size_t workers = std::min(threads, n);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::uint64_t init_seed(std::uint64_t seed, EmbedArch arch) {
  // Same seed for every client of one architecture.
  return seed * 0x9E3779B97F4A7C15ull + (arch == EmbedArch::kLinear ? 1 : 2);
}

void check_dispatch(const ClientState& client, const PrototypeSet& dispatched) {
  for (const auto& [id, _] : dispatched) {
    if (!std::binary_search(client.shard.class_space.begin(),
                            client.shard.class_space.end(), id)) {
      throw ProtocolError("dispatch of class " + std::to_string(id) +
                          " to client " + std::to_string(client.id) +
                          " outside its class space");
    }
  }
}

PrototypeSet dispatch_for(const ServerState& server, const ClientState& client) {
  PrototypeSet out =
      wire::quantize(server.global_prototypes.restricted_to(client.shard.class_space));
  check_dispatch(client, out);
  return out;
}

LossParts mean_of(const std::vector<StepMetrics>& steps) {
  LossParts m;
  if (steps.empty()) return m;
  for (const auto& s : steps) {
    m.supervised += s.loss.supervised;
    m.regularizer += s.loss.regularizer;
    m.total += s.loss.total;
  }
  const double n = static_cast<double>(steps.size());
  m.supervised /= n;
  m.regularizer /= n;
  m.total /= n;
  return m;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                   start)
      .count();
}

}  // namespace

void fill_training(ClientRoundRecord& rec, const LocalUpdateResult& res) {
  rec.train = mean_of(res.steps);
  rec.half_step = res.half_step;
  rec.grad_sq_norms.reserve(res.steps.size());
  for (const auto& s : res.steps) rec.grad_sq_norms.push_back(s.grad_sq_norm);
}

// Post-aggregation loss and accuracies of one client against `global`.
void fill_evaluation(ClientRoundRecord& rec, const ClientState& client,
                     const PrototypeSet& global) {
  if (!global.empty()) {
    rec.after = local_loss(client.model, client.train, global, client.solver.reg);
    rec.acc_prototype = evaluate(client, global, EvalMode::kPrototype);
  }
  rec.acc_decision = evaluate(client, global, EvalMode::kDecision);
}

ClientState make_client(ClientId id, ModelState model, Shard shard,
                        std::shared_ptr<const Dataset> data, LocalSolver solver,
                        std::uint64_t seed) {
  if (!(solver.lr >= 0.0)) throw InputError("learning rate must be non-negative");
  if (solver.epochs == 0) throw InputError("local epochs must be at least 1");
  ClientState c{.id = id,
                .model = std::move(model),
                .shard = std::move(shard),
                .data = std::move(data),
                .train = {},
                .test = {},
                .solver = solver,
                .velocity = {},
                .seed = seed,
                .reference_global = {},
                .last_local_prototypes = {}};
  c.train = gather(*c.data, c.shard.train);
  c.test = gather(*c.data, c.shard.test);
  if (c.train.empty()) throw InputError("client has no training samples");
  c.velocity.assign(c.model.num_params(), 0.0);
  return c;
}

LocalUpdateResult local_update(ClientState& client, const PrototypeSet& global,
                               std::uint32_t round) {
  const LocalSolver& solver = client.solver;
  client.reference_global = global;
  LocalUpdateResult result;
  result.half_step = local_loss(client.model, client.train, global, solver.reg);

  std::fill(client.velocity.begin(), client.velocity.end(), 0.0);
  const std::size_t n = client.train.size();
  const std::size_t batch_size = solver.batch_size == 0 ? n : solver.batch_size;
  std::vector<std::size_t> order(n);
  std::vector<Example> batch;
  batch.reserve(batch_size);
  auto params = client.model.params();

  for (std::size_t epoch = 0; epoch < solver.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{client.seed, std::uint64_t{client.id}, std::uint64_t{round},
                      static_cast<std::uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t start = 0; start < n; start += batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(n, start + batch_size); ++k) {
        batch.push_back(client.train[order[k]]);
      }
      auto lg = evaluate_loss_and_gradient(client.model, batch, global, solver.reg);
      result.steps.push_back(
          {lg.loss, lg.gradient.l2_norm * lg.gradient.l2_norm});
      const auto& g = lg.gradient.values;
      for (std::size_t k = 0; k < params.size(); ++k) {
        client.velocity[k] = solver.momentum * client.velocity[k] + g[k];
        params[k] -= solver.lr * client.velocity[k];
      }
    }
  }
  result.prototypes = compute_local_prototypes(client.model, client.train);
  client.last_local_prototypes = result.prototypes;
  return result;
}

PrototypeSet bootstrap_prototypes(const ClientState& client) {
  return compute_local_prototypes(client.model, client.train);
}

double evaluate(const ClientState& client, const PrototypeSet& global,
                EvalMode mode) {
  if (client.test.empty()) throw InputError("client has an empty test split");
  PrototypeSet protos;
  if (mode == EvalMode::kPrototype) {
    protos = global.restricted_to(client.shard.class_space);
    if (protos.empty()) throw InputError("no prototypes for the client's classes");
  }
  std::size_t correct = 0;
  for (const Example& ex : client.test) {
    const ClassId predicted = mode == EvalMode::kPrototype
                                  ? predict_by_prototype(client.model, ex.x, protos)
                                  : predict_by_decision(client.model, ex.x);
    if (predicted == ex.y) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(client.test.size());
}

RoundRecord bootstrap_round(ServerState& server, std::vector<ClientState>& clients,
                            const RoundOptions& options) {
  if (clients.empty()) throw InputError("no clients");
  const auto start = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = 0;
  rec.clients.resize(clients.size());
  std::vector<std::optional<PrototypeSet>> uploads(clients.size());
  parallel_for(clients.size(), options.threads, [&](std::size_t i) {
    auto& r = rec.clients[i];
    r.client = clients[i].id;
    try {
      uploads[i] = wire::quantize(bootstrap_prototypes(clients[i]));
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
  });

  std::vector<PrototypeUpload> ok;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (!uploads[i]) continue;
    rec.params_up += payload_params(*uploads[i]);
    ok.push_back({clients[i].id, std::move(*uploads[i])});
  }
  if (!ok.empty()) {
    const PrototypeSet agg = aggregate_prototypes(ok, server.policy);
    for (const auto& [id, p] : agg) server.global_prototypes.insert_or_assign(id, p.vector, p.count);
  }

  parallel_for(clients.size(), options.threads, [&](std::size_t i) {
    auto& r = rec.clients[i];
    if (!r.ok) return;
    try {
      fill_evaluation(r, clients[i], dispatch_for(server, clients[i]));
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
  });
  rec.global_prototypes = server.global_prototypes;
  rec.wall_ms = elapsed_ms(start);
  server.history.push_back(rec);
  return rec;
}

RoundRecord run_round(ServerState& server, std::vector<ClientState>& clients,
                      const RoundOptions& options) {
  if (clients.empty()) throw InputError("no clients");
  const auto start = std::chrono::steady_clock::now();
  const std::uint32_t round = server.round + 1;
  RoundRecord rec;
  rec.round = round;
  rec.clients.resize(clients.size());
  std::vector<std::optional<PrototypeSet>> uploads(clients.size());
  std::vector<std::size_t> down(clients.size(), 0);

  parallel_for(clients.size(), options.threads, [&](std::size_t i) {
    auto& r = rec.clients[i];
    r.client = clients[i].id;
    try {
      const PrototypeSet dispatched = dispatch_for(server, clients[i]);
      down[i] = payload_params(dispatched);
      const LocalUpdateResult res = local_update(clients[i], dispatched, round);
      fill_training(r, res);
      uploads[i] = wire::quantize(res.prototypes);
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
  });

  std::vector<PrototypeUpload> ok;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    rec.params_down += down[i];
    if (!uploads[i]) continue;
    rec.params_up += payload_params(*uploads[i]);
    ok.push_back({clients[i].id, std::move(*uploads[i])});
  }
  if (!ok.empty()) {
    const PrototypeSet agg = aggregate_prototypes(ok, server.policy);
    for (const auto& [id, p] : agg) server.global_prototypes.insert_or_assign(id, p.vector, p.count);
  }

  parallel_for(clients.size(), options.threads, [&](std::size_t i) {
    auto& r = rec.clients[i];
    if (!r.ok) return;
    try {
      fill_evaluation(r, clients[i], dispatch_for(server, clients[i]));
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
  });

  server.round = round;
  rec.global_prototypes = server.global_prototypes;
  rec.wall_ms = elapsed_ms(start);
  server.history.push_back(rec);
  return rec;
}

// ---------------------------------------------------------------------------
// Baselines

namespace {

RoundRecord local_round(std::uint32_t round, std::vector<ClientState>& clients,
                        const RoundOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = round;
  rec.clients.resize(clients.size());
  parallel_for(clients.size(), options.threads, [&](std::size_t i) {
    auto& r = rec.clients[i];
    r.client = clients[i].id;
    try {
      if (round > 0) fill_training(r, local_update(clients[i], {}, round));
      const PrototypeSet own = bootstrap_prototypes(clients[i]);
      r.after = local_loss(clients[i].model, clients[i].train, {}, clients[i].solver.reg);
      r.acc_prototype = evaluate(clients[i], own, EvalMode::kPrototype);
      r.acc_decision = evaluate(clients[i], own, EvalMode::kDecision);
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
  });
  rec.wall_ms = elapsed_ms(start);
  return rec;
}

RoundRecord fedavg_round(std::uint32_t round, std::vector<ClientState>& clients,
                         const RoundOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  RoundRecord rec;
  rec.round = round;
  rec.clients.resize(clients.size());
  if (round > 0) {
    parallel_for(clients.size(), options.threads, [&](std::size_t i) {
      auto& r = rec.clients[i];
      r.client = clients[i].id;
      try {
        fill_training(r, local_update(clients[i], {}, round));
      } catch (const Error& e) {
        r.ok = false;
        r.error = e.what();
      }
    });
    std::vector<ModelUpload> uploads;
    for (std::size_t i = 0; i < clients.size(); ++i) {
      if (!rec.clients[i].ok) continue;
      uploads.push_back({clients[i].id, &clients[i].model,
                         static_cast<double>(clients[i].train.size())});
      rec.params_up += payload_params(clients[i].model);
    }
    if (!uploads.empty()) {
      const ModelState global = average_parameters(uploads);
      for (auto& c : clients) {
        std::copy(global.params().begin(), global.params().end(),
                  c.model.params().begin());
        rec.params_down += payload_params(global);
      }
    }
  }
  parallel_for(clients.size(), options.threads, [&](std::size_t i) {
    auto& r = rec.clients[i];
    r.client = clients[i].id;
    if (!r.ok) return;
    try {
      const PrototypeSet own = bootstrap_prototypes(clients[i]);
      r.after = local_loss(clients[i].model, clients[i].train, {}, clients[i].solver.reg);
      r.acc_prototype = evaluate(clients[i], own, EvalMode::kPrototype);
      r.acc_decision = evaluate(clients[i], own, EvalMode::kDecision);
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
  });
  rec.wall_ms = elapsed_ms(start);
  return rec;
}

}  // namespace

// ---------------------------------------------------------------------------
// Experiment

ExperimentSetup build_experiment(const ExperimentConfig& config, double lambda) {
  validate(config);
  ExperimentSetup setup;
  if (config.dataset == "idx") {
    setup.data = std::make_shared<const Dataset>(
        load_idx(config.idx_images, config.idx_labels));
  } else {
    setup.data = std::make_shared<const Dataset>(
        generate_synthetic(config.num_classes, config.input_dim,
                           config.samples_per_class, config.cluster_spread,
                           config.seed, config.centre_scale));
  }
  ExperimentConfig effective = config;
  effective.input_dim = setup.data->input_dim;
  PartitionConfig pc = config.partition;
  pc.seed = config.seed;
  setup.shards = partition(*setup.data, pc);

  std::vector<ClassId> all_classes(setup.data->num_classes);
  std::iota(all_classes.begin(), all_classes.end(), ClassId{0});

  for (std::size_t i = 0; i < setup.shards.size(); ++i) {
    const ArchSpec arch = effective.arch_for_client(i);
    const bool shared_head = config.method == Method::kFedAvg;
    auto classes = shared_head ? all_classes : setup.shards[i].class_space;
    ModelState model =
        ModelState::initialized(arch, std::move(classes), init_seed(config.seed, arch.kind));
    LocalSolver solver;
    solver.lr = config.lr;
    solver.momentum = config.momentum;
    solver.epochs = config.local_epochs;
    solver.batch_size = config.batch_size;
    solver.reg.lambda = config.method == Method::kFedProto ? lambda : 0.0;
    solver.reg.metric = config.metric;
    solver.reg.operand = config.reg_operand;
    setup.clients.push_back(make_client(static_cast<ClientId>(i), std::move(model),
                                        setup.shards[i], setup.data, solver,
                                        config.seed));
  }
  return setup;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  return run_experiment(config, config.lambda());
}

ExperimentReport run_experiment(const ExperimentConfig& config, double lambda) {
  ExperimentSetup setup = build_experiment(config, lambda);
  auto& clients = setup.clients;

  ExperimentReport report;
  ExperimentConfig echo = config;
  echo.lambdas = {lambda};
  report.config_echo = echo_config(echo);
  report.method = config.method;
  report.lambda = lambda;
  const RoundOptions options{config.threads};

  switch (config.method) {
    case Method::kFedProto: {
      ServerState server;
      server.policy = config.aggregation;
      report.rounds.push_back(bootstrap_round(server, clients, options));
      for (std::size_t t = 0; t < config.rounds; ++t) {
        report.rounds.push_back(run_round(server, clients, options));
      }
      break;
    }
    case Method::kFedAvg:
      for (std::size_t t = 0; t <= config.rounds; ++t) {
        report.rounds.push_back(
            fedavg_round(static_cast<std::uint32_t>(t), clients, options));
      }
      break;
    case Method::kLocal:
      for (std::size_t t = 0; t <= config.rounds; ++t) {
        report.rounds.push_back(
            local_round(static_cast<std::uint32_t>(t), clients, options));
      }
      break;
  }
  for (const auto& r : report.rounds) {
    report.total_params_up += r.params_up;
    report.total_params_down += r.params_down;
  }
  return report;
}

double headline_accuracy(Method method, const ClientRoundRecord& record) {
  return method == Method::kFedProto ? record.acc_prototype : record.acc_decision;
}

std::vector<double> ExperimentReport::final_accuracies() const {
  std::vector<double> acc;
  if (rounds.empty()) return acc;
  for (const auto& c : rounds.back().clients) {
    if (c.ok) acc.push_back(headline_accuracy(method, c));
  }
  return acc;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) /
                      static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

struct RoundSummary {
  double mean_acc, std_acc, mean_loss;
};

RoundSummary summarize(Method method, const RoundRecord& r) {
  std::vector<double> acc;
  std::vector<double> loss;
  for (const auto& c : r.clients) {
    if (!c.ok) continue;
    acc.push_back(headline_accuracy(method, c));
    if (!c.grad_sq_norms.empty()) {
      loss.push_back(c.train.total);
    } else if (c.after) {
      loss.push_back(c.after->total);
    }
  }
  const auto [m, s] = mean_std(acc);
  return {m, s, mean_std(loss).first};
}

nlohmann::ordered_json parts_json(const LossParts& p) {
  return {{"loss", p.total}, {"supervised", p.supervised}, {"regularizer", p.regularizer}};
}

}  // namespace

double ExperimentReport::final_mean_accuracy() const {
  return mean_std(final_accuracies()).first;
}

double ExperimentReport::final_std_accuracy() const {
  return mean_std(final_accuracies()).second;
}

std::string report_to_json(const ExperimentReport& report, bool include_timing) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["config"] = report.config_echo;
  doc["method"] = std::string(to_string(report.method));
  doc["lambda"] = report.lambda;
  ordered_json rounds = ordered_json::array();
  for (const auto& r : report.rounds) {
    const RoundSummary s = summarize(report.method, r);
    ordered_json jr;
    jr["round"] = r.round;
    jr["params_up"] = r.params_up;
    jr["params_down"] = r.params_down;
    jr["params_communicated"] = r.params_communicated();
    jr["mean_acc"] = s.mean_acc;
    jr["std_acc"] = s.std_acc;
    jr["mean_loss"] = s.mean_loss;
    if (include_timing) jr["wall_ms"] = r.wall_ms;
    ordered_json clients = ordered_json::array();
    for (const auto& c : r.clients) {
      ordered_json jc;
      jc["client_id"] = c.client;
      jc["ok"] = c.ok;
      if (!c.ok) jc["error"] = c.error;
      jc["train"] = parts_json(c.train);
      if (c.half_step) jc["half_step"] = parts_json(*c.half_step);
      if (c.after) jc["after"] = parts_json(*c.after);
      jc["grad_sq_norms"] = c.grad_sq_norms;
      jc["acc_prototype"] = c.acc_prototype;
      jc["acc_decision"] = c.acc_decision;
      clients.push_back(std::move(jc));
    }
    jr["clients"] = std::move(clients);
    rounds.push_back(std::move(jr));
  }
  doc["rounds"] = std::move(rounds);
  doc["final"] = {{"accuracies", report.final_accuracies()},
                  {"mean_acc", report.final_mean_accuracy()},
                  {"std_acc", report.final_std_accuracy()}};
  doc["totals"] = {{"params_up", report.total_params_up},
                   {"params_down", report.total_params_down},
                   {"params_communicated",
                    report.total_params_up + report.total_params_down}};
  return doc.dump(2) + "\n";
}

std::string report_to_csv(const ExperimentReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "round,mean_acc,std_acc,mean_loss,params_comm\n";
  for (const auto& r : report.rounds) {
    const RoundSummary s = summarize(report.method, r);
    out << r.round << ',' << s.mean_acc << ',' << s.std_acc << ',' << s.mean_loss
        << ',' << r.params_communicated() << '\n';
  }
  return out.str();
}

double converged_regularizer(const ExperimentReport& report, std::size_t window) {
  if (report.rounds.empty() || window == 0) return 0.0;
  const std::size_t first = report.rounds.size() > window ? report.rounds.size() - window : 0;
  double sum = 0.0;
  std::size_t rounds = 0;
  for (std::size_t t = first; t < report.rounds.size(); ++t) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : report.rounds[t].clients) {
      if (c.ok && c.after) {
        s += c.after->regularizer;
        ++n;
      }
    }
    if (n == 0) continue;
    sum += s / static_cast<double>(n);
    ++rounds;
  }
  return rounds ? sum / static_cast<double>(rounds) : 0.0;
}

SweepRow sweep_row(const ExperimentReport& report) {
  return {report.lambda, report.final_mean_accuracy(), report.final_std_accuracy(),
          converged_regularizer(report)};
}

std::vector<CommRow> bench_comm(const ExperimentConfig& config) {
  std::vector<CommRow> rows;
  ExperimentConfig fp = config;
  fp.method = Method::kFedProto;
  const ExperimentSetup proto = build_experiment(fp, fp.lambda());
  CommRow p{Method::kFedProto, 0, 0};
  for (const auto& shard : proto.shards) {
    p.params_up += prototype_payload_params(shard.class_space.size(), config.embed_dim);
  }
  // Every uploaded class has a global value from round 1 on.
  p.params_down = p.params_up;
  rows.push_back(p);

  CommRow a{Method::kFedAvg, 0, 0};
  if (config.model_params != 0) {
    a.params_up = config.model_params * proto.shards.size();
  } else {
    ExperimentConfig fa = config;
    fa.method = Method::kFedAvg;
    for (const auto& c : build_experiment(fa, 0.0).clients) a.params_up += payload_params(c.model);
  }
  a.params_down = a.params_up;
  rows.push_back(a);
  rows.push_back({Method::kLocal, 0, 0});
  return rows;
}

ArchSpec reference_model_arch() { return ArchSpec{EmbedArch::kLinear, 296, 70, 0}; }

}  // namespace fedproto
