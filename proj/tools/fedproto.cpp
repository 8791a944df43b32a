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


// Command-line entry points. Exit codes: 0 ok, 2 validation, 3 runtime,
// 4 network.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedproto/config.hpp"
#include "fedproto/error.hpp"
#include "fedproto/orchestrator.hpp"
#include "fedproto/theory.hpp"
#include "fedproto/transport.hpp"
#include "json.hpp"

namespace {

using namespace fedproto;

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitNetwork = 4;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed for " + path);
}

// Config file plus `--set key=value` overrides; later keys win.
ExperimentConfig load(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text = read_file(path);
  for (const auto& o : overrides) {
    if (o.find('=') == std::string::npos) throw ConfigError("override '" + o + "' lacks '='");
    text += "\n" + o;
  }
  ExperimentConfig config = parse_config(text);
  validate(config);
  return config;
}

void require_fedproto(const ExperimentConfig& config) {
  if (config.method != Method::kFedProto) {
    throw ConfigError("key 'method': transport mode runs fedproto only");
  }
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

int cmd_run(const ExperimentConfig& config) {
  if (config.lambdas.size() == 1) {
    const ExperimentReport report = run_experiment(config);
    if (!config.output_json.empty()) {
      write_file(config.output_json, report_to_json(report, config.record_timing));
    }
    if (!config.output_csv.empty()) write_file(config.output_csv, report_to_csv(report));
    std::cout << "method " << to_string(report.method) << "  rounds " << config.rounds
              << "  accuracy " << fixed(report.final_mean_accuracy()) << " +- "
              << fixed(report.final_std_accuracy()) << "  params communicated "
              << report.total_params_up + report.total_params_down << '\n';
    return 0;
  }

  nlohmann::ordered_json doc;
  doc["config"] = echo_config(config);
  auto rows = nlohmann::ordered_json::array();
  auto reports = nlohmann::ordered_json::array();
  std::ostringstream csv;
  csv.precision(17);
  csv << "lambda,mean_acc,std_acc,reg_loss\n";
  std::cout << "lambda    accuracy          L_R\n";
  for (double lambda : config.lambdas) {
    const ExperimentReport report = run_experiment(config, lambda);
    const SweepRow row = sweep_row(report);
    rows.push_back({{"lambda", row.lambda},
                    {"mean_acc", row.mean_acc},
                    {"std_acc", row.std_acc},
                    {"reg_loss", row.reg_loss}});
    reports.push_back(nlohmann::ordered_json::parse(report_to_json(report, config.record_timing)));
    csv << row.lambda << ',' << row.mean_acc << ',' << row.std_acc << ',' << row.reg_loss << '\n';
    std::cout << std::left << std::setw(10) << row.lambda << fixed(row.mean_acc) << " +- "
              << fixed(row.std_acc) << "  " << fixed(row.reg_loss, 6) << '\n';
  }
  doc["sweep"] = std::move(rows);
  doc["reports"] = std::move(reports);
  if (!config.output_json.empty()) write_file(config.output_json, doc.dump(2) + "\n");
  if (!config.output_csv.empty()) write_file(config.output_csv, csv.str());
  return 0;
}

int cmd_bench_comm(ExperimentConfig config, bool reference_model) {
  if (reference_model) {
    std::vector<ClassId> classes(kReferenceModelClasses);
    std::iota(classes.begin(), classes.end(), ClassId{0});
    config.model_params = payload_params(ModelState(reference_model_arch(), classes));
  }
  const auto rows = bench_comm(config);
  nlohmann::ordered_json doc;
  doc["config"] = echo_config(config);
  auto out = nlohmann::ordered_json::array();
  std::cout << "method      up/round    down/round   total/round\n";
  for (const auto& r : rows) {
    out.push_back({{"method", std::string(to_string(r.method))},
                   {"params_up", r.params_up},
                   {"params_down", r.params_down},
                   {"params_communicated", r.params_up + r.params_down}});
    std::cout << std::left << std::setw(12) << to_string(r.method) << std::setw(12)
              << r.params_up << std::setw(13) << r.params_down << r.params_up + r.params_down
              << '\n';
  }
  doc["per_round"] = std::move(out);
  if (!config.output_json.empty()) write_file(config.output_json, doc.dump(2) + "\n");
  return 0;
}

int cmd_theory_check(const ExperimentConfig& config) {
  const TheoryCheckResult r = run_theory_check(config);
  if (!config.output_bounds.empty()) write_file(config.output_bounds, theory_check_to_json(r));
  std::cout << "eta " << r.eta << "  lambda " << r.lambda
            << "  inside bounds " << (r.bounds.step_sizes_inside ? "yes" : "no")
            << "  violations possible " << (r.bounds.violations_possible() ? "yes" : "no") << '\n'
            << "per-round violations " << r.bounds.violations() << "  all satisfied "
            << (r.bounds.all_satisfied() ? "yes" : "no") << '\n';
  for (const auto& rc : r.round_counts) {
    std::cout << "client " << rc.client << "  T " << rc.T << "  eps " << rc.eps
              << "  empirical " << rc.empirical_avg << (rc.satisfied ? "  ok" : "  FAIL") << '\n';
  }
  for (const auto& n : r.notes) std::cout << "note: " << n << '\n';
  return 0;
}

int cmd_serve(const ExperimentConfig& config, const std::string& port_file) {
  require_fedproto(config);
  if (config.expected_clients == 0) {
    throw ConfigError("key 'expected_clients': must be at least 1");
  }
  transport::ServerEndpoint server(transport::server_options(config));
  if (!port_file.empty()) write_file(port_file, std::to_string(server.port()) + "\n");
  std::cerr << "listening on " << config.host << ':' << server.port() << '\n';
  const transport::ServerRun run = server.run();
  if (!config.output_json.empty()) write_file(config.output_json, transport::server_run_to_json(run));
  std::size_t excluded = 0;
  for (const auto& r : run.rounds) {
    for (const auto& c : r.clients) excluded += !c.ok;
  }
  std::cout << "rounds " << run.rounds.size() - 1 << "  clients " << run.roster.size()
            << "  exclusions " << excluded << '\n';
  return 0;
}

int cmd_client(const ExperimentConfig& config, std::size_t id) {
  require_fedproto(config);
  ExperimentSetup setup = build_experiment(config, config.lambda());
  if (id >= setup.clients.size()) {
    throw ConfigError("client id " + std::to_string(id) + " out of range");
  }
  const auto records = transport::run_remote_client(config.host, config.port, setup.clients[id],
                                                    static_cast<std::uint32_t>(config.rounds));
  if (!config.output_json.empty()) {
    write_file(config.output_json, transport::client_records_to_json(records));
  }
  std::cout << "client " << id << "  final accuracy " << fixed(records.back().acc_prototype)
            << '\n';
  return 0;
}

int cmd_merge(const ExperimentConfig& config, const std::string& server_path,
              const std::vector<std::string>& client_paths) {
  const auto run = transport::server_run_from_json(read_file(server_path));
  std::vector<std::vector<ClientRoundRecord>> clients;
  for (const auto& p : client_paths) {
    clients.push_back(transport::client_records_from_json(read_file(p)));
  }
  const ExperimentReport report = transport::assemble_report(config, run, clients);
  if (!config.output_json.empty()) write_file(config.output_json, report_to_json(report, false));
  if (!config.output_csv.empty()) write_file(config.output_csv, report_to_csv(report));
  std::cout << "accuracy " << fixed(report.final_mean_accuracy()) << " +- "
            << fixed(report.final_std_accuracy()) << '\n';
  return 0;
}

int cmd_partition_dump(const ExperimentConfig& config) {
  const ExperimentSetup setup = build_experiment(config, config.lambda());
  const std::string json = shards_to_json(setup.shards);
  if (config.output_shards.empty()) {
    std::cout << json;
  } else {
    write_file(config.output_shards, json);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous federated prototype learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "Configuration file (key = value lines)")->required();
    sub->add_option("--set", overrides, "Override a key, e.g. --set rounds=10");
  };

  auto* run = app.add_subcommand("run", "Train and write the experiment report");
  common(run);

  bool reference_model = false;
  auto* bench = app.add_subcommand("bench-comm", "Per-round communicated parameters per method");
  common(bench);
  bench->add_flag("--reference-model", reference_model,
                  "Count FedAvg with the 21,500-parameter reference model");

  auto* theory = app.add_subcommand("theory-check", "Verify the convergence bounds on a run");
  common(theory);

  std::string port_file;
  auto* serve = app.add_subcommand("serve", "Run the aggregation server");
  common(serve);
  serve->add_option("--port-file", port_file, "Write the bound port to this file");

  std::size_t client_id = 0;
  auto* client = app.add_subcommand("client", "Run one participant against a server");
  common(client);
  client->add_option("--id", client_id, "Client index in the partition")->required();

  std::string server_path;
  std::vector<std::string> client_paths;
  auto* merge = app.add_subcommand("merge", "Join server and client artifacts into a report");
  common(merge);
  merge->add_option("--server", server_path, "Server artifact")->required();
  merge->add_option("--client", client_paths, "Client artifacts")->required();

  auto* dump = app.add_subcommand("partition-dump", "Write the client shards as JSON");
  common(dump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    const ExperimentConfig config = load(config_path, overrides);
    if (run->parsed()) return cmd_run(config);
    if (bench->parsed()) return cmd_bench_comm(config, reference_model);
    if (theory->parsed()) return cmd_theory_check(config);
    if (serve->parsed()) return cmd_serve(config, port_file);
    if (client->parsed()) return cmd_client(config, client_id);
    if (merge->parsed()) return cmd_merge(config, server_path, client_paths);
    if (dump->parsed()) return cmd_partition_dump(config);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NetworkError& e) {
    std::cerr << "network error: " << e.what() << '\n';
    return kExitNetwork;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
