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


#include "fedproto/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "fedproto/error.hpp"

namespace fedproto {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kFedProto:
      return "fedproto";
    case Method::kFedAvg:
      return "fedavg";
    case Method::kLocal:
      return "local";
  }
  return "?";
}

Method parse_method(std::string_view text) {
  if (text == "fedproto") return Method::kFedProto;
  if (text == "fedavg") return Method::kFedAvg;
  if (text == "local") return Method::kLocal;
  throw InputError("unknown method: " + std::string(text));
}

ArchSpec ExperimentConfig::arch_for_client(std::size_t client) const {
  ArchSpec arch;
  arch.input_dim = input_dim;
  arch.embed_dim = embed_dim;
  arch.hidden_width = hidden_width;
  // Interleaved assignment: client i is mlp1 when floor((i+1)f) > floor(i f).
  const double f = mlp1_fraction;
  const bool mlp1 = std::floor((static_cast<double>(client) + 1.0) * f + 1e-12) >
                    std::floor(static_cast<double>(client) * f + 1e-12);
  arch.kind = mlp1 ? EmbedArch::kMlp1 : EmbedArch::kLinear;
  return arch;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("key '" + key + "': expected a number, got '" +
                      std::string(v) + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

bool to_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" +
                    std::string(v) + "'");
}

template <typename Fn>
auto enum_value(const std::string& key, std::string_view v, Fn parse) {
  try {
    return parse(v);
  } catch (const InputError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Shortest representation that still round-trips.
  for (int precision = 1; precision <= 17; ++precision) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", precision, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&,
                                  std::string_view)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"method",
       [](auto& c, auto& k, auto v) { c.method = enum_value(k, v, parse_method); }},
      {"dataset",
       [](auto& c, auto& k, auto v) {
         if (v != "synthetic" && v != "idx") {
           throw ConfigError("key '" + k + "': expected synthetic or idx");
         }
         c.dataset = std::string(v);
       }},
      {"idx_images", [](auto& c, auto&, auto v) { c.idx_images = std::string(v); }},
      {"idx_labels", [](auto& c, auto&, auto v) { c.idx_labels = std::string(v); }},
      {"num_classes", [](auto& c, auto& k, auto v) { c.num_classes = to_uint(k, v); }},
      {"input_dim", [](auto& c, auto& k, auto v) { c.input_dim = to_uint(k, v); }},
      {"samples_per_class",
       [](auto& c, auto& k, auto v) { c.samples_per_class = to_uint(k, v); }},
      {"centre_scale",
       [](auto& c, auto& k, auto v) { c.centre_scale = to_double(k, v); }},
      {"cluster_spread",
       [](auto& c, auto& k, auto v) { c.cluster_spread = to_double(k, v); }},
      {"clients", [](auto& c, auto& k, auto v) { c.partition.clients = to_uint(k, v); }},
      {"n_avg", [](auto& c, auto& k, auto v) { c.partition.n_avg = to_double(k, v); }},
      {"k_avg", [](auto& c, auto& k, auto v) { c.partition.k_avg = to_double(k, v); }},
      {"stdev_n", [](auto& c, auto& k, auto v) { c.partition.stdev_n = to_double(k, v); }},
      {"stdev_k", [](auto& c, auto& k, auto v) { c.partition.stdev_k = to_double(k, v); }},
      {"test_fraction",
       [](auto& c, auto& k, auto v) { c.partition.test_fraction = to_double(k, v); }},
      {"disjoint_pools",
       [](auto& c, auto& k, auto v) { c.partition.disjoint_pools = to_bool(k, v); }},
      {"embed_dim", [](auto& c, auto& k, auto v) { c.embed_dim = to_uint(k, v); }},
      {"hidden_width", [](auto& c, auto& k, auto v) { c.hidden_width = to_uint(k, v); }},
      {"mlp1_fraction",
       [](auto& c, auto& k, auto v) { c.mlp1_fraction = to_double(k, v); }},
      {"lr", [](auto& c, auto& k, auto v) { c.lr = to_double(k, v); }},
      {"momentum", [](auto& c, auto& k, auto v) { c.momentum = to_double(k, v); }},
      {"local_epochs", [](auto& c, auto& k, auto v) { c.local_epochs = to_uint(k, v); }},
      {"batch_size", [](auto& c, auto& k, auto v) { c.batch_size = to_uint(k, v); }},
      {"lambda",
       [](auto& c, auto& k, auto v) {
         c.lambdas.clear();
         std::size_t start = 0;
         while (start <= v.size()) {
           const auto comma = v.find(',', start);
           const auto piece = trim(v.substr(
               start, comma == std::string_view::npos ? std::string_view::npos
                                                      : comma - start));
           c.lambdas.push_back(to_double(k, piece));
           if (comma == std::string_view::npos) break;
           start = comma + 1;
         }
       }},
      {"metric", [](auto& c, auto& k, auto v) { c.metric = enum_value(k, v, parse_metric); }},
      {"reg_operand",
       [](auto& c, auto& k, auto v) {
         c.reg_operand = enum_value(k, v, parse_reg_operand);
       }},
      {"rounds", [](auto& c, auto& k, auto v) { c.rounds = to_uint(k, v); }},
      {"aggregation",
       [](auto& c, auto& k, auto v) {
         c.aggregation = enum_value(k, v, parse_aggregation_mode);
       }},
      {"seed",
       [](auto& c, auto& k, auto v) {
         c.seed = to_uint(k, v);
         c.partition.seed = c.seed;
       }},
      {"threads", [](auto& c, auto& k, auto v) { c.threads = to_uint(k, v); }},
      {"output_json", [](auto& c, auto&, auto v) { c.output_json = std::string(v); }},
      {"output_csv", [](auto& c, auto&, auto v) { c.output_csv = std::string(v); }},
      {"output_bounds", [](auto& c, auto&, auto v) { c.output_bounds = std::string(v); }},
      {"output_shards", [](auto& c, auto&, auto v) { c.output_shards = std::string(v); }},
      {"record_timing",
       [](auto& c, auto& k, auto v) { c.record_timing = to_bool(k, v); }},
      {"model_params", [](auto& c, auto& k, auto v) { c.model_params = to_uint(k, v); }},
      {"host", [](auto& c, auto&, auto v) { c.host = std::string(v); }},
      {"port",
       [](auto& c, auto& k, auto v) {
         const auto p = to_uint(k, v);
         if (p > 65535) throw ConfigError("key 'port': out of range");
         c.port = static_cast<std::uint16_t>(p);
       }},
      {"expected_clients",
       [](auto& c, auto& k, auto v) { c.expected_clients = to_uint(k, v); }},
      {"round_timeout_ms",
       [](auto& c, auto& k, auto v) { c.round_timeout_ms = to_uint(k, v); }},
      {"theory_eta", [](auto& c, auto& k, auto v) { c.theory_eta = to_double(k, v); }},
      {"theory_lambda",
       [](auto& c, auto& k, auto v) { c.theory_lambda = to_double(k, v); }},
      {"num_probes", [](auto& c, auto& k, auto v) { c.num_probes = to_uint(k, v); }},
  };
  return table;
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config;
  bool saw_method = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(
        pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown key '" + key + "'");
    if (value.empty()) throw ConfigError("key '" + key + "' has no value");
    it->second(config, key, value);
    if (key == "method") saw_method = true;
  }
  if (!saw_method) throw ConfigError("missing required key 'method'");
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("key '" + key + "': " + why);
  };
  if (c.embed_dim == 0) fail("embed_dim", "must be positive");
  if (c.hidden_width == 0) fail("hidden_width", "must be positive");
  if (c.partition.clients == 0) fail("clients", "must be positive");
  if (c.dataset == "synthetic") {
    if (c.num_classes == 0) fail("num_classes", "must be positive");
    if (c.input_dim == 0) fail("input_dim", "must be positive");
    if (c.samples_per_class == 0) fail("samples_per_class", "must be positive");
    if (!(c.cluster_spread > 0.0)) fail("cluster_spread", "must be positive");
    if (!(c.centre_scale > 0.0)) fail("centre_scale", "must be positive");
    if (c.partition.n_avg < 1.0 ||
        c.partition.n_avg > static_cast<double>(c.num_classes)) {
      fail("n_avg", "must lie in [1, num_classes]");
    }
  } else {
    if (c.idx_images.empty()) fail("idx_images", "required when dataset = idx");
    if (c.idx_labels.empty()) fail("idx_labels", "required when dataset = idx");
    if (c.partition.n_avg < 1.0) fail("n_avg", "must be at least 1");
  }
  if (c.partition.k_avg < 1.0) fail("k_avg", "must be at least 1");
  if (c.partition.stdev_n < 0.0) fail("stdev_n", "must be non-negative");
  if (c.partition.stdev_k < 0.0) fail("stdev_k", "must be non-negative");
  if (c.partition.test_fraction <= 0.0 || c.partition.test_fraction >= 1.0) {
    fail("test_fraction", "must lie in (0, 1)");
  }
  if (c.mlp1_fraction < 0.0 || c.mlp1_fraction > 1.0) {
    fail("mlp1_fraction", "must lie in [0, 1]");
  }
  if (c.lr < 0.0) fail("lr", "must be non-negative");
  if (c.momentum < 0.0 || c.momentum >= 1.0) fail("momentum", "must lie in [0, 1)");
  if (c.local_epochs == 0) fail("local_epochs", "must be at least 1");
  if (c.lambdas.empty()) fail("lambda", "needs at least one value");
  for (double l : c.lambdas) {
    if (l < 0.0) fail("lambda", "must be non-negative");
  }
  if (c.threads == 0) fail("threads", "must be at least 1");
  if (c.num_probes < 2) fail("num_probes", "must be at least 2");
}

std::map<std::string, std::string> echo_config(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv;
  kv["method"] = std::string(to_string(c.method));
  kv["dataset"] = c.dataset;
  if (!c.idx_images.empty()) kv["idx_images"] = c.idx_images;
  if (!c.idx_labels.empty()) kv["idx_labels"] = c.idx_labels;
  kv["num_classes"] = std::to_string(c.num_classes);
  kv["input_dim"] = std::to_string(c.input_dim);
  kv["samples_per_class"] = std::to_string(c.samples_per_class);
  kv["cluster_spread"] = fmt_double(c.cluster_spread);
  kv["centre_scale"] = fmt_double(c.centre_scale);
  kv["clients"] = std::to_string(c.partition.clients);
  kv["n_avg"] = fmt_double(c.partition.n_avg);
  kv["k_avg"] = fmt_double(c.partition.k_avg);
  kv["stdev_n"] = fmt_double(c.partition.stdev_n);
  kv["stdev_k"] = fmt_double(c.partition.stdev_k);
  kv["test_fraction"] = fmt_double(c.partition.test_fraction);
  kv["disjoint_pools"] = c.partition.disjoint_pools ? "true" : "false";
  kv["embed_dim"] = std::to_string(c.embed_dim);
  kv["hidden_width"] = std::to_string(c.hidden_width);
  kv["mlp1_fraction"] = fmt_double(c.mlp1_fraction);
  kv["lr"] = fmt_double(c.lr);
  kv["momentum"] = fmt_double(c.momentum);
  kv["local_epochs"] = std::to_string(c.local_epochs);
  kv["batch_size"] = std::to_string(c.batch_size);
  std::string lambdas;
  for (std::size_t i = 0; i < c.lambdas.size(); ++i) {
    if (i) lambdas += ",";
    lambdas += fmt_double(c.lambdas[i]);
  }
  kv["lambda"] = lambdas;
  kv["metric"] = std::string(to_string(c.metric));
  kv["reg_operand"] = std::string(to_string(c.reg_operand));
  kv["rounds"] = std::to_string(c.rounds);
  kv["aggregation"] = std::string(to_string(c.aggregation));
  kv["seed"] = std::to_string(c.seed);
  kv["threads"] = std::to_string(c.threads);
  if (c.model_params) kv["model_params"] = std::to_string(c.model_params);
  kv["num_probes"] = std::to_string(c.num_probes);
  if (c.theory_eta) kv["theory_eta"] = fmt_double(*c.theory_eta);
  if (c.theory_lambda) kv["theory_lambda"] = fmt_double(*c.theory_lambda);
  return kv;
}

std::string render_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [k, v] : echo_config(config)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace fedproto
