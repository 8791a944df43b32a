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


#include "fedproto/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

#include <json.hpp>

#include "fedproto/error.hpp"
#include "fedproto/wire.hpp"

namespace fedproto {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw InputError(std::string(what) + " must be finite");
}

void check_constants(const TheoryConstants& c) {
  for (double v : {c.L1, c.L2, c.G, c.sigma2}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw InputError("theory constants must be finite and non-negative");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Formulas

BoundTerms one_round_terms(const TheoryConstants& c,
                           std::span<const double> grad_sq_norms, double eta,
                           double lambda, std::size_t E) {
  if (grad_sq_norms.size() != E) {
    throw InputError("one_round_bound: expected " + std::to_string(E) +
                     " squared gradient norms, got " +
                     std::to_string(grad_sq_norms.size()));
  }
  double sum = 0.0;
  for (double g : grad_sq_norms) sum += g;
  const double e = static_cast<double>(E);
  BoundTerms t;
  t.descent = -(eta - c.L1 * eta * eta / 2.0) * sum;
  t.variance = c.L1 * e * eta * eta * c.sigma2 / 2.0;
  t.drift = lambda * c.L2 * eta * e * c.G;
  return t;
}

double one_round_bound(const TheoryConstants& c, std::span<const double> grad_sq_norms,
                       double eta, double lambda, std::size_t E) {
  return one_round_terms(c, grad_sq_norms, eta, lambda, E).total();
}

std::vector<double> eta_bound(std::span<const double> partial_grad_sq_sums,
                              double lambda, const TheoryConstants& c,
                              std::size_t E) {
  if (!(c.L1 > 0.0)) throw InputError("eta_bound: L1 must be positive (degenerate model)");
  const double e = static_cast<double>(E);
  std::vector<double> out;
  out.reserve(partial_grad_sq_sums.size());
  for (double s : partial_grad_sq_sums) {
    if (s < 0.0) throw InputError("eta_bound: gradient sums must be non-negative");
    const double num = 2.0 * (s - lambda * c.L2 * e * c.G);
    const double den = c.L1 * (s + e * c.sigma2);
    out.push_back(num <= 0.0 || den <= 0.0 ? 0.0 : num / den);
  }
  return out;
}

double lambda_bound(double first_grad_sq_norm, const TheoryConstants& c, std::size_t E) {
  if (first_grad_sq_norm < 0.0) throw InputError("lambda_bound: negative gradient norm");
  const double den = c.L2 * static_cast<double>(E) * c.G;
  if (!(den > 0.0)) throw InputError("lambda_bound: L2 * E * G must be positive");
  return first_grad_sq_norm / den;
}

double rounds_for_epsilon(double delta, double eps, const TheoryConstants& c, double eta,
                          double lambda, std::size_t E) {
  check_constants(c);
  check_finite(delta, "delta");
  if (delta < 0.0) throw InputError("rounds_for_epsilon: delta must be non-negative");
  if (!(eps > 0.0)) throw InputError("rounds_for_epsilon: eps must be positive");
  if (!(eta > 0.0)) throw InputError("rounds_for_epsilon: eta must be positive");
  if (E == 0) throw InputError("rounds_for_epsilon: E must be at least 1");
  const double l2g = c.L2 * c.G;
  if (!(lambda < eps / l2g)) {
    throw InputError("rounds_for_epsilon: side condition lambda < eps / (L2 G) fails (lambda " +
                     std::to_string(lambda) + ", limit " + std::to_string(eps / l2g) + ")");
  }
  const double eta_limit = 2.0 * (eps - lambda * l2g) / (c.L1 * (eps + c.sigma2));
  if (!(eta < eta_limit)) {
    throw InputError(
        "rounds_for_epsilon: side condition eta < 2 (eps - lambda L2 G) / (L1 (eps + sigma2)) "
        "fails (eta " + std::to_string(eta) + ", limit " + std::to_string(eta_limit) + ")");
  }
  if (delta == 0.0) return 0.0;
  const double e = static_cast<double>(E);
  const double den = e * eps * (2.0 * eta - c.L1 * eta * eta) -
                     e * eta * (c.L1 * eta * c.sigma2 + 2.0 * lambda * l2g);
  if (!(den > 0.0)) throw InputError("rounds_for_epsilon: non-positive denominator");
  return 2.0 * delta / den;
}

// ---------------------------------------------------------------------------
// Estimation

namespace {

std::vector<double> unit_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  double s = 0.0;
  do {
    for (double& x : v) x = normal(rng);
    s = norm(v);
  } while (s == 0.0);
  for (double& x : v) x /= s;
  return v;
}

// Two random points in the ball of `radius` around `centre`, moving only the
// first `block` coordinates.
std::pair<std::vector<double>, std::vector<double>> draw_pair(
    std::mt19937_64& rng, const std::vector<double>& centre, std::size_t block,
    double radius) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double floor = 1e-12 * std::max(1.0, norm(centre));
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto a = centre;
    auto b = centre;
    const auto ua = unit_vector(rng, block);
    const auto ub = unit_vector(rng, block);
    const double ra = radius * unit(rng);
    const double rb = radius * unit(rng);
    for (std::size_t k = 0; k < block; ++k) {
      a[k] += ra * ua[k];
      b[k] += rb * ub[k];
    }
    if (distance(std::span<const double>(a).first(block),
                 std::span<const double>(b).first(block)) > floor) {
      return {std::move(a), std::move(b)};
    }
  }
  throw NumericError("probe pairs collapsed to a point after 100 resamples (radius " +
                     std::to_string(radius) + ")");
}

double gradient_variance(const ProbeObjective& obj, std::span<const double> at,
                         const std::vector<double>& full) {
  if (obj.batch_gradients.empty()) return 0.0;
  double total = 0.0;
  for (const auto& fn : obj.batch_gradients) {
    const auto g = fn(at);
    double s = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) s += (g[k] - full[k]) * (g[k] - full[k]);
    total += s;
  }
  return total / static_cast<double>(obj.batch_gradients.size());
}

// Largest Hessian eigenvalue magnitude by power iteration on finite-difference
// Hessian-vector products.
double hessian_norm(const ProbeObjective& obj, const std::vector<double>& c,
                    std::size_t iterations, std::mt19937_64& rng) {
  constexpr double h = 1e-4;
  auto v = unit_vector(rng, c.size());
  double lam = 0.0;
  auto plus = c;
  auto minus = c;
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t k = 0; k < c.size(); ++k) {
      plus[k] = c[k] + h * v[k];
      minus[k] = c[k] - h * v[k];
    }
    auto hv = obj.full_gradient(plus);
    const auto gm = obj.full_gradient(minus);
    for (std::size_t k = 0; k < hv.size(); ++k) hv[k] = (hv[k] - gm[k]) / (2.0 * h);
    lam = norm(hv);
    if (lam == 0.0) break;
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = hv[k] / lam;
  }
  return lam;
}

// Largest singular value of the embedding Jacobian by power iteration on
// J^T J, J v taken by central differences and J^T u from the callback.
double jacobian_norm(const ProbeObjective& obj, const std::vector<double>& c,
                     std::size_t iterations, std::mt19937_64& rng) {
  constexpr double h = 1e-4;
  const std::size_t m = obj.num_embedding_params;
  auto v = unit_vector(rng, m);
  double s = 0.0;
  auto plus = c;
  auto minus = c;
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t k = 0; k < m; ++k) {
      plus[k] = c[k] + h * v[k];
      minus[k] = c[k] - h * v[k];
    }
    auto jv = obj.embedding(plus);
    const auto em = obj.embedding(minus);
    for (std::size_t k = 0; k < jv.size(); ++k) jv[k] = (jv[k] - em[k]) / (2.0 * h);
    const auto w = obj.embedding_vjp(c, jv);
    s = norm(w);
    if (s == 0.0) break;
    for (std::size_t k = 0; k < m; ++k) v[k] = w[k] / s;
  }
  return std::sqrt(s);
}

}  // namespace

TheoryConstants estimate_constants(std::span<const ProbeCentre> centres,
                                   const ProbeOptions& options) {
  if (options.num_probes < 2) throw InputError("estimate_constants: num_probes must be >= 2");
  if (centres.empty()) throw InputError("estimate_constants: no probe centres");
  std::mt19937_64 rng(options.seed);
  TheoryConstants out;
  double gmax = 0.0;

  for (const ProbeCentre& centre : centres) {
    if (!centre.objective) throw InputError("estimate_constants: centre without objective");
    const ProbeObjective& obj = *centre.objective;
    const auto& c = centre.params;
    if (c.size() != obj.num_params) {
      throw InputError("estimate_constants: centre has " + std::to_string(c.size()) +
                       " parameters, objective expects " + std::to_string(obj.num_params));
    }
    if (!(centre.radius >= 0.0)) throw InputError("estimate_constants: negative radius");

    const auto gc = obj.full_gradient(c);
    gmax = std::max(gmax, norm(gc));
    out.sigma2 = std::max(out.sigma2, gradient_variance(obj, c, gc));

    for (std::size_t p = 0; p < options.num_probes; ++p) {
      const auto [a, b] = draw_pair(rng, c, c.size(), centre.radius);
      const auto ga = obj.full_gradient(a);
      const auto gb = obj.full_gradient(b);
      gmax = std::max({gmax, norm(ga), norm(gb)});
      out.L1 = std::max(out.L1, distance(ga, gb) / distance(a, b));
      out.sigma2 = std::max(out.sigma2, gradient_variance(obj, a, ga));
    }
    if (centre.partner && distance(c, *centre.partner) > 0.0) {
      const auto gp = obj.full_gradient(*centre.partner);
      gmax = std::max(gmax, norm(gp));
      out.L1 = std::max(out.L1, distance(gc, gp) / distance(c, *centre.partner));
    }
    if (options.power_iterations > 0) {
      out.L1 = std::max(out.L1, hessian_norm(obj, c, options.power_iterations, rng));
    }

    if (!obj.embedding) continue;
    const std::size_t m = obj.num_embedding_params;
    const auto ec = obj.embedding(c);
    for (std::size_t p = 0; p < options.num_probes; ++p) {
      const auto [a, b] = draw_pair(rng, c, m, centre.radius);
      const double d = distance(std::span<const double>(a).first(m),
                                std::span<const double>(b).first(m));
      out.L2 = std::max(out.L2, distance(obj.embedding(a), obj.embedding(b)) / d);
    }
    if (centre.partner) {
      const double d = distance(std::span<const double>(c).first(m),
                                std::span<const double>(*centre.partner).first(m));
      if (d > 0.0) out.L2 = std::max(out.L2, distance(ec, obj.embedding(*centre.partner)) / d);
    }
    if (obj.embedding_vjp && options.power_iterations > 0) {
      out.L2 = std::max(out.L2, jacobian_norm(obj, c, options.power_iterations, rng));
    }
  }
  out.G = options.gradient_safety * gmax;
  return out;
}

namespace {

struct ObjectiveContext {
  ModelState model;
  std::vector<Example> train;
  PrototypeSet global;
  RegularizerConfig reg;
  std::vector<std::vector<Example>> by_class;  // ascending class id

  ModelState at(std::span<const double> params) const {
    ModelState m = model;
    std::copy(params.begin(), params.end(), m.params().begin());
    return m;
  }
};

}  // namespace

ProbeObjective model_objective(const ModelState& model, std::vector<Example> train,
                               PrototypeSet global, RegularizerConfig reg,
                               std::size_t batch_size, std::uint64_t seed) {
  if (train.empty()) throw InputError("model_objective: empty training set");
  auto ctx = std::make_shared<ObjectiveContext>(
      ObjectiveContext{model, std::move(train), std::move(global), reg, {}});
  std::map<ClassId, std::vector<Example>> groups;
  for (const Example& ex : ctx->train) groups[ex.y].push_back(ex);
  for (auto& [_, g] : groups) ctx->by_class.push_back(std::move(g));

  ProbeObjective obj;
  obj.num_params = model.num_params();
  obj.num_embedding_params = model.num_embedding_params();
  obj.full_gradient = [ctx](std::span<const double> p) {
    return local_loss_gradient(ctx->at(p), ctx->train, ctx->global, ctx->reg).values;
  };

  const std::size_t n = ctx->train.size();
  if (batch_size == 0 || batch_size >= n) {
    obj.batch_gradients.push_back(obj.full_gradient);
  } else {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch_size) {
      auto batch = std::make_shared<std::vector<Example>>();
      for (std::size_t k = start; k < std::min(n, start + batch_size); ++k) {
        batch->push_back(ctx->train[order[k]]);
      }
      obj.batch_gradients.push_back([ctx, batch](std::span<const double> p) {
        return local_loss_gradient(ctx->at(p), *batch, ctx->global, ctx->reg).values;
      });
    }
  }

  obj.embedding = [ctx](std::span<const double> p) {
    const ModelState m = ctx->at(p);
    std::vector<double> stacked;
    for (const auto& group : ctx->by_class) {
      const auto e = mean_embedding(m, group);
      stacked.insert(stacked.end(), e.begin(), e.end());
    }
    return stacked;
  };
  obj.embedding_vjp = [ctx](std::span<const double> p, std::span<const double> u) {
    const ModelState m = ctx->at(p);
    const std::size_t d = m.embed_dim();
    std::vector<double> out(m.num_embedding_params(), 0.0);
    for (std::size_t j = 0; j < ctx->by_class.size(); ++j) {
      const auto part = mean_embedding_vjp(m, ctx->by_class[j], u.subspan(j * d, d));
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += part[k];
    }
    return out;
  };
  return obj;
}

TheoryConstants estimate_constants(const ModelState& model, Batch train,
                                   const PrototypeSet& global, const RegularizerConfig& reg,
                                   std::size_t batch_size, double radius,
                                   const ProbeOptions& options) {
  const ProbeObjective obj =
      model_objective(model, std::vector<Example>(train.begin(), train.end()), global, reg,
                      batch_size, options.seed);
  const ProbeCentre centre{&obj, std::vector<double>(model.params().begin(), model.params().end()),
                           radius, std::nullopt};
  return estimate_constants(std::span<const ProbeCentre>(&centre, 1), options);
}

// ---------------------------------------------------------------------------
// Verification

std::vector<ClientTrace> traces_from_report(const ExperimentReport& report) {
  std::vector<ClientTrace> traces;
  if (report.rounds.size() < 2) return traces;
  const std::size_t clients = report.rounds[1].clients.size();
  for (std::size_t i = 0; i < clients; ++i) {
    ClientTrace t;
    t.client = report.rounds[1].clients[i].client;
    bool complete = true;
    for (std::size_t r = 1; r < report.rounds.size(); ++r) {
      const auto& c = report.rounds[r].clients.at(i);
      if (!c.ok || !c.half_step || !c.after) {
        complete = false;
        break;
      }
      t.start_loss.push_back(c.half_step->total);
      t.end_loss.push_back(c.after->total);
      t.grad_sq_norms.push_back(c.grad_sq_norms);
    }
    if (complete) traces.push_back(std::move(t));
  }
  return traces;
}

std::size_t BoundReport::violations() const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.violations;
  return n;
}

bool BoundReport::all_satisfied() const {
  for (const auto& c : clients) {
    if (c.violations != 0 || !c.monotone) return false;
  }
  return true;
}

BoundReport verify_run(std::span<const ClientTrace> traces,
                       std::span<const TheoryConstants> constants, double eta,
                       double lambda, std::size_t E, double eps) {
  if (traces.size() != constants.size()) {
    throw InputError("verify_run: one set of constants per client trace is required");
  }
  BoundReport out;
  out.eta = eta;
  out.lambda = lambda;
  out.E = E;
  out.eps = eps;
  out.step_sizes_inside = true;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const ClientTrace& t = traces[i];
    const TheoryConstants& c = constants[i];
    ClientBoundReport rep;
    rep.client = t.client;
    rep.constants = c;
    double grad_total = 0.0;
    for (std::size_t r = 0; r < t.start_loss.size(); ++r) {
      const auto& g = t.grad_sq_norms.at(r);
      RoundCheck rc;
      rc.round = static_cast<std::uint32_t>(r + 1);
      rc.terms = one_round_terms(c, g, eta, lambda, E);
      rc.predicted = rc.terms.total();
      rc.observed = t.end_loss.at(r) - t.start_loss[r];
      rc.satisfied = rc.observed <= rc.predicted + 1e-9;
      std::vector<double> partial;
      double s = 0.0;
      for (double v : g) {
        s += v;
        partial.push_back(s);
      }
      rc.eta_max = kInf;
      if (c.L1 > 0.0) {
        for (double b : eta_bound(partial, lambda, c, E)) rc.eta_max = std::min(rc.eta_max, b);
      }
      rc.lambda_max = c.L2 * c.G > 0.0 ? lambda_bound(g.empty() ? 0.0 : g[0], c, E) : kInf;
      if (!(eta < rc.eta_max && lambda < rc.lambda_max)) out.step_sizes_inside = false;
      if (!rc.satisfied) ++rep.violations;
      if (t.end_loss[r] > t.start_loss[r] + 1e-10) rep.monotone = false;
      grad_total += s;
      rep.rounds.push_back(rc);
    }
    const double denom = static_cast<double>(t.start_loss.size() * E);
    rep.avg_grad_sq = denom > 0.0 ? grad_total / denom : 0.0;
    rep.avg_below_eps = rep.avg_grad_sq < eps;
    out.clients.push_back(std::move(rep));
  }
  return out;
}

namespace {

nlohmann::ordered_json constants_json(const TheoryConstants& c) {
  return {{"L1", c.L1}, {"L2", c.L2}, {"G", c.G}, {"sigma2", c.sigma2}};
}

nlohmann::ordered_json bound_json(const BoundReport& report) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["eta"] = report.eta;
  doc["lambda"] = report.lambda;
  doc["local_epochs"] = report.E;
  doc["eps"] = report.eps;
  doc["step_sizes_inside"] = report.step_sizes_inside;
  doc["violations_possible"] = report.violations_possible();
  doc["violations"] = report.violations();
  doc["all_satisfied"] = report.all_satisfied();
  ordered_json clients = ordered_json::array();
  for (const auto& c : report.clients) {
    ordered_json jc;
    jc["client_id"] = c.client;
    jc["constants"] = constants_json(c.constants);
    jc["violations"] = c.violations;
    jc["monotone"] = c.monotone;
    jc["avg_grad_sq"] = c.avg_grad_sq;
    jc["avg_below_eps"] = c.avg_below_eps;
    ordered_json rounds = ordered_json::array();
    for (const auto& r : c.rounds) {
      rounds.push_back({{"round", r.round},
                        {"predicted", r.predicted},
                        {"observed", r.observed},
                        {"satisfied", r.satisfied},
                        {"descent", r.terms.descent},
                        {"variance", r.terms.variance},
                        {"drift", r.terms.drift},
                        {"eta_max", r.eta_max},
                        {"lambda_max", r.lambda_max}});
    }
    jc["rounds"] = std::move(rounds);
    clients.push_back(std::move(jc));
  }
  doc["clients"] = std::move(clients);
  return doc;
}

}  // namespace

std::string bound_report_to_json(const BoundReport& report) {
  return bound_json(report).dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Instrumented run

namespace {

constexpr double kLambdaFraction = 0.1;
constexpr std::size_t kMaxSelectionPasses = 6;
constexpr std::size_t kMaxExtraRounds = 20000;

struct Trajectory {
  ExperimentSetup setup;
  ServerState server;
  ExperimentReport report;
  // Per client, per round: parameters before and after local training and
  // the prototypes the client trained against.
  std::vector<std::vector<std::vector<double>>> start, end;
  std::vector<std::vector<PrototypeSet>> reference;
};

std::vector<double> params_of(const ClientState& c) {
  return {c.model.params().begin(), c.model.params().end()};
}

ExperimentConfig run_config(const ExperimentConfig& base, double eta, double lambda) {
  ExperimentConfig c = base;
  c.method = Method::kFedProto;
  c.momentum = 0.0;
  c.lr = eta;
  c.lambdas = {lambda};
  return c;
}

Trajectory run_trajectory(const ExperimentConfig& base, double eta, double lambda) {
  const ExperimentConfig cfg = run_config(base, eta, lambda);
  Trajectory tr;
  tr.setup = build_experiment(cfg, lambda);
  auto& clients = tr.setup.clients;
  tr.server.policy = cfg.aggregation;
  tr.report.config_echo = echo_config(cfg);
  tr.report.method = Method::kFedProto;
  tr.report.lambda = lambda;
  const RoundOptions options{cfg.threads};
  tr.report.rounds.push_back(bootstrap_round(tr.server, clients, options));
  tr.start.resize(clients.size());
  tr.end.resize(clients.size());
  tr.reference.resize(clients.size());
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    for (std::size_t i = 0; i < clients.size(); ++i) tr.start[i].push_back(params_of(clients[i]));
    tr.report.rounds.push_back(run_round(tr.server, clients, options));
    for (std::size_t i = 0; i < clients.size(); ++i) {
      tr.end[i].push_back(params_of(clients[i]));
      tr.reference[i].push_back(clients[i].reference_global);
    }
  }
  for (const auto& r : tr.report.rounds) {
    for (const auto& c : r.clients) {
      if (!c.ok) throw NumericError("client " + std::to_string(c.client) + " failed in round " +
                                    std::to_string(r.round) + ": " + c.error);
    }
    tr.report.total_params_up += r.params_up;
    tr.report.total_params_down += r.params_down;
  }
  return tr;
}

// A single-class client has a constant supervised loss and a zero gradient
// at lambda 0: no step size is admissible for it.
bool checkable(const ClientState& client) { return client.shard.class_space.size() >= 2; }

// Only clients the bound can speak about.
std::vector<ClientTrace> checkable_traces(const Trajectory& tr) {
  std::vector<ClientTrace> out;
  for (auto& t : traces_from_report(tr.report)) {
    for (const auto& c : tr.setup.clients) {
      if (c.id == t.client && checkable(c)) out.push_back(std::move(t));
    }
  }
  return out;
}

// Every client shares the population-wide L2 and G: the drift term bounds how
// far the aggregate moves, which depends on all contributors.
void harmonize(std::vector<TheoryConstants>& cs) {
  double l2 = 0.0, g = 0.0;
  for (const auto& c : cs) {
    l2 = std::max(l2, c.L2);
    g = std::max(g, c.G);
  }
  for (auto& c : cs) {
    c.L2 = l2;
    c.G = g;
  }
}

std::vector<TheoryConstants> constants_along(const Trajectory& tr, const ExperimentConfig& cfg) {
  std::vector<TheoryConstants> out;
  ProbeOptions options;
  options.num_probes = cfg.num_probes;
  for (std::size_t i = 0; i < tr.setup.clients.size(); ++i) {
    const ClientState& client = tr.setup.clients[i];
    if (!checkable(client)) continue;
    options.seed = cfg.seed * 1000003ull + client.id;
    std::vector<ProbeObjective> objectives;
    objectives.reserve(tr.start[i].size());
    std::vector<ProbeCentre> centres;
    for (std::size_t t = 0; t < tr.start[i].size(); ++t) {
      objectives.push_back(model_objective(client.model, client.train, tr.reference[i][t],
                                           client.solver.reg, cfg.batch_size, options.seed + t));
      const double step = distance(tr.start[i][t], tr.end[i][t]);
      centres.push_back(ProbeCentre{&objectives.back(), tr.start[i][t],
                                    step > 0.0 ? step : 1e-6, tr.end[i][t]});
    }
    out.push_back(estimate_constants(centres, options));
  }
  harmonize(out);
  return out;
}

// Constants and squared gradient norms at the untrained state, against the
// bootstrap prototypes.
std::pair<std::vector<TheoryConstants>, std::vector<double>> constants_at_start(
    const ExperimentConfig& cfg, double lambda) {
  const ExperimentConfig run = run_config(cfg, cfg.lr, lambda);
  ExperimentSetup setup = build_experiment(run, lambda);
  ServerState server;
  server.policy = run.aggregation;
  bootstrap_round(server, setup.clients, {run.threads});
  std::vector<TheoryConstants> cs;
  std::vector<double> grads;
  ProbeOptions options;
  options.num_probes = run.num_probes;
  for (const auto& client : setup.clients) {
    if (!checkable(client)) continue;
    const PrototypeSet global =
        wire::quantize(server.global_prototypes.restricted_to(client.shard.class_space));
    options.seed = run.seed * 1000003ull + client.id;
    cs.push_back(estimate_constants(client.model, client.train, global, client.solver.reg,
                                    run.batch_size, 1e-2, options));
    const double g = local_loss_gradient(client.model, client.train, global, client.solver.reg)
                         .l2_norm;
    grads.push_back(g * g);
  }
  harmonize(cs);
  return {cs, grads};
}

struct Admissible {
  double eta = kInf;
  double lambda = kInf;
};

Admissible admissible(const std::vector<ClientTrace>& traces,
                      const std::vector<TheoryConstants>& cs, double lambda, std::size_t E) {
  const BoundReport rep = verify_run(traces, cs, 0.0, lambda, E, kInf);
  Admissible a;
  for (const auto& c : rep.clients) {
    for (const auto& r : c.rounds) {
      a.eta = std::min(a.eta, r.eta_max);
      a.lambda = std::min(a.lambda, r.lambda_max);
    }
  }
  return a;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

}  // namespace

TheoryCheckResult run_theory_check(const ExperimentConfig& config) {
  validate(config);
  TheoryCheckResult result;
  ExperimentConfig cfg = config;
  if (cfg.method != Method::kFedProto) {
    result.notes.push_back("method forced to fedproto");
  }
  if (cfg.momentum != 0.0) result.notes.push_back("momentum forced to 0");
  if (cfg.metric != Metric::kSquaredL2) result.notes.push_back("metric forced to sq-l2");
  cfg.method = Method::kFedProto;
  cfg.momentum = 0.0;
  cfg.metric = Metric::kSquaredL2;
  const std::size_t E = cfg.local_epochs;
  {
    const ExperimentSetup probe = build_experiment(run_config(cfg, cfg.lr, 0.0), 0.0);
    std::size_t checked = 0;
    for (const auto& c : probe.clients) {
      if (checkable(c)) {
        ++checked;
      } else {
        result.notes.push_back("client " + std::to_string(c.id) +
                               " holds a single class and is left out of the bound check");
      }
    }
    if (checked == 0) throw InputError("theory check needs a client with at least two classes");
  }
  const bool fixed_eta = config.theory_eta.has_value();
  const bool fixed_lambda = config.theory_lambda.has_value();

  auto [start_constants, start_grads] =
      constants_at_start(cfg, fixed_lambda ? *config.theory_lambda : 0.0);
  double lambda_start = kInf;
  double l1_max = 0.0;
  for (std::size_t i = 0; i < start_constants.size(); ++i) {
    lambda_start = std::min(lambda_start, lambda_bound(start_grads[i], start_constants[i], E));
    l1_max = std::max(l1_max, start_constants[i].L1);
  }
  if (fixed_lambda && !(*config.theory_lambda < lambda_start)) {
    throw InputError("lambda " + fmt(*config.theory_lambda) +
                     " is not below the admissible bound |grad L|^2 / (L2 E G) = " +
                     fmt(lambda_start) +
                     " at the start of training; the per-round descent guarantee does not "
                     "hold, refusing to run");
  }
  double eta = fixed_eta ? *config.theory_eta : 1.0 / l1_max;
  double lambda = fixed_lambda ? *config.theory_lambda : kLambdaFraction * lambda_start;

  Trajectory tr;
  std::vector<TheoryConstants> constants;
  std::vector<ClientTrace> traces;
  for (std::size_t pass = 1;; ++pass) {
    tr = run_trajectory(cfg, eta, lambda);
    constants = constants_along(tr, cfg);
    traces = checkable_traces(tr);
    result.selection_passes = pass;
    Admissible adm = admissible(traces, constants, lambda, E);
    const bool inside = eta < adm.eta && lambda < adm.lambda;
    if (inside || (fixed_eta && fixed_lambda) || pass == kMaxSelectionPasses) break;
    if (!fixed_lambda && !(lambda < adm.lambda)) {
      lambda = kLambdaFraction * adm.lambda;
      adm = admissible(traces, constants, lambda, E);
    }
    if (!fixed_eta) {
      double l1 = 0.0;
      for (const auto& c : constants) l1 = std::max(l1, c.L1);
      eta = std::min(1.0 / l1, 0.5 * adm.eta);
    }
    if ((fixed_eta && !(eta < adm.eta)) || (fixed_lambda && !(lambda < adm.lambda))) break;
  }
  result.eta = eta;
  result.lambda = lambda;
  result.config = run_config(cfg, eta, lambda);
  result.constants = constants;

  // eps for the per-round report: twice the largest per-client average.
  BoundReport first = verify_run(traces, constants, eta, lambda, E, kInf);
  double avg_max = 0.0;
  for (const auto& c : first.clients) avg_max = std::max(avg_max, c.avg_grad_sq);
  result.bounds = verify_run(traces, constants, eta, lambda, E, 2.0 * avg_max);
  if (result.bounds.violations_possible()) {
    result.notes.push_back("eta or lambda outside the admissible region in some round; "
                           "bound violations are possible");
  }

  // Round counts: eps_i = 2 x client i's averaged squared gradient norm,
  // Delta_i = its first half-step loss (the loss is bounded below by 0).
  std::vector<std::vector<double>> per_round(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (const auto& g : traces[i].grad_sq_norms) {
      double s = 0.0;
      for (double v : g) s += v;
      per_round[i].push_back(s);
    }
  }
  std::size_t needed = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    RoundCountCheck rc;
    rc.client = traces[i].client;
    rc.delta = traces[i].start_loss.empty() ? 0.0 : traces[i].start_loss[0];
    rc.eps = 2.0 * first.clients[i].avg_grad_sq;
    try {
      rc.T = rounds_for_epsilon(rc.delta, rc.eps, constants[i], eta, lambda, E);
      rc.rounds = static_cast<std::size_t>(std::ceil(rc.T));
      needed = std::max(needed, rc.rounds);
    } catch (const InputError& e) {
      rc.T = kInf;
      result.notes.push_back("client " + std::to_string(rc.client) + ": " + e.what());
    }
    result.round_counts.push_back(rc);
  }
  const std::size_t have = per_round.empty() ? 0 : per_round[0].size();
  if (needed > have) {
    const std::size_t extra = std::min(needed - have, kMaxExtraRounds);
    for (std::size_t t = 0; t < extra; ++t) {
      const RoundRecord rec = run_round(tr.server, tr.setup.clients, {cfg.threads});
      for (std::size_t i = 0, k = 0; i < rec.clients.size() && k < traces.size(); ++i) {
        if (rec.clients[i].client != traces[k].client) continue;
        double s = 0.0;
        for (double v : rec.clients[i].grad_sq_norms) s += v;
        per_round[k++].push_back(s);
      }
    }
  }
  for (std::size_t i = 0; i < result.round_counts.size(); ++i) {
    RoundCountCheck& rc = result.round_counts[i];
    if (!std::isfinite(rc.T)) continue;
    if (rc.rounds > per_round[i].size()) {
      result.notes.push_back("client " + std::to_string(rc.client) + ": " +
                             std::to_string(rc.rounds) + " rounds exceed the extension cap");
      continue;
    }
    double s = 0.0;
    for (std::size_t t = 0; t < rc.rounds; ++t) s += per_round[i][t];
    rc.empirical_avg = rc.rounds == 0 ? 0.0 : s / static_cast<double>(rc.rounds * E);
    rc.satisfied = rc.empirical_avg < rc.eps;
  }
  result.report = std::move(tr.report);
  return result;
}

std::string theory_check_to_json(const TheoryCheckResult& result) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["config"] = echo_config(result.config);
  doc["eta"] = result.eta;
  doc["lambda"] = result.lambda;
  doc["selection_passes"] = result.selection_passes;
  doc["bounds"] = bound_json(result.bounds);
  ordered_json counts = ordered_json::array();
  for (const auto& rc : result.round_counts) {
    counts.push_back({{"client_id", rc.client},
                      {"delta", rc.delta},
                      {"eps", rc.eps},
                      {"T", rc.T},
                      {"rounds", rc.rounds},
                      {"empirical_avg", rc.empirical_avg},
                      {"satisfied", rc.satisfied}});
  }
  doc["round_counts"] = std::move(counts);
  doc["notes"] = result.notes;
  return doc.dump(2) + "\n";
}

}  // namespace fedproto
