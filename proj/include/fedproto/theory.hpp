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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedproto/config.hpp"
#include "fedproto/model.hpp"
#include "fedproto/orchestrator.hpp"

namespace fedproto {

// Empirical stand-ins for the smoothness (L1), embedding Lipschitz (L2),
// gradient bound (G) and gradient variance (sigma2) constants.
struct TheoryConstants {
  double L1 = 0.0;
  double L2 = 0.0;
  double G = 0.0;
  double sigma2 = 0.0;
};

// ---------------------------------------------------------------------------
// Bound formulas

// Additive pieces of the one-round loss bound:
//   descent  = -(eta - L1 eta^2 / 2) * sum_e |grad L_e|^2
//   variance = L1 E eta^2 sigma2 / 2
//   drift    = lambda L2 eta E G      (prototype movement after aggregation)
struct BoundTerms {
  double descent = 0.0;
  double variance = 0.0;
  double drift = 0.0;
  double total() const { return descent + variance + drift; }
};

BoundTerms one_round_terms(const TheoryConstants& c,
                           std::span<const double> grad_sq_norms, double eta,
                           double lambda, std::size_t E);

// Upper bound on L_{(t+1)E+1/2} - L_{tE+1/2}. grad_sq_norms has E entries.
double one_round_bound(const TheoryConstants& c,
                       std::span<const double> grad_sq_norms, double eta,
                       double lambda, std::size_t E);

// Strict upper bound on the step size for each prefix sum S_e' of squared
// gradient norms:  2 (S - lambda L2 E G) / (L1 (S + E sigma2)), clipped at 0.
std::vector<double> eta_bound(std::span<const double> partial_grad_sq_sums,
                              double lambda, const TheoryConstants& c,
                              std::size_t E);

// Strict upper bound |grad L_{tE+1/2}|^2 / (L2 E G).
double lambda_bound(double first_grad_sq_norm, const TheoryConstants& c,
                    std::size_t E);

// Rounds needed for the averaged squared gradient norm to fall below eps:
//   2 Delta / (E eps (2 eta - L1 eta^2) - E eta (L1 eta sigma2 + 2 lambda L2 G)).
// Throws InputError naming the side condition that fails.
double rounds_for_epsilon(double delta, double eps, const TheoryConstants& c,
                          double eta, double lambda, std::size_t E);

// ---------------------------------------------------------------------------
// Constant estimation

using VectorFn = std::function<std::vector<double>(std::span<const double>)>;
using VjpFn = std::function<std::vector<double>(std::span<const double> params,
                                                std::span<const double> u)>;

// An objective seen only through callbacks. Parameters are a flat vector
// whose first `num_embedding_params` entries drive `embedding`.
struct ProbeObjective {
  std::size_t num_params = 0;
  std::size_t num_embedding_params = 0;
  VectorFn full_gradient;
  std::vector<VectorFn> batch_gradients;  // empty: deterministic gradients
  VectorFn embedding;                     // optional; enables L2
  VjpFn embedding_vjp;                    // optional; sharpens L2
};

// A ball in parameter space to probe. `partner`, if set, is a point known to
// be visited from `params` (the next iterate) and is always paired with it.
struct ProbeCentre {
  const ProbeObjective* objective = nullptr;
  std::vector<double> params;
  double radius = 0.0;
  std::optional<std::vector<double>> partner;
};

struct ProbeOptions {
  std::size_t num_probes = 8;
  std::uint64_t seed = 1;
  std::size_t power_iterations = 20;
  double gradient_safety = 1.5;
};

// L1 and L2 are the largest secant ratios over random pairs inside each ball
// (plus power-iteration curvature at each centre); G is gradient_safety times
// the largest gradient norm seen; sigma2 the largest mean squared deviation of
// batch gradients from the full gradient. Throws NumericError if a ball keeps
// yielding coincident pairs.
TheoryConstants estimate_constants(std::span<const ProbeCentre> centres,
                                   const ProbeOptions& options);

// Local objective of one client: the regularized loss on `train` against
// `global`, mini-batches of `batch_size` (0 = full batch). The embedding is
// the stacked per-class prototype vector.
ProbeObjective model_objective(const ModelState& model, std::vector<Example> train,
                               PrototypeSet global, RegularizerConfig reg,
                               std::size_t batch_size, std::uint64_t seed);

TheoryConstants estimate_constants(const ModelState& model, Batch train,
                                   const PrototypeSet& global,
                                   const RegularizerConfig& reg,
                                   std::size_t batch_size, double radius,
                                   const ProbeOptions& options);

// ---------------------------------------------------------------------------
// Run verification

struct ClientTrace {
  ClientId client = 0;
  std::vector<double> start_loss;  // L_{tE+1/2}, one per round
  std::vector<double> end_loss;    // L_{(t+1)E+1/2}
  std::vector<std::vector<double>> grad_sq_norms;  // E per round
};

// Rounds 1.. of a FedProto report, per client.
std::vector<ClientTrace> traces_from_report(const ExperimentReport& report);

struct RoundCheck {
  std::uint32_t round = 0;
  BoundTerms terms;
  double predicted = 0.0;
  double observed = 0.0;
  bool satisfied = false;  // observed <= predicted + 1e-9
  double eta_max = 0.0;    // min over e' of the step-size bound
  double lambda_max = 0.0;
};

struct ClientBoundReport {
  ClientId client = 0;
  TheoryConstants constants;
  std::vector<RoundCheck> rounds;
  std::size_t violations = 0;
  bool monotone = true;  // end_loss <= start_loss + 1e-10 every round
  double avg_grad_sq = 0.0;
  bool avg_below_eps = false;
};

struct BoundReport {
  double eta = 0.0;
  double lambda = 0.0;
  std::size_t E = 1;
  double eps = 0.0;
  std::vector<ClientBoundReport> clients;
  // eta and lambda strictly below every per-round bound of every client.
  bool step_sizes_inside = false;

  bool violations_possible() const { return !step_sizes_inside; }
  std::size_t violations() const;
  bool all_satisfied() const;
};

BoundReport verify_run(std::span<const ClientTrace> traces,
                       std::span<const TheoryConstants> constants, double eta,
                       double lambda, std::size_t E, double eps);

std::string bound_report_to_json(const BoundReport& report);

// ---------------------------------------------------------------------------
// Instrumented deterministic run

struct RoundCountCheck {
  ClientId client = 0;
  double delta = 0.0;
  double eps = 0.0;
  double T = 0.0;
  std::size_t rounds = 0;       // ceil(T)
  double empirical_avg = 0.0;   // over the first `rounds` rounds
  bool satisfied = false;
};

struct TheoryCheckResult {
  ExperimentConfig config;  // as run
  double eta = 0.0;
  double lambda = 0.0;
  std::size_t selection_passes = 0;
  std::vector<TheoryConstants> constants;
  BoundReport bounds;
  ExperimentReport report;
  std::vector<RoundCountCheck> round_counts;
  std::vector<std::string> notes;
};

// Runs FedProto with momentum 0, probes the constants along the visited
// trajectory and checks every round against the one-round bound. Unset
// theory_eta / theory_lambda are chosen strictly inside the admissible region.
// Throws InputError when theory_lambda exceeds the admissible lambda at the
// start of training.
TheoryCheckResult run_theory_check(const ExperimentConfig& config);

std::string theory_check_to_json(const TheoryCheckResult& result);

}  // namespace fedproto
