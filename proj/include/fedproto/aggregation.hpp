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
#include <span>
#include <string_view>
#include <vector>

#include "fedproto/model.hpp"
#include "fedproto/prototype.hpp"

namespace fedproto {

enum class AggregationMode {
  // sum_i (|D_ij| / N_j) C_ij: a convex combination of the contributions.
  kNormalizedMean,
  // The same weighted sum further divided by the contributor count |N_j|,
  // so weights sum to 1/|N_j|.
  kContributorScaled,
};

std::string_view to_string(AggregationMode mode);
AggregationMode parse_aggregation_mode(std::string_view text);

struct PrototypeUpload {
  ClientId client = 0;
  PrototypeSet prototypes;
};

// Server-side fusion of per-client prototypes, class by class. Each output
// entry's count is N_j, the total sample count behind that class. Uploads
// are consumed in ascending client id regardless of input order.
PrototypeSet aggregate_prototypes(std::span<const PrototypeUpload> uploads,
                                  AggregationMode mode);

struct ModelUpload {
  ClientId client = 0;
  const ModelState* model = nullptr;
  double weight = 0.0;  // |D_i|
};

// FedAvg: parameter-wise weighted mean with weights |D_i| / N. Throws
// HeterogeneityError unless every model shares architecture and shapes.
ModelState average_parameters(std::span<const ModelUpload> uploads);

// Parameter counts per message, in scalars (framing excluded).
std::size_t payload_params(const PrototypeSet& prototypes);
std::size_t payload_params(const ModelState& model);
std::size_t prototype_payload_params(std::size_t num_classes,
                                     std::size_t embed_dim);

}  // namespace fedproto
