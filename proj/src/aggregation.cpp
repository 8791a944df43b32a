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


#include "fedproto/aggregation.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "fedproto/error.hpp"
#include "fedproto/kernels.hpp"

namespace fedproto {

std::string_view to_string(AggregationMode mode) {
  return mode == AggregationMode::kNormalizedMean ? "normalized-mean"
                                                  : "contributor-scaled";
}

AggregationMode parse_aggregation_mode(std::string_view text) {
  if (text == "normalized-mean") return AggregationMode::kNormalizedMean;
  if (text == "contributor-scaled") return AggregationMode::kContributorScaled;
  throw InputError("unknown aggregation mode: " + std::string(text));
}

namespace {

template <typename T>
std::vector<const T*> by_client(std::span<const T> uploads) {
  std::vector<const T*> sorted;
  sorted.reserve(uploads.size());
  for (const T& u : uploads) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(),
            [](const T* a, const T* b) { return a->client < b->client; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->client == sorted[i - 1]->client) {
      throw InputError("duplicate upload from client " +
                       std::to_string(sorted[i]->client));
    }
  }
  return sorted;
}

}  // namespace

PrototypeSet aggregate_prototypes(std::span<const PrototypeUpload> uploads,
                                  AggregationMode mode) {
  if (uploads.empty()) throw InputError("aggregate_prototypes: no uploads");
  const auto sorted = by_client(uploads);

  std::size_t dim = 0;
  struct Contribution {
    const Prototype* proto;
  };
  std::map<ClassId, std::vector<Contribution>> per_class;
  for (const PrototypeUpload* u : sorted) {
    if (u->prototypes.empty()) continue;
    if (dim == 0) dim = u->prototypes.dim();
    if (u->prototypes.dim() != dim) {
      throw ProtocolError("client " + std::to_string(u->client) +
                          " uploaded prototypes of dimension " +
                          std::to_string(u->prototypes.dim()) + ", expected " +
                          std::to_string(dim));
    }
    for (const auto& [id, proto] : u->prototypes) {
      per_class[id].push_back({&proto});
    }
  }

  PrototypeSet out(dim);
  for (const auto& [id, contributions] : per_class) {
    std::uint64_t total = 0;
    for (const auto& c : contributions) total += c.proto->count;
    std::vector<double> mean(dim, 0.0);
    const double scale =
        mode == AggregationMode::kContributorScaled
            ? 1.0 / static_cast<double>(contributions.size())
            : 1.0;
    for (const auto& c : contributions) {
      const double w = static_cast<double>(c.proto->count) /
                       static_cast<double>(total);
      kernels::axpy(w * scale, c.proto->vector, mean);
    }
    out.insert(id, std::move(mean), total);
  }
  return out;
}

ModelState average_parameters(std::span<const ModelUpload> uploads) {
  if (uploads.empty()) throw InputError("average_parameters: no uploads");
  const auto sorted = by_client(uploads);
  const ModelState& first = *sorted.front()->model;
  double total = 0.0;
  for (const ModelUpload* u : sorted) {
    const ModelState& m = *u->model;
    if (!(m.arch() == first.arch()) || m.class_space() != first.class_space() ||
        m.num_params() != first.num_params()) {
      throw HeterogeneityError(
          "model heterogeneity unsupported by FedAvg: client " +
          std::to_string(u->client) + " runs " +
          std::string(to_string(m.arch().kind)) + " with " +
          std::to_string(m.num_params()) + " parameters, client " +
          std::to_string(sorted.front()->client) + " runs " +
          std::string(to_string(first.arch().kind)) + " with " +
          std::to_string(first.num_params()));
    }
    if (!(u->weight > 0.0)) throw InputError("FedAvg weights must be positive");
    total += u->weight;
  }
  ModelState out(first.arch(), first.class_space());
  for (const ModelUpload* u : sorted) {
    kernels::axpy(u->weight / total, u->model->params(), out.params());
  }
  return out;
}

std::size_t payload_params(const PrototypeSet& prototypes) {
  return prototype_payload_params(prototypes.size(), prototypes.dim());
}

std::size_t payload_params(const ModelState& model) { return model.num_params(); }

std::size_t prototype_payload_params(std::size_t num_classes,
                                     std::size_t embed_dim) {
  return num_classes * embed_dim;
}

}  // namespace fedproto
