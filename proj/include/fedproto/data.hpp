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
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedproto/model.hpp"

namespace fedproto {

// Labelled samples with features stored row-major in one buffer.
struct Dataset {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;
  std::vector<ClassId> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> x(std::size_t i) const {
    return std::span<const double>(features).subspan(i * input_dim, input_dim);
  }
  Example example(std::size_t i) const { return Example{x(i), labels[i], i}; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// One isotropic Gaussian blob per class. Class centres are drawn from a
// N(0, centre_scale^2) per coordinate; samples add N(0, cluster_spread^2) noise.
// Samples are laid out class by class.
Dataset generate_synthetic(std::size_t num_classes, std::size_t input_dim,
                           std::size_t samples_per_class, double cluster_spread,
                           std::uint64_t seed, double centre_scale = 1.0);

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
// Pixels are scaled to [0, 1]; num_classes is max label + 1.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

// One client's local task: its class subset and the dataset indices of its
// train and test samples.
struct Shard {
  ClientId client_id = 0;
  std::vector<ClassId> class_space;  // ascending
  std::vector<std::size_t> train;    // dataset indices, class by class
  std::vector<std::size_t> test;
  std::map<ClassId, std::size_t> train_counts;

  friend bool operator==(const Shard&, const Shard&) = default;
};

struct PartitionConfig {
  std::size_t clients = 20;
  double n_avg = 3.0;
  double k_avg = 100.0;
  double stdev_n = 2.0;
  double stdev_k = 0.0;
  std::uint64_t seed = 1;
  // Held-out test samples per class, as a fraction of the client's k.
  double test_fraction = 0.2;
  // When set, no dataset sample is handed to more than one client.
  bool disjoint_pools = false;
};

// n-way k-shot partition with Gaussian noise on n and k per client:
//   n_i = clamp(round(n_avg + N(0, stdev_n)), 1, num_classes)
//   k_i = clamp(round(k_avg + N(0, stdev_k)), 1, available)
// Classes are drawn uniformly without replacement; the test split of each
// class is held out before the training draw.
std::vector<Shard> partition(const Dataset& ds, const PartitionConfig& config);

std::vector<Example> gather(const Dataset& ds,
                            std::span<const std::size_t> indices);

std::string shards_to_json(const std::vector<Shard>& shards);
std::vector<Shard> shards_from_json(const std::string& text);

}  // namespace fedproto
