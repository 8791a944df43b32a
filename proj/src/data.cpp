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


#include "fedproto/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include <json.hpp>

#include "fedproto/error.hpp"

namespace fedproto {

Dataset generate_synthetic(std::size_t num_classes, std::size_t input_dim,
                           std::size_t samples_per_class, double cluster_spread,
                           std::uint64_t seed, double centre_scale) {
  if (num_classes == 0 || input_dim == 0 || samples_per_class == 0) {
    throw InputError("generate_synthetic: counts must be positive");
  }
  if (!(cluster_spread > 0.0)) {
    throw InputError("generate_synthetic: cluster_spread must be positive");
  }
  if (!(centre_scale > 0.0)) {
    throw InputError("generate_synthetic: centre_scale must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> centres(num_classes * input_dim);
  for (double& c : centres) c = centre_scale * normal(rng);

  Dataset ds;
  ds.input_dim = input_dim;
  ds.num_classes = num_classes;
  ds.features.reserve(num_classes * samples_per_class * input_dim);
  ds.labels.reserve(num_classes * samples_per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      for (std::size_t d = 0; d < input_dim; ++d) {
        ds.features.push_back(centres[c * input_dim + d] +
                              cluster_spread * normal(rng));
      }
      ds.labels.push_back(static_cast<ClassId>(c));
    }
  }
  return ds;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf,
                        std::size_t offset, const std::string& file,
                        const char* field) {
  if (buf.size() < offset + 4) {
    throw FormatError(file + ": truncated header, missing field '" + field + "'");
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  const std::string img_name = images_path.filename().string();
  const std::string lbl_name = labels_path.filename().string();

  if (read_be32(images, 0, img_name, "magic") != 0x00000803u) {
    throw FormatError(img_name + ": bad field 'magic' (expected 0x00000803)");
  }
  if (read_be32(labels, 0, lbl_name, "magic") != 0x00000801u) {
    throw FormatError(lbl_name + ": bad field 'magic' (expected 0x00000801)");
  }
  const std::size_t count = read_be32(images, 4, img_name, "count");
  const std::size_t rows = read_be32(images, 8, img_name, "rows");
  const std::size_t cols = read_be32(images, 12, img_name, "cols");
  const std::size_t label_count = read_be32(labels, 4, lbl_name, "count");
  if (label_count != count) {
    throw FormatError("field 'count' mismatch: " + std::to_string(count) +
                      " images vs " + std::to_string(label_count) + " labels");
  }
  const std::size_t pixels = rows * cols;
  if (images.size() != 16 + count * pixels) {
    throw FormatError(img_name + ": field 'pixels' truncated or oversized (" +
                      std::to_string(images.size()) + " bytes, expected " +
                      std::to_string(16 + count * pixels) + ")");
  }
  if (labels.size() != 8 + count) {
    throw FormatError(lbl_name + ": field 'labels' truncated or oversized (" +
                      std::to_string(labels.size()) + " bytes, expected " +
                      std::to_string(8 + count) + ")");
  }

  Dataset ds;
  ds.input_dim = pixels;
  ds.features.resize(count * pixels);
  for (std::size_t i = 0; i < count * pixels; ++i) {
    ds.features[i] = static_cast<double>(images[16 + i]) / 255.0;
  }
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = labels[8 + i];
    ds.num_classes = std::max<std::size_t>(ds.num_classes, ds.labels[i] + 1);
  }
  return ds;
}

std::vector<Shard> partition(const Dataset& ds, const PartitionConfig& config) {
  if (ds.size() == 0) throw InputError("partition: dataset is empty");
  if (config.clients == 0) throw InputError("partition: need at least one client");
  const double num_classes = static_cast<double>(ds.num_classes);
  if (!(config.n_avg >= 1.0 && config.n_avg <= num_classes)) {
    throw InputError("partition: n_avg must lie in [1, num_classes]");
  }
  if (!(config.k_avg >= 1.0)) throw InputError("partition: k_avg must be >= 1");
  if (config.stdev_n < 0.0 || config.stdev_k < 0.0) {
    throw InputError("partition: standard deviations must be non-negative");
  }
  if (config.test_fraction < 0.0 || config.test_fraction >= 1.0) {
    throw InputError("partition: test_fraction must lie in [0, 1)");
  }

  std::vector<std::vector<std::size_t>> pools(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) pools[ds.labels[i]].push_back(i);

  std::vector<Shard> shards;
  shards.reserve(config.clients);
  for (std::size_t client = 0; client < config.clients; ++client) {
    std::seed_seq seq{config.seed, static_cast<std::uint64_t>(client),
                      std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);

    const double n_draw = config.n_avg + config.stdev_n * normal(rng);
    const double k_draw = config.k_avg + config.stdev_k * normal(rng);
    const auto n = static_cast<std::size_t>(
        std::clamp<long long>(std::llround(n_draw), 1,
                              static_cast<long long>(ds.num_classes)));
    const auto k_target = static_cast<std::size_t>(
        std::max<long long>(std::llround(k_draw), 1));

    std::vector<ClassId> all(ds.num_classes);
    std::iota(all.begin(), all.end(), ClassId{0});
    std::shuffle(all.begin(), all.end(), rng);
    Shard shard;
    shard.client_id = static_cast<ClientId>(client);
    shard.class_space.assign(all.begin(), all.begin() + static_cast<long>(n));
    std::sort(shard.class_space.begin(), shard.class_space.end());

    for (ClassId c : shard.class_space) {
      auto& pool = pools[c];
      const std::size_t test_count =
          config.test_fraction > 0.0
              ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                             config.test_fraction *
                                             static_cast<double>(k_target))))
              : 0;
      if (pool.size() < test_count + 1) {
        throw InputError("partition: class " + std::to_string(c) +
                         " has too few samples for client " +
                         std::to_string(client));
      }
      const std::size_t k = std::min(k_target, pool.size() - test_count);
      // Partial Fisher-Yates over a copy: the first test_count + k entries
      // become a uniform sample without replacement.
      std::vector<std::size_t> draw = pool;
      for (std::size_t s = 0; s < test_count + k; ++s) {
        std::uniform_int_distribution<std::size_t> pick(s, draw.size() - 1);
        std::swap(draw[s], draw[pick(rng)]);
      }
      shard.test.insert(shard.test.end(), draw.begin(),
                        draw.begin() + static_cast<long>(test_count));
      shard.train.insert(shard.train.end(),
                         draw.begin() + static_cast<long>(test_count),
                         draw.begin() + static_cast<long>(test_count + k));
      shard.train_counts[c] = k;
      if (config.disjoint_pools) {
        pool.assign(draw.begin() + static_cast<long>(test_count + k), draw.end());
        std::sort(pool.begin(), pool.end());
      }
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

std::vector<Example> gather(const Dataset& ds,
                            std::span<const std::size_t> indices) {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw InputError("sample index out of range");
    out.push_back(ds.example(i));
  }
  return out;
}

std::string shards_to_json(const std::vector<Shard>& shards) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const Shard& s : shards) {
    nlohmann::ordered_json counts = nlohmann::ordered_json::object();
    for (const auto& [c, k] : s.train_counts) counts[std::to_string(c)] = k;
    doc.push_back({{"client_id", s.client_id},
                   {"class_space", s.class_space},
                   {"train_counts", counts},
                   {"train", s.train},
                   {"test", s.test}});
  }
  return doc.dump(2) + "\n";
}

std::vector<Shard> shards_from_json(const std::string& text) {
  std::vector<Shard> shards;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& item : doc) {
      Shard s;
      s.client_id = item.at("client_id").get<ClientId>();
      s.class_space = item.at("class_space").get<std::vector<ClassId>>();
      s.train = item.at("train").get<std::vector<std::size_t>>();
      s.test = item.at("test").get<std::vector<std::size_t>>();
      for (const auto& [key, value] : item.at("train_counts").items()) {
        s.train_counts[static_cast<ClassId>(std::stoul(key))] =
            value.get<std::size_t>();
      }
      shards.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("shard JSON: ") + e.what());
  }
  return shards;
}

}  // namespace fedproto
