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

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "fedproto/data.hpp"
#include "fedproto/error.hpp"

namespace fedproto {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("fedproto_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_images(std::uint32_t count, std::vector<std::uint8_t> pixels) {
  std::vector<std::uint8_t> b = be32(0x803);
  for (std::uint32_t v : {count, 2u, 2u}) {
    const auto w = be32(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t count, std::vector<std::uint8_t> labels) {
  std::vector<std::uint8_t> b = be32(0x801);
  const auto w = be32(count);
  b.insert(b.end(), w.begin(), w.end());
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

TEST(Synthetic, Deterministic) {
  EXPECT_EQ(generate_synthetic(4, 6, 20, 0.5, 9), generate_synthetic(4, 6, 20, 0.5, 9));
  EXPECT_NE(generate_synthetic(4, 6, 20, 0.5, 9), generate_synthetic(4, 6, 20, 0.5, 10));
}

TEST(Synthetic, TinySpreadCollapsesClasses) {
  const auto ds = generate_synthetic(3, 5, 50, 1e-6, 4);
  for (ClassId c = 0; c < 3; ++c) {
    for (std::size_t d = 0; d < 5; ++d) {
      double sum = 0.0, sq = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] != c) continue;
        sum += ds.x(i)[d];
        ++n;
      }
      const double mean = sum / static_cast<double>(n);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == c) sq += (ds.x(i)[d] - mean) * (ds.x(i)[d] - mean);
      }
      EXPECT_LT(sq / static_cast<double>(n), 1e-9);
    }
  }
}

TEST(Synthetic, Counts) {
  const auto ds = generate_synthetic(10, 8, 120, 1.0, 1);
  EXPECT_EQ(ds.size(), 1200u);
  EXPECT_EQ(ds.num_classes, 10u);
  for (ClassId c = 0; c < 10; ++c) {
    EXPECT_EQ(std::count(ds.labels.begin(), ds.labels.end(), c), 120);
  }
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(generate_synthetic(0, 2, 2, 1.0, 1), InputError);
  EXPECT_THROW(generate_synthetic(2, 2, 2, 0.0, 1), InputError);
}

TEST(Idx, HandCraftedPair) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(2, {0, 255, 51, 102, 255, 0, 0, 204}));
  write_bytes(dir / "lbl", idx_labels(2, {3, 1}));
  const auto ds = load_idx(dir / "img", dir / "lbl");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.input_dim, 4u);
  EXPECT_EQ(ds.num_classes, 4u);
  EXPECT_EQ(ds.labels, (std::vector<ClassId>{3, 1}));
  const std::vector<double> want{0.0, 1.0, 51.0 / 255, 102.0 / 255, 1.0, 0.0, 0.0, 204.0 / 255};
  EXPECT_EQ(ds.features, want);
}

TEST(Idx, CountMismatchNamesField) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(2, {0, 0, 0, 0, 0, 0, 0, 0}));
  write_bytes(dir / "lbl", idx_labels(3, {0, 1, 2}));
  try {
    load_idx(dir / "img", dir / "lbl");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("count"), std::string::npos) << e.what();
  }
}

TEST(Idx, BadMagicAndTruncation) {
  TempDir dir;
  auto img = idx_images(1, {1, 2, 3, 4});
  img[3] = 0x02;
  write_bytes(dir / "img", img);
  write_bytes(dir / "lbl", idx_labels(1, {0}));
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), FormatError);
  write_bytes(dir / "img", idx_images(1, {1, 2}));
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl"), FormatError);
  EXPECT_THROW(load_idx(dir / "missing", dir / "lbl"), FormatError);
}

TEST(Idx, EmptyPairLoadsButCannotBePartitioned) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(0, {}));
  write_bytes(dir / "lbl", idx_labels(0, {}));
  const auto ds = load_idx(dir / "img", dir / "lbl");
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_THROW(partition(ds, PartitionConfig{}), InputError);
}

Dataset blobs() { return generate_synthetic(10, 4, 300, 1.0, 3); }

TEST(Partition, ZeroNoiseGivesExactShape) {
  const auto ds = blobs();
  PartitionConfig cfg;
  cfg.n_avg = 3;
  cfg.k_avg = 100;
  cfg.stdev_n = 0;
  cfg.stdev_k = 0;
  const auto shards = partition(ds, cfg);
  ASSERT_EQ(shards.size(), 20u);
  for (const auto& s : shards) {
    EXPECT_EQ(s.class_space.size(), 3u);
    EXPECT_EQ(s.train.size(), 300u);
    for (const auto& [c, n] : s.train_counts) EXPECT_EQ(n, 100u);
  }
}

TEST(Partition, NoisyIsDeterministicAndOverlapping) {
  const auto ds = blobs();
  PartitionConfig cfg;
  cfg.n_avg = 4;
  cfg.stdev_n = 2;
  cfg.seed = 77;
  const auto a = partition(ds, cfg);
  EXPECT_EQ(a, partition(ds, cfg));
  std::set<std::size_t> sizes;
  std::vector<int> seen(10, 0);
  for (const auto& s : a) {
    sizes.insert(s.class_space.size());
    for (ClassId c : s.class_space) ++seen[c];
  }
  EXPECT_GT(sizes.size(), 1u);
  EXPECT_GT(*std::max_element(seen.begin(), seen.end()), 1);
  cfg.seed = 78;
  EXPECT_NE(a, partition(ds, cfg));
}

TEST(Partition, FullClassSpaceBoundary) {
  const auto ds = blobs();
  PartitionConfig cfg;
  cfg.n_avg = 10;
  cfg.stdev_n = 0;
  for (const auto& s : partition(ds, cfg)) {
    EXPECT_EQ(s.class_space.size(), 10u);
  }
}

TEST(Partition, RangeErrors) {
  const auto ds = blobs();
  PartitionConfig cfg;
  cfg.n_avg = 11;
  EXPECT_THROW(partition(ds, cfg), InputError);
  cfg.n_avg = 0.5;
  EXPECT_THROW(partition(ds, cfg), InputError);
  cfg.n_avg = 3;
  cfg.k_avg = 0;
  EXPECT_THROW(partition(ds, cfg), InputError);
}

TEST(Partition, Invariants) {
  const auto ds = blobs();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    PartitionConfig cfg;
    cfg.seed = seed;
    cfg.stdev_n = 5;  // wide noise exercises the clamp
    cfg.stdev_k = 30;
    for (const auto& s : partition(ds, cfg)) {
      EXPECT_GE(s.class_space.size(), 1u);
      EXPECT_LE(s.class_space.size(), 10u);
      EXPECT_TRUE(std::is_sorted(s.class_space.begin(), s.class_space.end()));
      std::set<std::size_t> train(s.train.begin(), s.train.end());
      EXPECT_EQ(train.size(), s.train.size());
      for (std::size_t i : s.test) EXPECT_EQ(train.count(i), 0u);
      std::size_t total = 0;
      for (ClassId c : s.class_space) {
        ASSERT_TRUE(s.train_counts.count(c));
        EXPECT_GE(s.train_counts.at(c), 1u);
        total += s.train_counts.at(c);
      }
      EXPECT_EQ(total, s.train.size());
      for (std::size_t i : s.train) {
        EXPECT_TRUE(std::binary_search(s.class_space.begin(), s.class_space.end(), ds.labels[i]));
      }
    }
  }
}

TEST(Partition, DisjointPools) {
  const auto ds = generate_synthetic(4, 2, 400, 1.0, 5);
  PartitionConfig cfg;
  cfg.clients = 5;
  cfg.n_avg = 2;
  cfg.stdev_n = 0;
  cfg.k_avg = 30;
  cfg.disjoint_pools = true;
  std::set<std::size_t> used;
  std::size_t total = 0;
  for (const auto& s : partition(ds, cfg)) {
    for (const auto* v : {&s.train, &s.test}) {
      used.insert(v->begin(), v->end());
      total += v->size();
    }
  }
  EXPECT_EQ(used.size(), total);
}

TEST(Partition, JsonRoundTrip) {
  const auto shards = partition(blobs(), PartitionConfig{});
  EXPECT_EQ(shards_from_json(shards_to_json(shards)), shards);
  EXPECT_THROW(shards_from_json("{not json"), FormatError);
}

}  // namespace
}  // namespace fedproto
