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
#include <map>
#include <span>
#include <vector>

namespace fedproto {

using ClassId = std::uint32_t;
using ClientId = std::uint32_t;

struct Prototype {
  std::vector<double> vector;
  // Number of samples whose embeddings were averaged into `vector`.
  std::uint64_t count = 0;
};

// Per-class mean embeddings. Classes without samples are absent rather than
// stored as zero vectors. Iteration is in ascending class id.
class PrototypeSet {
 public:
  using Map = std::map<ClassId, Prototype>;

  PrototypeSet() = default;
  // dim 0 means "adopt the dimension of the first inserted vector".
  explicit PrototypeSet(std::size_t dim) : dim_(dim) {}

  // Throws InputError on dimension mismatch, non-finite entries, count 0.
  void insert(ClassId id, std::vector<double> vector, std::uint64_t count);
  void insert_or_assign(ClassId id, std::vector<double> vector,
                        std::uint64_t count);

  bool contains(ClassId id) const { return entries_.count(id) != 0; }
  const Prototype& at(ClassId id) const;
  const Prototype* find(ClassId id) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return dim_; }
  std::vector<ClassId> class_ids() const;

  // Entries whose class id appears in `classes`; other classes dropped.
  PrototypeSet restricted_to(std::span<const ClassId> classes) const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  friend bool operator==(const PrototypeSet& a, const PrototypeSet& b);

 private:
  void validate(const std::vector<double>& vector, std::uint64_t count);

  std::size_t dim_ = 0;
  Map entries_;
};

bool operator==(const Prototype& a, const Prototype& b);

}  // namespace fedproto
