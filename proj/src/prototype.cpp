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


#include "fedproto/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedproto/error.hpp"

namespace fedproto {

void PrototypeSet::validate(const std::vector<double>& vector,
                            std::uint64_t count) {
  if (vector.empty()) throw InputError("prototype vector is empty");
  if (dim_ == 0) dim_ = vector.size();
  if (vector.size() != dim_) {
    throw InputError("prototype dimension " + std::to_string(vector.size()) +
                     " does not match set dimension " + std::to_string(dim_));
  }
  if (count == 0) throw InputError("prototype count must be at least 1");
  for (double v : vector) {
    if (!std::isfinite(v)) throw InputError("prototype entry is not finite");
  }
}

void PrototypeSet::insert(ClassId id, std::vector<double> vector,
                          std::uint64_t count) {
  if (contains(id)) {
    throw InputError("duplicate prototype for class " + std::to_string(id));
  }
  validate(vector, count);
  entries_.emplace(id, Prototype{std::move(vector), count});
}

void PrototypeSet::insert_or_assign(ClassId id, std::vector<double> vector,
                                    std::uint64_t count) {
  validate(vector, count);
  entries_.insert_or_assign(id, Prototype{std::move(vector), count});
}

const Prototype& PrototypeSet::at(ClassId id) const {
  const auto it = entries_.find(id);
  if (it == entries_.end()) {
    throw InputError("no prototype for class " + std::to_string(id));
  }
  return it->second;
}

const Prototype* PrototypeSet::find(ClassId id) const {
  const auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<ClassId> PrototypeSet::class_ids() const {
  std::vector<ClassId> ids;
  ids.reserve(entries_.size());
  for (const auto& [id, _] : entries_) ids.push_back(id);
  return ids;
}

PrototypeSet PrototypeSet::restricted_to(std::span<const ClassId> classes) const {
  PrototypeSet out(dim_);
  for (const auto& [id, proto] : entries_) {
    if (std::find(classes.begin(), classes.end(), id) != classes.end()) {
      out.entries_.emplace(id, proto);
    }
  }
  return out;
}

bool operator==(const Prototype& a, const Prototype& b) {
  return a.count == b.count && a.vector == b.vector;
}

bool operator==(const PrototypeSet& a, const PrototypeSet& b) {
  return a.entries_ == b.entries_;
}

}  // namespace fedproto
