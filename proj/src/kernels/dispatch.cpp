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


#include <atomic>
#include <cstdlib>
#include <string>

#include "fedproto/error.hpp"
#include "fedproto/kernels.hpp"

namespace fedproto::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  Isa isa = detect_isa();
  if (const char* env = std::getenv("FEDPROTO_SIMD")) {
    const std::string want(env);
    if (want == "scalar") isa = Isa::kScalar;
    // "avx2" on an unsupported CPU silently keeps the scalar path.
  }
  return isa;
}

const Table& table_for(Isa isa) {
  return isa == Isa::kAvx2 ? avx2_table() : scalar_table();
}

std::atomic<const Table*>& active_table() {
  static std::atomic<const Table*> table{&table_for(initial_isa())};
  return table;
}

inline const Table& tbl() {
  return *active_table().load(std::memory_order_relaxed);
}

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw InputError(std::string(what) + ": length mismatch " +
                     std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return "scalar";
    case Isa::kAvx2:
      return "avx2";
  }
  return "unknown";
}

Isa detect_isa() { return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar; }

bool isa_supported(Isa isa) {
  return isa == Isa::kScalar || (isa == Isa::kAvx2 && cpu_has_avx2());
}

Isa active_isa() {
  return &tbl() == &avx2_table() ? Isa::kAvx2 : Isa::kScalar;
}

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw InputError("kernel ISA not supported on this CPU: " +
                     std::string(isa_name(isa)));
  }
  active_table().store(&table_for(isa), std::memory_order_relaxed);
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  return tbl().dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  tbl().axpy(alpha, x.data(), y.data(), x.size());
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "squared_distance");
  return tbl().squared_distance(a.data(), b.data(), a.size());
}

void affine(std::span<const double> w, std::span<const double> bias,
            std::span<const double> x, std::span<double> out) {
  const std::size_t rows = out.size();
  const std::size_t cols = x.size();
  require_same_size(w.size(), rows * cols, "affine");
  require_same_size(bias.size(), rows, "affine bias");
  const Table& t = tbl();
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = bias[r] + t.dot(w.data() + r * cols, x.data(), cols);
  }
}

void affine_transpose_accumulate(std::span<const double> w,
                                 std::span<const double> u,
                                 std::span<double> out) {
  const std::size_t rows = u.size();
  const std::size_t cols = out.size();
  require_same_size(w.size(), rows * cols, "affine_transpose_accumulate");
  const Table& t = tbl();
  for (std::size_t r = 0; r < rows; ++r) {
    if (u[r] != 0.0) t.axpy(u[r], w.data() + r * cols, out.data(), cols);
  }
}

void rank1_update(std::span<double> w, double alpha, std::span<const double> u,
                  std::span<const double> v) {
  const std::size_t rows = u.size();
  const std::size_t cols = v.size();
  require_same_size(w.size(), rows * cols, "rank1_update");
  const Table& t = tbl();
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = alpha * u[r];
    if (s != 0.0) t.axpy(s, v.data(), w.data() + r * cols, cols);
  }
}

}  // namespace fedproto::kernels
