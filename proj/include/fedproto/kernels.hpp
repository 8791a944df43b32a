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

// Dense double-precision kernels used by the model forward/backward passes and
// by prototype distance computations. Each kernel has a portable scalar
// reference and an AVX2+FMA variant; the variant is chosen once at startup
// from CPUID and can be pinned with FEDPROTO_SIMD=scalar|avx2.
namespace fedproto::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

// Best ISA the running CPU supports (ignores the environment override).
Isa detect_isa();
// ISA currently used by the dispatching entry points below.
Isa active_isa();
// Pins the dispatch table. Throws InputError if the CPU lacks the ISA.
void set_active_isa(Isa isa);
bool isa_supported(Isa isa);

double dot(std::span<const double> a, std::span<const double> b);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double squared_distance(std::span<const double> a, std::span<const double> b);

// out = W x + bias, W row-major rows x cols.
void affine(std::span<const double> w, std::span<const double> bias,
            std::span<const double> x, std::span<double> out);
// out += W^T u
void affine_transpose_accumulate(std::span<const double> w,
                                 std::span<const double> u,
                                 std::span<double> out);
// W += alpha * u v^T
void rank1_update(std::span<double> w, double alpha, std::span<const double> u,
                  std::span<const double> v);

// Raw per-ISA entry points; exposed so the variants can be checked against
// each other directly.
struct Table {
  double (*dot)(const double* a, const double* b, std::size_t n);
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
};

const Table& scalar_table();
// Only valid to call through when isa_supported(Isa::kAvx2).
const Table& avx2_table();

}  // namespace fedproto::kernels
