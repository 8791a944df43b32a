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
#include <span>
#include <vector>

#include "fedproto/prototype.hpp"

// Binary message format for prototype exchange. All integers little-endian.
//
//   offset  size  field
//   0       4     magic "FPRO" (46 50 52 4F)
//   4       1     version (1)
//   5       1     kind (UPLOAD=1, GLOBAL=2, ACK=3, REGISTER=4)
//   6       4     round (u32)
//   10      4     client_id (u32, 0 = server)
//   14      2     num_classes (u16)
//   then per class, ascending class id:
//           2     class_id (u16)
//           4     sample_count (u32)
//           4     dim (u32)
//           4*dim IEEE-754 binary32 values
//
// REGISTER carries the client's class space as stubs with count 0, dim 0.
namespace fedproto::wire {

inline constexpr std::uint8_t kMagic[4] = {0x46, 0x50, 0x52, 0x4F};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kClassHeaderSize = 10;
// ACK round value signalling a rejected registration.
inline constexpr std::uint32_t kRejectRound = 0xFFFFFFFFu;

enum class MessageKind : std::uint8_t {
  kUpload = 1,
  kGlobal = 2,
  kAck = 3,
  kRegister = 4,
};

struct WireMessage {
  MessageKind kind = MessageKind::kAck;
  std::uint32_t round = 0;
  ClientId client_id = 0;
  PrototypeSet body;                      // UPLOAD / GLOBAL
  std::vector<ClassId> registered_classes;  // REGISTER only, ascending

  friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

std::vector<std::uint8_t> encode(const WireMessage& msg);
// Total; every malformed input raises DecodeError with the byte offset.
WireMessage decode(std::span<const std::uint8_t> bytes);

// Exact encoded size for a body of `num_classes` classes of dimension `dim`.
std::size_t encoded_size(std::size_t num_classes, std::size_t dim);

// encode then decode: the binary32 narrowing every prototype undergoes when
// it crosses between client and server.
PrototypeSet quantize(const PrototypeSet& prototypes);

}  // namespace fedproto::wire
