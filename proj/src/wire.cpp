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


#include "fedproto/wire.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "fedproto/error.hpp"

namespace fedproto {

const char* to_string(DecodeFault fault) {
  switch (fault) {
    case DecodeFault::kBadMagic:
      return "bad magic";
    case DecodeFault::kBadVersion:
      return "unknown version";
    case DecodeFault::kBadKind:
      return "unknown kind";
    case DecodeFault::kTruncated:
      return "truncated";
    case DecodeFault::kNonFinite:
      return "non-finite value";
    case DecodeFault::kClassOrder:
      return "class ids not ascending";
    case DecodeFault::kTrailingBytes:
      return "trailing bytes";
    case DecodeFault::kBadEntry:
      return "bad class entry";
  }
  return "decode error";
}

DecodeError::DecodeError(DecodeFault fault, std::size_t offset,
                         const std::string& detail)
    : Error(std::string(to_string(fault)) + " at offset " +
            std::to_string(offset) + (detail.empty() ? "" : ": " + detail)),
      fault_(fault),
      offset_(offset) {}

namespace wire {
namespace {

class Writer {
 public:
  explicit Writer(std::size_t reserve) { out_.reserve(reserve); }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int s = 0; s < 16; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw DecodeError(DecodeFault::kTruncated, pos_,
                        std::string(what) + ": expected " +
                            std::to_string(pos_ + n) + " bytes, have " +
                            std::to_string(bytes_.size()));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

bool valid_kind(std::uint8_t k) { return k >= 1 && k <= 4; }

}  // namespace

std::size_t encoded_size(std::size_t num_classes, std::size_t dim) {
  return kHeaderSize + num_classes * (kClassHeaderSize + 4 * dim);
}

std::vector<std::uint8_t> encode(const WireMessage& msg) {
  if (!valid_kind(static_cast<std::uint8_t>(msg.kind))) {
    throw EncodeError("unknown message kind");
  }
  const bool is_register = msg.kind == MessageKind::kRegister;
  const std::size_t classes =
      is_register ? msg.registered_classes.size() : msg.body.size();
  if (classes > std::numeric_limits<std::uint16_t>::max()) {
    throw EncodeError("too many classes for one message: " + std::to_string(classes));
  }
  const std::size_t dim = is_register ? 0 : msg.body.dim();
  if (dim > std::numeric_limits<std::uint32_t>::max()) {
    throw EncodeError("prototype dimension exceeds u32");
  }

  Writer w(encoded_size(classes, dim));
  for (std::uint8_t b : kMagic) w.u8(b);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(msg.kind));
  w.u32(msg.round);
  w.u32(msg.client_id);
  w.u16(static_cast<std::uint16_t>(classes));

  auto class_id16 = [](ClassId id) {
    if (id > std::numeric_limits<std::uint16_t>::max()) {
      throw EncodeError("class id exceeds u16: " + std::to_string(id));
    }
    return static_cast<std::uint16_t>(id);
  };

  if (is_register) {
    ClassId prev = 0;
    bool first = true;
    for (ClassId id : msg.registered_classes) {
      if (!first && id <= prev) throw EncodeError("registered classes not ascending");
      first = false;
      prev = id;
      w.u16(class_id16(id));
      w.u32(0);
      w.u32(0);
    }
    return w.take();
  }

  for (const auto& [id, proto] : msg.body) {
    w.u16(class_id16(id));
    if (proto.count > std::numeric_limits<std::uint32_t>::max()) {
      throw EncodeError("sample count exceeds u32 for class " + std::to_string(id));
    }
    w.u32(static_cast<std::uint32_t>(proto.count));
    w.u32(static_cast<std::uint32_t>(proto.vector.size()));
    for (double v : proto.vector) {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) {
        throw EncodeError("prototype value not representable as binary32 in class " +
                          std::to_string(id));
      }
      w.f32(f);
    }
  }
  return w.take();
}

WireMessage decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != kMagic[i]) throw DecodeError(DecodeFault::kBadMagic, i, "");
  }
  r.u32("magic");
  const std::size_t version_at = r.offset();
  if (const auto version = r.u8("version"); version != kVersion) {
    throw DecodeError(DecodeFault::kBadVersion, version_at,
                      "version " + std::to_string(version));
  }
  const std::size_t kind_at = r.offset();
  const auto kind = r.u8("kind");
  if (!valid_kind(kind)) {
    throw DecodeError(DecodeFault::kBadKind, kind_at, "kind " + std::to_string(kind));
  }

  WireMessage msg;
  msg.kind = static_cast<MessageKind>(kind);
  msg.round = r.u32("round");
  msg.client_id = r.u32("client_id");
  const std::size_t classes = r.u16("num_classes");
  const bool is_register = msg.kind == MessageKind::kRegister;

  bool first = true;
  std::uint16_t prev = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t entry_at = r.offset();
    const std::uint16_t id = r.u16("class_id");
    if (!first && id <= prev) {
      throw DecodeError(DecodeFault::kClassOrder, entry_at,
                        std::to_string(id) + " after " + std::to_string(prev));
    }
    first = false;
    prev = id;
    const std::uint32_t count = r.u32("sample_count");
    const std::size_t dim_at = r.offset();
    const std::uint32_t dim = r.u32("dim");
    if (is_register) {
      if (count != 0 || dim != 0) {
        throw DecodeError(DecodeFault::kBadEntry, entry_at,
                          "REGISTER entries must be count-0 stubs");
      }
      msg.registered_classes.push_back(id);
      continue;
    }
    if (count == 0 || dim == 0) {
      throw DecodeError(DecodeFault::kBadEntry, entry_at,
                        "prototype entry needs count >= 1 and dim >= 1");
    }
    if (!msg.body.empty() && dim != msg.body.dim()) {
      throw DecodeError(DecodeFault::kBadEntry, dim_at,
                        "dim " + std::to_string(dim) + " differs from " +
                            std::to_string(msg.body.dim()));
    }
    r.need(std::size_t{4} * dim, "prototype vector");
    std::vector<double> vec(dim);
    for (std::uint32_t k = 0; k < dim; ++k) {
      const std::size_t at = r.offset();
      const float f = std::bit_cast<float>(r.u32("value"));
      if (!std::isfinite(f)) {
        throw DecodeError(DecodeFault::kNonFinite, at,
                          "class " + std::to_string(id));
      }
      vec[k] = static_cast<double>(f);
    }
    msg.body.insert(id, std::move(vec), count);
  }
  if (r.remaining() != 0) {
    throw DecodeError(DecodeFault::kTrailingBytes, r.offset(),
                      std::to_string(r.remaining()) + " unread bytes");
  }
  return msg;
}

PrototypeSet quantize(const PrototypeSet& prototypes) {
  WireMessage msg;
  msg.kind = MessageKind::kUpload;
  msg.body = prototypes;
  return decode(encode(msg)).body;
}

}  // namespace wire
}  // namespace fedproto
