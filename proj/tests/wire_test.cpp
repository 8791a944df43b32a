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

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <vector>

#include "fedproto/error.hpp"
#include "fedproto/wire.hpp"

namespace fedproto::wire {
namespace {

using Bytes = std::vector<std::uint8_t>;

const Bytes kAckFixture{0x46, 0x50, 0x52, 0x4F, 0x01, 0x03, 0x03, 0x00,
                        0x00, 0x00, 0x07, 0x00, 0x00, 0x00, 0x00, 0x00};

WireMessage one_class_message() {
  WireMessage m;
  m.kind = MessageKind::kUpload;
  m.round = 1;
  m.client_id = 4;
  m.body.insert(2, {1.0, 0.0}, 1);
  return m;
}

DecodeFault fault_of(const Bytes& b, std::size_t* offset = nullptr) {
  try {
    decode(b);
  } catch (const DecodeError& e) {
    if (offset) *offset = e.offset();
    return e.fault();
  }
  ADD_FAILURE() << "decode accepted malformed input";
  return DecodeFault::kBadMagic;
}

float to_f32(double v) { return static_cast<float>(v); }

TEST(Encode, GoldenAck) {
  WireMessage m;
  m.kind = MessageKind::kAck;
  m.round = 3;
  m.client_id = 7;
  EXPECT_EQ(encode(m), kAckFixture);
}

TEST(Encode, GoldenOneClass) {
  Bytes want{0x46, 0x50, 0x52, 0x4F, 0x01, 0x01, 0x01, 0x00, 0x00, 0x00, 0x04, 0x00, 0x00, 0x00,
             0x01, 0x00};
  const Bytes entry{0x02, 0x00, 0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00,
                    0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x00};
  want.insert(want.end(), entry.begin(), entry.end());
  EXPECT_EQ(encode(one_class_message()), want);
}

TEST(Decode, GoldenAck) {
  const auto m = decode(kAckFixture);
  EXPECT_EQ(m.kind, MessageKind::kAck);
  EXPECT_EQ(m.round, 3u);
  EXPECT_EQ(m.client_id, 7u);
  EXPECT_TRUE(m.body.empty());
}

TEST(Decode, GoldenOneClassRoundTrips) {
  EXPECT_EQ(decode(encode(one_class_message())), one_class_message());
}

TEST(Decode, CorruptMagic) {
  for (std::size_t i = 0; i < 4; ++i) {
    Bytes b = kAckFixture;
    b[i] ^= 0xFF;
    std::size_t at = 99;
    EXPECT_EQ(fault_of(b, &at), DecodeFault::kBadMagic);
    EXPECT_EQ(at, i);
  }
}

TEST(Decode, VersionAndKind) {
  Bytes b = kAckFixture;
  b[4] = 2;
  std::size_t at = 0;
  EXPECT_EQ(fault_of(b, &at), DecodeFault::kBadVersion);
  EXPECT_EQ(at, 4u);
  b = kAckFixture;
  for (std::uint8_t kind : {0, 5, 255}) {
    b[5] = kind;
    EXPECT_EQ(fault_of(b, &at), DecodeFault::kBadKind);
    EXPECT_EQ(at, 5u);
  }
}

TEST(Decode, TruncationAtEveryLength) {
  const Bytes full = encode(one_class_message());
  for (std::size_t n = 0; n < full.size(); ++n) {
    const Bytes cut(full.begin(), full.begin() + static_cast<long>(n));
    EXPECT_EQ(fault_of(cut), DecodeFault::kTruncated) << n;
  }
}

TEST(Decode, TruncatedMidVectorReportsLengths) {
  Bytes b = encode(one_class_message());
  b.resize(b.size() - 3);
  try {
    decode(b);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.fault(), DecodeFault::kTruncated);
    EXPECT_NE(std::string(e.what()).find("expected 34 bytes, have 31"), std::string::npos)
        << e.what();
  }
}

TEST(Decode, NonFiniteValue) {
  Bytes b = encode(one_class_message());
  const std::uint32_t nan = 0x7FC00000u;
  std::memcpy(&b[30], &nan, 4);
  std::size_t at = 0;
  EXPECT_EQ(fault_of(b, &at), DecodeFault::kNonFinite);
  EXPECT_EQ(at, 30u);
}

TEST(Decode, ClassOrder) {
  WireMessage m;
  m.kind = MessageKind::kGlobal;
  m.body.insert(1, {1.0}, 1);
  m.body.insert(2, {2.0}, 1);
  Bytes b = encode(m);
  b[16 + 14] = 0x01;  // second class id 2 -> 1
  std::size_t at = 0;
  EXPECT_EQ(fault_of(b, &at), DecodeFault::kClassOrder);
  EXPECT_EQ(at, 30u);
}

TEST(Decode, TrailingBytes) {
  Bytes b = kAckFixture;
  b.push_back(0);
  std::size_t at = 0;
  EXPECT_EQ(fault_of(b, &at), DecodeFault::kTrailingBytes);
  EXPECT_EQ(at, 16u);
}

TEST(Decode, ZeroCountEntry) {
  Bytes b = encode(one_class_message());
  b[18] = 0;
  EXPECT_EQ(fault_of(b), DecodeFault::kBadEntry);
}

TEST(Register, StubsRoundTrip) {
  WireMessage m;
  m.kind = MessageKind::kRegister;
  m.client_id = 5;
  m.registered_classes = {0, 3, 9};
  const auto b = encode(m);
  EXPECT_EQ(b.size(), 16u + 3 * 10);
  EXPECT_EQ(decode(b), m);
}

TEST(Encode, Errors) {
  WireMessage m;
  m.kind = MessageKind::kUpload;
  m.body.insert(70000, {1.0}, 1);
  EXPECT_THROW(encode(m), EncodeError);
  WireMessage big;
  big.kind = MessageKind::kUpload;
  big.body.insert(1, {1e300}, 1);  // overflows binary32
  EXPECT_THROW(encode(big), EncodeError);
}

TEST(RoundTrip, TenThousandRandomMessages) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> kind(1, 4), classes(0, 6), dim(1, 8);
  std::uniform_int_distribution<std::uint32_t> u32;
  std::normal_distribution<double> normal(0.0, 10.0);
  for (int trial = 0; trial < 10000; ++trial) {
    WireMessage m;
    m.kind = static_cast<MessageKind>(kind(rng));
    m.round = u32(rng);
    m.client_id = u32(rng);
    const int n = classes(rng);
    const std::size_t d = static_cast<std::size_t>(dim(rng));
    ClassId id = 0;
    for (int c = 0; c < n; ++c) {
      id += 1 + static_cast<ClassId>(rng() % 50);
      if (m.kind == MessageKind::kRegister) {
        m.registered_classes.push_back(id);
      } else if (m.kind != MessageKind::kAck) {
        std::vector<double> v(d);
        for (double& x : v) x = normal(rng);
        m.body.insert(id, v, 1 + rng() % 1000);
      }
    }
    const auto bytes = encode(m);
    ASSERT_EQ(bytes.size(), m.kind == MessageKind::kRegister
                                ? kHeaderSize + kClassHeaderSize * m.registered_classes.size()
                                : encoded_size(m.body.size(), d));
    const auto back = decode(bytes);
    EXPECT_EQ(back.kind, m.kind);
    EXPECT_EQ(back.round, m.round);
    EXPECT_EQ(back.client_id, m.client_id);
    EXPECT_EQ(back.registered_classes, m.registered_classes);
    ASSERT_EQ(back.body.class_ids(), m.body.class_ids());
    for (const auto& [c, p] : m.body) {
      EXPECT_EQ(back.body.at(c).count, p.count);
      for (std::size_t k = 0; k < d; ++k) {
        EXPECT_EQ(back.body.at(c).vector[k], static_cast<double>(to_f32(p.vector[k])));
      }
    }
    // Already-quantized messages survive a second pass bit for bit.
    EXPECT_EQ(decode(encode(back)), back);
  }
}

TEST(Size, Formula) {
  EXPECT_EQ(encoded_size(0, 50), 16u);
  EXPECT_EQ(encoded_size(4, 50), 16u + 4 * (10 + 200));
  PrototypeSet p(50);
  for (ClassId c = 0; c < 4; ++c) p.insert(c, std::vector<double>(50, 0.5), 3);
  WireMessage m;
  m.kind = MessageKind::kGlobal;
  m.body = p;
  EXPECT_EQ(encode(m).size(), 16u + 4 * 10 + 4 * 200);
}

TEST(Quantize, IsIdempotentBinary32Rounding) {
  PrototypeSet p(3);
  p.insert(1, {0.1, 1.0 / 3.0, -2.5}, 4);
  const auto q = quantize(p);
  EXPECT_EQ(q.at(1).vector[0], static_cast<double>(0.1f));
  EXPECT_EQ(q.at(1).vector[2], -2.5);
  EXPECT_EQ(quantize(q), q);
}

}  // namespace
}  // namespace fedproto::wire
