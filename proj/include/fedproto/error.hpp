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
#include <stdexcept>
#include <string>

namespace fedproto {

// Every failure raised by the library derives from Error. The subclasses map
// onto the CLI exit codes (validation 2, runtime 3, network 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed something outside an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

// Upload/download ordering or shape agreement between parties violated.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Non-finite intermediate or failed numeric procedure.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file on disk (IDX, shard JSON).
class FormatError : public Error {
 public:
  using Error::Error;
};

// FedAvg asked to average models with differing architectures or shapes.
class HeterogeneityError : public Error {
 public:
  using Error::Error;
};

// Bad configuration; reported before any work is done.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Socket-level failure.
class NetworkError : public Error {
 public:
  using Error::Error;
};

enum class DecodeFault {
  kBadMagic,
  kBadVersion,
  kBadKind,
  kTruncated,
  kNonFinite,
  kClassOrder,
  kTrailingBytes,
  kBadEntry,
};

const char* to_string(DecodeFault fault);

// Wire decoding failure; carries the byte offset where parsing stopped.
class DecodeError : public Error {
 public:
  DecodeError(DecodeFault fault, std::size_t offset, const std::string& detail);

  DecodeFault fault() const { return fault_; }
  std::size_t offset() const { return offset_; }

 private:
  DecodeFault fault_;
  std::size_t offset_;
};

class EncodeError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedproto
