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

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedproto/aggregation.hpp"
#include "fedproto/config.hpp"
#include "fedproto/orchestrator.hpp"
#include "fedproto/wire.hpp"

namespace fedproto::transport {

// Frames are a u32 little-endian byte length followed by one encoded
// WireMessage.
class Connection {
 public:
  Connection() = default;
  explicit Connection(int fd) : fd_(fd) {}
  Connection(Connection&& other) noexcept;
  Connection& operator=(Connection&& other) noexcept;
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  ~Connection();

  static Connection connect(const std::string& host, std::uint16_t port);

  bool is_open() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  void close();

  void send(const wire::WireMessage& msg);
  // Blocks until a whole frame arrives. Throws NetworkError on EOF.
  wire::WireMessage receive();

 private:
  int fd_ = -1;
};

std::vector<std::uint8_t> frame(const wire::WireMessage& msg);

using LogFn = std::function<void(const std::string&)>;
void log_to_stderr(const std::string& line);

struct ServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  std::size_t expected_clients = 1;
  std::uint32_t rounds = 1;
  std::chrono::milliseconds round_timeout{30000};
  // Registration waits this long for the full roster; zero waits forever.
  std::chrono::milliseconds registration_timeout{0};
  AggregationMode policy = AggregationMode::kNormalizedMean;
  LogFn log = log_to_stderr;
};

ServerOptions server_options(const ExperimentConfig& config);

// Server-side view of a session. Client entries carry only participation;
// losses and accuracies stay with the clients.
struct ServerRun {
  std::vector<RoundRecord> rounds;  // rounds[0] is the bootstrap
  std::vector<ClientId> roster;     // ascending
  std::size_t rejected_registrations = 0;
};

class ServerEndpoint {
 public:
  explicit ServerEndpoint(ServerOptions options);
  ~ServerEndpoint();
  ServerEndpoint(const ServerEndpoint&) = delete;
  ServerEndpoint& operator=(const ServerEndpoint&) = delete;

  std::uint16_t port() const { return port_; }
  ServerRun run();

 private:
  ServerOptions options_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
};

// Runs one participant to completion. Returns its records for rounds 0..T.
// A rejected registration throws ProtocolError.
std::vector<ClientRoundRecord> run_remote_client(const std::string& host,
                                                 std::uint16_t port,
                                                 ClientState& client,
                                                 std::uint32_t rounds);

// Joins the server view with every client's records into the report an
// in-process run of the same configuration produces.
ExperimentReport assemble_report(const ExperimentConfig& config, const ServerRun& server,
                                 const std::vector<std::vector<ClientRoundRecord>>& clients);

// Artifacts written by separate server and client processes. Doubles are
// printed with round-trip precision, so a reload is exact.
std::string server_run_to_json(const ServerRun& run);
ServerRun server_run_from_json(const std::string& text);
std::string client_records_to_json(const std::vector<ClientRoundRecord>& records);
std::vector<ClientRoundRecord> client_records_from_json(const std::string& text);

}  // namespace fedproto::transport
