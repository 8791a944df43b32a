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


#include "fedproto/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <iostream>
#include <map>
#include <optional>

#include "fedproto/error.hpp"
#include "json.hpp"

namespace fedproto::transport {

namespace {

constexpr std::size_t kMaxFrame = std::size_t{1} << 28;

using Clock = std::chrono::steady_clock;

std::string sys_error(const std::string& what) {
  return what + ": " + std::strerror(errno);
}

void send_all(int fd, const std::uint8_t* data, std::size_t size) {
  while (size > 0) {
    const ssize_t n = ::send(fd, data, size, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetworkError(sys_error("send"));
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

void recv_all(int fd, std::uint8_t* data, std::size_t size) {
  while (size > 0) {
    const ssize_t n = ::recv(fd, data, size, 0);
    if (n == 0) throw NetworkError("connection closed by peer");
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetworkError(sys_error("recv"));
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

std::uint32_t read_u32le(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

addrinfo* resolve(const std::string& host, std::uint16_t port, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(),
                               &hints, &res);
  if (rc != 0) throw NetworkError("cannot resolve '" + host + "': " + gai_strerror(rc));
  return res;
}

// Incremental frame parser for the server's non-blocking reads.
struct FrameReader {
  std::vector<std::uint8_t> buffer;

  // False once the peer has closed or errored.
  bool pump(int fd) {
    std::uint8_t chunk[4096];
    for (;;) {
      const ssize_t n = ::recv(fd, chunk, sizeof chunk, MSG_DONTWAIT);
      if (n > 0) {
        buffer.insert(buffer.end(), chunk, chunk + n);
        continue;
      }
      if (n == 0) return false;
      if (errno == EINTR) continue;
      return errno == EAGAIN || errno == EWOULDBLOCK;
    }
  }

  std::optional<std::vector<std::uint8_t>> next() {
    if (buffer.size() < 4) return std::nullopt;
    const std::size_t len = read_u32le(buffer.data());
    if (len > kMaxFrame) throw ProtocolError("frame length " + std::to_string(len) + " too large");
    if (buffer.size() < 4 + len) return std::nullopt;
    std::vector<std::uint8_t> out(buffer.begin() + 4, buffer.begin() + 4 + static_cast<std::ptrdiff_t>(len));
    buffer.erase(buffer.begin(), buffer.begin() + 4 + static_cast<std::ptrdiff_t>(len));
    return out;
  }
};

struct Peer {
  Connection conn;
  FrameReader reader;
  ClientId id = 0;
  std::vector<ClassId> class_space;
  bool registered = false;
};

wire::WireMessage message(wire::MessageKind kind, std::uint32_t round, ClientId id) {
  wire::WireMessage m;
  m.kind = kind;
  m.round = round;
  m.client_id = id;
  return m;
}

int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  return static_cast<int>(std::max<long long>(0, left.count()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Connection

Connection::Connection(Connection&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Connection& Connection::operator=(Connection&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

Connection::~Connection() { close(); }

void Connection::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Connection Connection::connect(const std::string& host, std::uint16_t port) {
  addrinfo* res = resolve(host, port, false);
  std::string last = "no address";
  for (addrinfo* a = res; a != nullptr; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) {
      last = sys_error("socket");
      continue;
    }
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return Connection(fd);
    }
    last = sys_error("connect");
    ::close(fd);
  }
  ::freeaddrinfo(res);
  throw NetworkError("cannot reach " + host + ":" + std::to_string(port) + " (" + last + ")");
}

std::vector<std::uint8_t> frame(const wire::WireMessage& msg) {
  const auto body = wire::encode(msg);
  std::vector<std::uint8_t> out(4 + body.size());
  const auto len = static_cast<std::uint32_t>(body.size());
  for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (8 * i));
  std::copy(body.begin(), body.end(), out.begin() + 4);
  return out;
}

void Connection::send(const wire::WireMessage& msg) {
  if (fd_ < 0) throw NetworkError("send on closed connection");
  const auto bytes = frame(msg);
  send_all(fd_, bytes.data(), bytes.size());
}

wire::WireMessage Connection::receive() {
  if (fd_ < 0) throw NetworkError("receive on closed connection");
  std::uint8_t head[4];
  recv_all(fd_, head, 4);
  const std::size_t len = read_u32le(head);
  if (len > kMaxFrame) throw ProtocolError("frame length " + std::to_string(len) + " too large");
  std::vector<std::uint8_t> body(len);
  recv_all(fd_, body.data(), len);
  return wire::decode(body);
}

void log_to_stderr(const std::string& line) { std::cerr << line << '\n'; }

ServerOptions server_options(const ExperimentConfig& config) {
  ServerOptions o;
  o.host = config.host;
  o.port = config.port;
  o.expected_clients = config.expected_clients;
  o.rounds = static_cast<std::uint32_t>(config.rounds);
  o.round_timeout = std::chrono::milliseconds(config.round_timeout_ms);
  o.policy = config.aggregation;
  return o;
}

// ---------------------------------------------------------------------------
// Server

ServerEndpoint::ServerEndpoint(ServerOptions options) : options_(std::move(options)) {
  if (options_.expected_clients == 0) throw InputError("expected_clients must be at least 1");
  if (!options_.log) options_.log = [](const std::string&) {};
  addrinfo* res = resolve(options_.host, options_.port, true);
  listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (listen_fd_ < 0) {
    ::freeaddrinfo(res);
    throw NetworkError(sys_error("socket"));
  }
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0) {
    const std::string msg = sys_error("bind " + options_.host + ":" + std::to_string(options_.port));
    ::freeaddrinfo(res);
    ::close(listen_fd_);
    throw NetworkError(msg);
  }
  ::freeaddrinfo(res);
  if (::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    throw NetworkError(sys_error("listen"));
  }
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

ServerEndpoint::~ServerEndpoint() {
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

ServerRun ServerEndpoint::run() {
  const auto& log = options_.log;
  ServerRun out;
  std::vector<Peer> pending;
  std::map<ClientId, Peer> peers;

  // Registration.
  const auto reg_deadline = options_.registration_timeout.count() > 0
                                ? std::optional(Clock::now() + options_.registration_timeout)
                                : std::nullopt;
  while (peers.size() < options_.expected_clients) {
    std::vector<pollfd> fds{{listen_fd_, POLLIN, 0}};
    for (auto& p : pending) fds.push_back({p.conn.fd(), POLLIN, 0});
    const int wait = reg_deadline ? remaining_ms(*reg_deadline) : -1;
    if (reg_deadline && wait == 0) {
      throw NetworkError("registration timed out with " + std::to_string(peers.size()) + " of " +
                         std::to_string(options_.expected_clients) + " clients");
    }
    if (::poll(fds.data(), fds.size(), wait) < 0 && errno != EINTR) {
      throw NetworkError(sys_error("poll"));
    }
    if (fds[0].revents & POLLIN) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd >= 0) {
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        pending.push_back(Peer{Connection(fd), {}, 0, {}, false});
      }
    }
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (fds.size() <= i + 1 || !(fds[i + 1].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      Peer& p = pending[i];
      const bool alive = p.reader.pump(p.conn.fd());
      try {
        if (auto bytes = p.reader.next()) {
          const auto msg = wire::decode(*bytes);
          if (msg.kind != wire::MessageKind::kRegister) {
            throw ProtocolError("expected REGISTER");
          }
          if (peers.count(msg.client_id) != 0) {
            log("registration: client id " + std::to_string(msg.client_id) +
                " already taken, rejected");
            p.conn.send(message(wire::MessageKind::kAck, wire::kRejectRound, 0));
            ++out.rejected_registrations;
            p.conn.close();
          } else {
            p.id = msg.client_id;
            p.class_space = msg.registered_classes;
            p.registered = true;
            p.conn.send(message(wire::MessageKind::kAck, 0, 0));
          }
          continue;
        }
      } catch (const Error& e) {
        log(std::string("registration: dropping connection: ") + e.what());
        p.conn.close();
        continue;
      }
      if (!alive) p.conn.close();
    }
    for (auto& p : pending) {
      if (p.registered && peers.size() < options_.expected_clients) {
        const ClientId id = p.id;
        peers.emplace(id, std::move(p));
      }
    }
    std::erase_if(pending, [](const Peer& p) { return p.registered || !p.conn.is_open(); });
  }
  pending.clear();
  for (const auto& [id, _] : peers) out.roster.push_back(id);

  PrototypeSet global;
  for (std::uint32_t round = 0; round <= options_.rounds + 1; ++round) {
    const bool final = round == options_.rounds + 1;
    const auto start = Clock::now();
    RoundRecord rec;
    rec.round = round;
    std::map<ClientId, std::string> failed;

    for (auto& [id, p] : peers) {
      if (!p.conn.is_open()) {
        failed[id] = "disconnected";
        continue;
      }
      auto msg = message(wire::MessageKind::kGlobal, round, 0);
      if (round > 0) msg.body = wire::quantize(global.restricted_to(p.class_space));
      try {
        p.conn.send(msg);
        if (!final) rec.params_down += payload_params(msg.body);
      } catch (const NetworkError& e) {
        log("round " + std::to_string(round) + ": client " + std::to_string(id) + " lost: " + e.what());
        p.conn.close();
        failed[id] = "disconnected";
      }
    }

    // Barrier: wait for one reply per live client or the deadline.
    std::map<ClientId, PrototypeSet> uploads;
    auto waiting = [&] {
      std::size_t n = 0;
      for (const auto& [id, p] : peers) {
        n += p.conn.is_open() && !uploads.count(id) && !failed.count(id);
      }
      return n;
    };
    const auto deadline = start + options_.round_timeout;
    while (waiting() > 0) {
      std::vector<pollfd> fds;
      std::vector<ClientId> ids;
      for (auto& [id, p] : peers) {
        if (p.conn.is_open() && !uploads.count(id) && !failed.count(id)) {
          fds.push_back({p.conn.fd(), POLLIN, 0});
          ids.push_back(id);
        }
      }
      const int wait = remaining_ms(deadline);
      if (wait == 0) break;
      if (::poll(fds.data(), fds.size(), wait) < 0 && errno != EINTR) {
        throw NetworkError(sys_error("poll"));
      }
      for (std::size_t i = 0; i < fds.size(); ++i) {
        if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
        const ClientId id = ids[i];
        Peer& p = peers.at(id);
        const bool alive = p.reader.pump(p.conn.fd());
        try {
          while (auto bytes = p.reader.next()) {
            const auto msg = wire::decode(*bytes);
            if (msg.round != round) {
              log("round " + std::to_string(round) + ": discarding stale message for round " +
                  std::to_string(msg.round) + " from client " + std::to_string(id));
              continue;
            }
            if (msg.kind == wire::MessageKind::kAck) {
              if (!final) failed[id] = "client reported failure";
              else uploads[id];
            } else if (msg.kind == wire::MessageKind::kUpload && !final) {
              uploads[id] = msg.body;
            } else {
              throw ProtocolError("unexpected message kind");
            }
            break;
          }
        } catch (const Error& e) {
          log("round " + std::to_string(round) + ": client " + std::to_string(id) + ": " + e.what());
          p.conn.close();
          failed[id] = e.what();
          continue;
        }
        if (!alive && !uploads.count(id) && !failed.count(id)) {
          p.conn.close();
          failed[id] = "disconnected";
        }
      }
    }
    if (final) break;

    std::vector<PrototypeUpload> ok;
    for (auto& [id, p] : peers) {
      ClientRoundRecord c;
      c.client = id;
      if (auto it = uploads.find(id); it != uploads.end()) {
        rec.params_up += payload_params(it->second);
        ok.push_back({id, std::move(it->second)});
      } else {
        c.ok = false;
        if (auto f = failed.find(id); f != failed.end()) {
          c.error = f->second;
        } else {
          c.error = "timed out";
          log("round " + std::to_string(round) + ": client " + std::to_string(id) +
              " excluded after " + std::to_string(options_.round_timeout.count()) +
              " ms timeout");
        }
      }
      rec.clients.push_back(std::move(c));
    }
    if (!ok.empty()) {
      const PrototypeSet agg = aggregate_prototypes(ok, options_.policy);
      for (const auto& [cls, p] : agg) global.insert_or_assign(cls, p.vector, p.count);
    }
    rec.global_prototypes = global;
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    out.rounds.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client

std::vector<ClientRoundRecord> run_remote_client(const std::string& host, std::uint16_t port,
                                                 ClientState& client, std::uint32_t rounds) {
  Connection conn = Connection::connect(host, port);
  auto reg = message(wire::MessageKind::kRegister, 0, client.id);
  reg.registered_classes = client.shard.class_space;
  conn.send(reg);
  const auto ack = conn.receive();
  if (ack.kind != wire::MessageKind::kAck) throw ProtocolError("expected ACK after REGISTER");
  if (ack.round == wire::kRejectRound) {
    throw ProtocolError("registration rejected: client id " + std::to_string(client.id) +
                        " already registered");
  }

  std::vector<ClientRoundRecord> records(rounds + 1);
  for (auto& r : records) r.client = client.id;
  for (;;) {
    const auto msg = conn.receive();
    if (msg.kind != wire::MessageKind::kGlobal) throw ProtocolError("expected GLOBAL");
    const std::uint32_t round = msg.round;
    if (round > rounds + 1) throw ProtocolError("round " + std::to_string(round) + " beyond schedule");
    for (ClassId id : msg.body.class_ids()) {
      if (!std::binary_search(client.shard.class_space.begin(), client.shard.class_space.end(), id)) {
        throw ProtocolError("server sent class " + std::to_string(id) + " outside class space");
      }
    }
    if (round > 0 && records[round - 1].ok) {
      try {
        fill_evaluation(records[round - 1], client, msg.body);
      } catch (const Error& e) {
        records[round - 1].ok = false;
        records[round - 1].error = e.what();
      }
    }
    if (round == rounds + 1) {
      conn.send(message(wire::MessageKind::kAck, round, client.id));
      break;
    }
    auto up = message(wire::MessageKind::kUpload, round, client.id);
    try {
      if (round == 0) {
        up.body = bootstrap_prototypes(client);
      } else {
        const LocalUpdateResult res = local_update(client, msg.body, round);
        fill_training(records[round], res);
        up.body = res.prototypes;
      }
    } catch (const Error& e) {
      records[round].ok = false;
      records[round].error = e.what();
      conn.send(message(wire::MessageKind::kAck, round, client.id));
      continue;
    }
    conn.send(up);
  }
  return records;
}

ExperimentReport assemble_report(const ExperimentConfig& config, const ServerRun& server,
                                 const std::vector<std::vector<ClientRoundRecord>>& clients) {
  std::map<ClientId, const std::vector<ClientRoundRecord>*> by_id;
  for (const auto& c : clients) {
    if (!c.empty()) by_id[c.front().client] = &c;
  }
  ExperimentReport report;
  ExperimentConfig echo = config;
  echo.lambdas = {config.lambda()};
  report.config_echo = echo_config(echo);
  report.method = config.method;
  report.lambda = config.lambda();
  for (const auto& sr : server.rounds) {
    RoundRecord r = sr;
    for (auto& c : r.clients) {
      if (!c.ok) continue;
      const auto it = by_id.find(c.client);
      if (it == by_id.end() || sr.round >= it->second->size()) {
        c.ok = false;
        c.error = "no client record";
        continue;
      }
      c = (*it->second)[sr.round];
    }
    report.total_params_up += r.params_up;
    report.total_params_down += r.params_down;
    report.rounds.push_back(std::move(r));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

using nlohmann::ordered_json;

ordered_json parts_to_json(const LossParts& p) {
  return {{"loss", p.total}, {"supervised", p.supervised}, {"regularizer", p.regularizer}};
}

LossParts parts_from_json(const ordered_json& j) {
  LossParts p;
  p.total = j.at("loss").get<double>();
  p.supervised = j.at("supervised").get<double>();
  p.regularizer = j.at("regularizer").get<double>();
  return p;
}

ordered_json prototypes_to_json(const PrototypeSet& set) {
  ordered_json out = ordered_json::array();
  for (const auto& [id, p] : set) {
    out.push_back({{"class", id}, {"count", p.count}, {"vector", p.vector}});
  }
  return out;
}

PrototypeSet prototypes_from_json(const ordered_json& j) {
  PrototypeSet set;
  for (const auto& e : j) {
    set.insert(e.at("class").get<ClassId>(), e.at("vector").get<std::vector<double>>(),
               e.at("count").get<std::uint64_t>());
  }
  return set;
}

ordered_json record_to_json(const ClientRoundRecord& c) {
  ordered_json j;
  j["client_id"] = c.client;
  j["ok"] = c.ok;
  j["error"] = c.error;
  j["train"] = parts_to_json(c.train);
  if (c.half_step) j["half_step"] = parts_to_json(*c.half_step);
  if (c.after) j["after"] = parts_to_json(*c.after);
  j["grad_sq_norms"] = c.grad_sq_norms;
  j["acc_prototype"] = c.acc_prototype;
  j["acc_decision"] = c.acc_decision;
  return j;
}

ClientRoundRecord record_from_json(const ordered_json& j) {
  ClientRoundRecord c;
  c.client = j.at("client_id").get<ClientId>();
  c.ok = j.at("ok").get<bool>();
  c.error = j.at("error").get<std::string>();
  c.train = parts_from_json(j.at("train"));
  if (j.contains("half_step")) c.half_step = parts_from_json(j.at("half_step"));
  if (j.contains("after")) c.after = parts_from_json(j.at("after"));
  c.grad_sq_norms = j.at("grad_sq_norms").get<std::vector<double>>();
  c.acc_prototype = j.at("acc_prototype").get<double>();
  c.acc_decision = j.at("acc_decision").get<double>();
  return c;
}

template <typename F>
auto parse_artifact(const std::string& text, const char* what, F&& body) {
  try {
    return body(ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string server_run_to_json(const ServerRun& run) {
  ordered_json doc;
  doc["roster"] = run.roster;
  doc["rejected_registrations"] = run.rejected_registrations;
  ordered_json rounds = ordered_json::array();
  for (const auto& r : run.rounds) {
    ordered_json jr;
    jr["round"] = r.round;
    jr["params_up"] = r.params_up;
    jr["params_down"] = r.params_down;
    ordered_json clients = ordered_json::array();
    for (const auto& c : r.clients) {
      clients.push_back({{"client_id", c.client}, {"ok", c.ok}, {"error", c.error}});
    }
    jr["clients"] = std::move(clients);
    jr["global_prototypes"] = prototypes_to_json(r.global_prototypes);
    rounds.push_back(std::move(jr));
  }
  doc["rounds"] = std::move(rounds);
  return doc.dump(2) + "\n";
}

ServerRun server_run_from_json(const std::string& text) {
  return parse_artifact(text, "server run", [](const ordered_json& doc) {
    ServerRun run;
    run.roster = doc.at("roster").get<std::vector<ClientId>>();
    run.rejected_registrations = doc.at("rejected_registrations").get<std::size_t>();
    for (const auto& jr : doc.at("rounds")) {
      RoundRecord r;
      r.round = jr.at("round").get<std::uint32_t>();
      r.params_up = jr.at("params_up").get<std::uint64_t>();
      r.params_down = jr.at("params_down").get<std::uint64_t>();
      for (const auto& jc : jr.at("clients")) {
        ClientRoundRecord c;
        c.client = jc.at("client_id").get<ClientId>();
        c.ok = jc.at("ok").get<bool>();
        c.error = jc.at("error").get<std::string>();
        r.clients.push_back(std::move(c));
      }
      r.global_prototypes = prototypes_from_json(jr.at("global_prototypes"));
      run.rounds.push_back(std::move(r));
    }
    return run;
  });
}

std::string client_records_to_json(const std::vector<ClientRoundRecord>& records) {
  ordered_json doc = ordered_json::array();
  for (const auto& c : records) doc.push_back(record_to_json(c));
  return doc.dump(2) + "\n";
}

std::vector<ClientRoundRecord> client_records_from_json(const std::string& text) {
  return parse_artifact(text, "client records", [](const ordered_json& doc) {
    std::vector<ClientRoundRecord> out;
    for (const auto& j : doc) out.push_back(record_from_json(j));
    return out;
  });
}

}  // namespace fedproto::transport
