#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xlb/config.hpp"

namespace xlb::bench {

struct BackendOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  std::chrono::microseconds think_time{0};
  long response_bytes = -1;  // -1 echoes the request body
  std::string name;          // returned in x-backend
};

struct BackendStats {
  std::uint64_t connections = 0;
  std::uint64_t requests = 0;
  std::uint64_t http11_overlaps = 0;   // a second HTTP/1.1 request arrived before the response went out
  std::uint64_t mux_duplicates = 0;    // a Mux id reused while still in flight
  std::uint64_t max_http11_in_flight = 0;
  std::uint64_t max_mux_in_flight = 0;
  std::uint64_t rx_bytes = 0;
  std::uint64_t tx_bytes = 0;

  std::uint64_t violations() const { return http11_overlaps + mux_duplicates; }
};

// Echo server speaking HTTP/1.1 and Mux on the same port. Replies carry the
// request's x-nonce header back plus the stream id the backend saw.
class EchoBackend {
 public:
  explicit EchoBackend(BackendOptions options);
  ~EchoBackend();

  // Called on the server thread for every violation.
  std::function<void(const std::string&)> on_violation;

  void start();
  void stop();
  std::uint16_t port() const;
  BackendStats stats() const;

  struct Impl;

 private:
  std::shared_ptr<Impl> impl_;
};

struct LoadOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::size_t connections = 1;
  std::size_t payload_bytes = 0;
  Protocol protocol = Protocol::Http11;
  std::size_t streams = 1;  // concurrent requests per Mux connection
  std::chrono::milliseconds duration{0};
  std::chrono::milliseconds warmup{0};
  std::uint64_t requests_per_connection = 0;  // stops a connection early when nonzero
  double rate = 0;                            // total requests/s cap, 0 for closed loop only
  std::vector<std::string> paths{"/"};
  bool expect_echo = true;  // response body must equal the request body
  std::chrono::milliseconds drain_timeout{5000};
};

struct LoadReport {
  std::uint64_t requests = 0;  // completed with 2xx inside the measured window
  std::uint64_t completed = 0;  // every response, including warmup
  std::uint64_t errors = 0;
  std::uint64_t mismatches = 0;  // response not matching its own request
  std::uint64_t connect_failures = 0;
  double elapsed_s = 0;
  double throughput_rps = 0;
  double mean_us = 0;
  double p50_us = 0;
  double p99_us = 0;
  std::uint64_t tx_bytes = 0;  // bytes written to the target
  std::uint64_t rx_bytes = 0;  // bytes read from the target
  std::map<int, std::uint64_t> statuses;
};

LoadReport run_load(const LoadOptions& options);

// Spawned child process; killed and reaped on destruction.
class Process {
 public:
  Process(std::vector<std::string> argv, const std::filesystem::path& log);
  ~Process();
  Process(const Process&) = delete;
  Process& operator=(const Process&) = delete;

  int pid() const { return pid_; }
  bool alive();
  // Sends SIGTERM and waits; returns the exit status or -signal.
  int terminate();

 private:
  int pid_ = -1;
  int status_ = 0;
  bool reaped_ = false;
};

std::uint16_t free_port();
bool wait_for_port(std::uint16_t port, std::chrono::milliseconds timeout);

struct ScenarioOptions {
  std::string name = "compare";  // connections | payload | chain | services | compare
  std::vector<std::string> modes{"inline", "sidecar"};
  std::vector<long> params;  // sweep points; empty uses the scenario default
  std::chrono::milliseconds duration{5000};
  std::chrono::milliseconds warmup{500};
  std::size_t connections = 8;
  std::size_t payload_bytes = 0;
  std::size_t chain_length = 1;
  Protocol protocol = Protocol::Http11;
  std::chrono::microseconds think_time{0};
  std::string xlbd_path;
  std::string bench_path;
  std::filesystem::path workdir;
};

struct HopCounters {
  std::uint64_t relayed_requests = 0;  // summed over every daemon in the path
  std::uint64_t dispatches = 0;
  std::uint64_t completions = 0;
  std::uint64_t flow_tx_bytes = 0;  // entry daemon, bytes sent to clients
  std::uint64_t flow_rx_bytes = 0;  // entry daemon, bytes read from clients
  std::uint64_t client_errors = 0;
};

struct ScenarioRow {
  std::string scenario;
  std::string mode;
  long param = 0;
  LoadReport report;
  HopCounters hops;
  std::size_t daemons = 0;
};

std::vector<ScenarioRow> run_scenario(const ScenarioOptions& options);

std::string csv_header();
std::string csv_row(const ScenarioRow& row);
std::string summary_line(const ScenarioRow& row);

// Config document for one relay hop forwarding every request to `next`.
std::string hop_config(std::uint16_t listen_port, const std::vector<std::uint16_t>& next, Protocol protocol,
                       const std::vector<std::string>& service_paths = {});

}  // namespace xlb::bench
