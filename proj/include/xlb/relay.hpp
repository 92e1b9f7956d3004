#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/asio/io_context.hpp>

#include "xlb/config.hpp"
#include "xlb/lb_policy.hpp"
#include "xlb/map_store.hpp"
#include "xlb/metrics.hpp"
#include "xlb/router.hpp"

namespace xlb {

struct RelayOptions {
  std::size_t min_per_endpoint = 1;
  std::size_t max_per_endpoint = 4;
  std::chrono::milliseconds dispatch_timeout{30000};
  // Every listener splices bytes to its next hop instead of balancing requests.
  bool sidecar = false;
  MatchOrder match_order = kDefaultMatchOrder;
};

class BindError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PoolEntryStats {
  std::string tenant_group;
  std::string endpoint;
  Protocol protocol = Protocol::Http11;
  std::size_t connections = 0;
  std::size_t ready = 0;
  std::size_t mapped = 0;  // request-map entries (in flight on the wire)
  std::size_t held = 0;    // hold-queue entries
  std::size_t max_held = 0;
};

struct RelayStats {
  std::vector<PoolEntryStats> pools;
  std::size_t client_connections = 0;
  std::size_t passthrough_connections = 0;
  std::uint64_t backend_connects = 0;
  std::uint64_t backend_failures = 0;
  std::uint64_t timeouts = 0;
  std::vector<std::pair<std::string, std::uint16_t>> listeners;  // name, bound port
};

class RelayContext;

// Data plane: listener acceptors, client connections (PS) and pooled backend
// connections (IS). All connection state lives on one io_context thread.
class Relay {
 public:
  Relay(boost::asio::io_context& io, NestedMapStore& store, LbState& lb, MetricsRegistry& metrics,
        RelayOptions options);
  ~Relay();

  Relay(const Relay&) = delete;
  Relay& operator=(const Relay&) = delete;

  // Binds every listener and pre-establishes pools. Call before running io.
  void start(const ConfigSnapshot& snap);

  // Call right before a thread starts running io. Until then cross-thread
  // calls run inline.
  void loop_started();

  // Thread-safe. Rebinds listeners and resizes pools for a newly applied
  // snapshot; returns once the io thread has done so.
  void reconcile(const ConfigSnapshot& snap);

  // Thread-safe; runs on the io thread.
  RelayStats stats();

  // Closes acceptors and every connection.
  void stop();

  const RelayOptions& options() const;

 private:
  std::shared_ptr<RelayContext> ctx_;
};

}  // namespace xlb
