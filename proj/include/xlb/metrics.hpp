#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

namespace xlb {

enum class FlowEvent { TxBytes, RxBytes, Request, NoRouteMatch, OrphanResponse };

struct FlowSnapshot {
  std::uint64_t conn_id = 0;
  std::uint64_t tx_bytes = 0;
  std::uint64_t rx_bytes = 0;
  std::uint64_t request_count = 0;
  std::uint64_t no_route_match = 0;
  std::uint64_t orphan_responses = 0;

  FlowSnapshot& operator+=(const FlowSnapshot& o);
};

// Counters of one client connection. Written only by the connection's own
// handler, so updates are plain load+store; readers see whole values.
class FlowMetrics {
 public:
  explicit FlowMetrics(std::uint64_t conn_id) : conn_id_(conn_id) {}

  void record(FlowEvent event, std::uint64_t amount = 1);
  FlowSnapshot snapshot() const;
  std::uint64_t conn_id() const { return conn_id_; }

 private:
  static void bump(std::atomic<std::uint64_t>& c, std::uint64_t n) {
    c.store(c.load(std::memory_order_relaxed) + n, std::memory_order_release);
  }

  std::uint64_t conn_id_;
  std::atomic<std::uint64_t> tx_{0}, rx_{0}, requests_{0}, no_route_{0}, orphans_{0};
};

inline void record(FlowMetrics& flow, FlowEvent event, std::uint64_t amount = 1) { flow.record(event, amount); }

struct ClusterCounters {
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> tx_bytes{0};
  std::atomic<std::uint64_t> rx_bytes{0};
  std::atomic<std::uint64_t> responses{0};
  std::atomic<std::uint64_t> errors{0};
};

struct ClusterTotals {
  std::string name;
  std::uint64_t requests = 0, tx_bytes = 0, rx_bytes = 0, responses = 0, errors = 0;
};

class MetricsRegistry {
 public:
  std::shared_ptr<FlowMetrics> open_flow(std::uint64_t conn_id);
  // Folds the flow into the retired aggregate and forgets it.
  void retire_flow(std::uint64_t conn_id);

  ClusterCounters& cluster(std::string_view name);

  std::vector<FlowSnapshot> live_flows() const;
  FlowSnapshot retired() const;
  // retired + every live flow, taken under one lock so no count is seen twice.
  FlowSnapshot totals() const;
  std::vector<ClusterTotals> clusters() const;
  std::size_t live_flow_count() const;

  // Process-level events that belong to no flow.
  std::atomic<std::uint64_t> orphan_responses{0};
  std::atomic<std::uint64_t> discarded_responses{0};  // owner connection gone
  std::atomic<std::uint64_t> relayed_requests{0};     // requests that crossed this process
  std::atomic<std::uint64_t> error_responses{0};      // locally generated 4xx/5xx

 private:
  mutable std::mutex flows_mu_;
  std::map<std::uint64_t, std::shared_ptr<FlowMetrics>> flows_;
  FlowSnapshot retired_;

  mutable std::shared_mutex clusters_mu_;
  std::map<std::string, std::unique_ptr<ClusterCounters>, std::less<>> clusters_;
};

}  // namespace xlb
