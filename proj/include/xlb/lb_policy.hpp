#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "xlb/config.hpp"

namespace xlb {

struct EndpointKey {
  std::string address;
  std::uint16_t port = 0;

  bool operator==(const EndpointKey&) const = default;
  std::string to_string() const;
};

struct EndpointKeyHash {
  std::size_t operator()(const EndpointKey& k) const noexcept {
    return std::hash<std::string>{}(k.address) * 31 + k.port;
  }
};

inline EndpointKey key_of(const Endpoint& e) { return EndpointKey{e.address, e.port}; }

class EmptyCluster : public std::logic_error {
 public:
  EmptyCluster() : std::logic_error("pick from a cluster without endpoints") {}
};

// Outstanding-request counters per endpoint instance, shared by every
// cluster that lists the endpoint.
class OutstandingTable {
 public:
  std::int64_t outstanding(const EndpointKey& key) const;
  void on_dispatch(const EndpointKey& key);
  // Returns false (and counts an underflow) when there was nothing to complete.
  bool on_complete(const EndpointKey& key);

  std::uint64_t dispatches() const { return dispatches_.load(); }
  std::uint64_t completions() const { return completions_.load(); }
  std::uint64_t underflows() const { return underflows_.load(); }
  std::int64_t total_outstanding() const;
  std::vector<std::pair<EndpointKey, std::int64_t>> all() const;

  std::atomic<std::int64_t>& counter(const EndpointKey& key);

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<EndpointKey, std::unique_ptr<std::atomic<std::int64_t>>, EndpointKeyHash> counters_;
  std::atomic<std::uint64_t> dispatches_{0}, completions_{0}, underflows_{0};
};

class ClusterBalancer {
 public:
  ClusterBalancer(LbPolicy policy, std::uint64_t seed) : policy_(policy), rng_(seed) {}

  LbPolicy policy() const { return policy_; }

  // Index into `endpoints`. Throws EmptyCluster when there is nothing to pick.
  std::size_t pick(std::span<const Endpoint> endpoints, OutstandingTable& table);

 private:
  std::size_t pick_round_robin(std::span<const Endpoint> endpoints);
  std::size_t pick_random(std::span<const Endpoint> endpoints);
  std::size_t pick_least_request(std::span<const Endpoint> endpoints, OutstandingTable& table);

  LbPolicy policy_;
  std::atomic<std::uint64_t> cursor_{0};
  std::atomic<std::uint64_t> rng_;

  std::mutex mu_;  // smooth-weighted RR state and least-request scans
  std::vector<std::int64_t> current_weights_;
  std::vector<Endpoint> weighted_for_;
};

// Load-balancing state of a running snapshot: one balancer per cluster name
// plus the shared outstanding table.
class LbState {
 public:
  explicit LbState(std::uint64_t seed = 0x5eed) : seed_(seed) {}

  std::size_t pick(const std::string& cluster, LbPolicy policy, std::span<const Endpoint> endpoints);
  void on_dispatch(const EndpointKey& key) { table_.on_dispatch(key); }
  bool on_complete(const EndpointKey& key) { return table_.on_complete(key); }

  OutstandingTable& outstanding() { return table_; }
  const OutstandingTable& outstanding() const { return table_; }

 private:
  std::shared_ptr<ClusterBalancer> balancer(const std::string& cluster, LbPolicy policy);

  std::uint64_t seed_;
  std::shared_mutex mu_;
  std::unordered_map<std::string, std::shared_ptr<ClusterBalancer>> balancers_;
  OutstandingTable table_;
};

}  // namespace xlb
