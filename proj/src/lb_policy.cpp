#include "xlb/lb_policy.hpp"

#include <algorithm>
#include <limits>

namespace xlb {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [0, bound) by multiply-high.
std::uint64_t scale(std::uint64_t x, std::uint64_t bound) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(x) * bound) >> 64);
}

bool all_unit_weights(std::span<const Endpoint> endpoints) {
  return std::all_of(endpoints.begin(), endpoints.end(), [](const Endpoint& e) { return e.weight == 1; });
}

}  // namespace

std::string EndpointKey::to_string() const {
  if (address.find(':') != std::string::npos) return "[" + address + "]:" + std::to_string(port);
  return address + ":" + std::to_string(port);
}

std::atomic<std::int64_t>& OutstandingTable::counter(const EndpointKey& key) {
  {
    std::shared_lock lock(mu_);
    if (auto it = counters_.find(key); it != counters_.end()) return *it->second;
  }
  std::unique_lock lock(mu_);
  auto [it, _] = counters_.try_emplace(key, std::make_unique<std::atomic<std::int64_t>>(0));
  return *it->second;
}

std::int64_t OutstandingTable::outstanding(const EndpointKey& key) const {
  std::shared_lock lock(mu_);
  auto it = counters_.find(key);
  return it == counters_.end() ? 0 : it->second->load(std::memory_order_acquire);
}

void OutstandingTable::on_dispatch(const EndpointKey& key) {
  counter(key).fetch_add(1, std::memory_order_acq_rel);
  dispatches_.fetch_add(1, std::memory_order_acq_rel);
}

bool OutstandingTable::on_complete(const EndpointKey& key) {
  auto& c = counter(key);
  std::int64_t cur = c.load(std::memory_order_acquire);
  while (cur > 0) {
    if (c.compare_exchange_weak(cur, cur - 1, std::memory_order_acq_rel)) {
      completions_.fetch_add(1, std::memory_order_acq_rel);
      return true;
    }
  }
  underflows_.fetch_add(1, std::memory_order_acq_rel);
  return false;
}

std::int64_t OutstandingTable::total_outstanding() const {
  std::shared_lock lock(mu_);
  std::int64_t sum = 0;
  for (const auto& [_, c] : counters_) sum += c->load(std::memory_order_acquire);
  return sum;
}

std::vector<std::pair<EndpointKey, std::int64_t>> OutstandingTable::all() const {
  std::shared_lock lock(mu_);
  std::vector<std::pair<EndpointKey, std::int64_t>> out;
  for (const auto& [k, c] : counters_) out.emplace_back(k, c->load(std::memory_order_acquire));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.address, a.first.port) < std::tie(b.first.address, b.first.port);
  });
  return out;
}

std::size_t ClusterBalancer::pick(std::span<const Endpoint> endpoints, OutstandingTable& table) {
  if (endpoints.empty()) throw EmptyCluster();
  switch (policy_) {
    case LbPolicy::RoundRobin: return pick_round_robin(endpoints);
    case LbPolicy::Random: return pick_random(endpoints);
    case LbPolicy::LeastRequest: return pick_least_request(endpoints, table);
  }
  return 0;
}

std::size_t ClusterBalancer::pick_round_robin(std::span<const Endpoint> endpoints) {
  if (all_unit_weights(endpoints)) {
    return cursor_.fetch_add(1, std::memory_order_relaxed) % endpoints.size();
  }
  // Smooth weighted round robin; state restarts when the endpoint set changes.
  std::lock_guard lock(mu_);
  if (!std::equal(endpoints.begin(), endpoints.end(), weighted_for_.begin(), weighted_for_.end())) {
    weighted_for_.assign(endpoints.begin(), endpoints.end());
    current_weights_.assign(endpoints.size(), 0);
  }
  std::int64_t total = 0;
  std::size_t best = 0;
  for (std::size_t i = 0; i < endpoints.size(); ++i) {
    current_weights_[i] += endpoints[i].weight;
    total += endpoints[i].weight;
    if (current_weights_[i] > current_weights_[best]) best = i;
  }
  current_weights_[best] -= total;
  return best;
}

std::size_t ClusterBalancer::pick_random(std::span<const Endpoint> endpoints) {
  std::uint64_t x = splitmix64(rng_.fetch_add(0x9e3779b97f4a7c15ULL, std::memory_order_relaxed));
  if (all_unit_weights(endpoints)) return scale(x, endpoints.size());
  std::uint64_t total = 0;
  for (const auto& e : endpoints) total += e.weight;
  std::uint64_t r = scale(x, total);
  for (std::size_t i = 0; i < endpoints.size(); ++i) {
    if (r < endpoints[i].weight) return i;
    r -= endpoints[i].weight;
  }
  return endpoints.size() - 1;
}

std::size_t ClusterBalancer::pick_least_request(std::span<const Endpoint> endpoints, OutstandingTable& table) {
  std::lock_guard lock(mu_);
  std::size_t best = 0;
  std::int64_t best_count = std::numeric_limits<std::int64_t>::max();
  for (std::size_t i = 0; i < endpoints.size(); ++i) {
    std::int64_t n = table.outstanding(key_of(endpoints[i]));
    if (n < best_count) {
      best = i;
      best_count = n;
    }
  }
  return best;
}

std::shared_ptr<ClusterBalancer> LbState::balancer(const std::string& cluster, LbPolicy policy) {
  {
    std::shared_lock lock(mu_);
    if (auto it = balancers_.find(cluster); it != balancers_.end() && it->second->policy() == policy) {
      return it->second;
    }
  }
  std::unique_lock lock(mu_);
  auto& slot = balancers_[cluster];
  if (!slot || slot->policy() != policy) {
    slot = std::make_shared<ClusterBalancer>(policy, seed_ ^ std::hash<std::string>{}(cluster));
  }
  return slot;
}

std::size_t LbState::pick(const std::string& cluster, LbPolicy policy, std::span<const Endpoint> endpoints) {
  return balancer(cluster, policy)->pick(endpoints, table_);
}

}  // namespace xlb
