#include "xlb/metrics.hpp"

namespace xlb {

FlowSnapshot& FlowSnapshot::operator+=(const FlowSnapshot& o) {
  tx_bytes += o.tx_bytes;
  rx_bytes += o.rx_bytes;
  request_count += o.request_count;
  no_route_match += o.no_route_match;
  orphan_responses += o.orphan_responses;
  return *this;
}

void FlowMetrics::record(FlowEvent event, std::uint64_t amount) {
  switch (event) {
    case FlowEvent::TxBytes: bump(tx_, amount); break;
    case FlowEvent::RxBytes: bump(rx_, amount); break;
    case FlowEvent::Request: bump(requests_, amount); break;
    case FlowEvent::NoRouteMatch: bump(no_route_, amount); break;
    case FlowEvent::OrphanResponse: bump(orphans_, amount); break;
  }
}

FlowSnapshot FlowMetrics::snapshot() const {
  FlowSnapshot s;
  s.conn_id = conn_id_;
  s.tx_bytes = tx_.load(std::memory_order_acquire);
  s.rx_bytes = rx_.load(std::memory_order_acquire);
  s.request_count = requests_.load(std::memory_order_acquire);
  s.no_route_match = no_route_.load(std::memory_order_acquire);
  s.orphan_responses = orphans_.load(std::memory_order_acquire);
  return s;
}

std::shared_ptr<FlowMetrics> MetricsRegistry::open_flow(std::uint64_t conn_id) {
  auto flow = std::make_shared<FlowMetrics>(conn_id);
  std::lock_guard lock(flows_mu_);
  flows_[conn_id] = flow;
  return flow;
}

void MetricsRegistry::retire_flow(std::uint64_t conn_id) {
  std::lock_guard lock(flows_mu_);
  auto it = flows_.find(conn_id);
  if (it == flows_.end()) return;
  retired_ += it->second->snapshot();
  flows_.erase(it);
}

ClusterCounters& MetricsRegistry::cluster(std::string_view name) {
  {
    std::shared_lock lock(clusters_mu_);
    if (auto it = clusters_.find(name); it != clusters_.end()) return *it->second;
  }
  std::unique_lock lock(clusters_mu_);
  auto [it, _] = clusters_.try_emplace(std::string(name), std::make_unique<ClusterCounters>());
  return *it->second;
}

std::vector<FlowSnapshot> MetricsRegistry::live_flows() const {
  std::lock_guard lock(flows_mu_);
  std::vector<FlowSnapshot> out;
  out.reserve(flows_.size());
  for (const auto& [_, f] : flows_) out.push_back(f->snapshot());
  return out;
}

FlowSnapshot MetricsRegistry::retired() const {
  std::lock_guard lock(flows_mu_);
  return retired_;
}

FlowSnapshot MetricsRegistry::totals() const {
  std::lock_guard lock(flows_mu_);
  FlowSnapshot sum = retired_;
  for (const auto& [_, f] : flows_) sum += f->snapshot();
  sum.conn_id = 0;
  return sum;
}

std::size_t MetricsRegistry::live_flow_count() const {
  std::lock_guard lock(flows_mu_);
  return flows_.size();
}

std::vector<ClusterTotals> MetricsRegistry::clusters() const {
  std::shared_lock lock(clusters_mu_);
  std::vector<ClusterTotals> out;
  for (const auto& [name, c] : clusters_) {
    out.push_back(ClusterTotals{name, c->requests.load(), c->tx_bytes.load(), c->rx_bytes.load(),
                                c->responses.load(), c->errors.load()});
  }
  return out;
}

}  // namespace xlb
