#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "xlb/metrics.hpp"

namespace xlb {
namespace {

TEST(Metrics, RecordRequests) {
  FlowMetrics flow(1);
  for (int i = 0; i < 3; ++i) record(flow, FlowEvent::Request);
  EXPECT_EQ(flow.snapshot().request_count, 3u);
}

TEST(Metrics, RecordBytes) {
  FlowMetrics flow(1);
  record(flow, FlowEvent::TxBytes, 10);
  record(flow, FlowEvent::TxBytes, 20);
  record(flow, FlowEvent::RxBytes, 5);
  auto s = flow.snapshot();
  EXPECT_EQ(s.tx_bytes, 30u);
  EXPECT_EQ(s.rx_bytes, 5u);
  EXPECT_EQ(s.conn_id, 1u);
}

TEST(Metrics, RetireFoldsIntoAggregate) {
  MetricsRegistry reg;
  auto a = reg.open_flow(1);
  auto b = reg.open_flow(2);
  a->record(FlowEvent::Request, 2);
  b->record(FlowEvent::NoRouteMatch);
  EXPECT_EQ(reg.live_flow_count(), 2u);
  reg.retire_flow(1);
  EXPECT_EQ(reg.live_flow_count(), 1u);
  EXPECT_EQ(reg.retired().request_count, 2u);
  auto t = reg.totals();
  EXPECT_EQ(t.request_count, 2u);
  EXPECT_EQ(t.no_route_match, 1u);
  reg.retire_flow(1);  // already gone
  EXPECT_EQ(reg.totals().request_count, 2u);
}

TEST(Metrics, ClusterCounters) {
  MetricsRegistry reg;
  reg.cluster("b").requests += 2;
  reg.cluster("a").errors += 1;
  auto all = reg.clusters();
  ASSERT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].name, "a");
  EXPECT_EQ(all[0].errors, 1u);
  EXPECT_EQ(all[1].requests, 2u);
}

// Each writer owns its flow; a concurrent reader samples totals, which must
// never decrease and must equal the independently tracked sum at the end.
TEST(MetricsProperty, AggregateEqualsSumOfFlows) {
  MetricsRegistry reg;
  constexpr int kFlows = 8;
  std::vector<std::uint64_t> expected_tx(kFlows), expected_req(kFlows);
  std::atomic<bool> done{false};
  std::thread reader([&] {
    std::uint64_t last = 0;
    while (!done.load()) {
      auto t = reg.totals();
      EXPECT_GE(t.tx_bytes, last);
      last = t.tx_bytes;
    }
  });
  std::vector<std::thread> writers;
  for (int f = 0; f < kFlows; ++f) {
    writers.emplace_back([&, f] {
      auto flow = reg.open_flow(static_cast<std::uint64_t>(f));
      std::mt19937 rng(f);
      for (int i = 0; i < 20000; ++i) {
        std::uint64_t n = rng() % 1000;
        flow->record(FlowEvent::TxBytes, n);
        flow->record(FlowEvent::Request);
        expected_tx[f] += n;
        ++expected_req[f];
      }
      if (f % 2 == 0) reg.retire_flow(static_cast<std::uint64_t>(f));
    });
  }
  for (auto& w : writers) w.join();
  done = true;
  reader.join();
  std::uint64_t tx = 0, req = 0;
  for (int f = 0; f < kFlows; ++f) {
    tx += expected_tx[f];
    req += expected_req[f];
  }
  auto t = reg.totals();
  EXPECT_EQ(t.tx_bytes, tx);
  EXPECT_EQ(t.request_count, req);
  FlowSnapshot summed = reg.retired();
  for (const auto& s : reg.live_flows()) summed += s;
  EXPECT_EQ(summed.tx_bytes, tx);
}

}  // namespace
}  // namespace xlb
