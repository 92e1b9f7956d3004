#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xlb/codec.hpp"
#include "xlb/config.hpp"
#include "xlb/map_store.hpp"
#include "xlb/metrics.hpp"

#ifndef XLB_DEFAULT_MATCH_ORDER_LAST
#define XLB_DEFAULT_MATCH_ORDER_LAST 0
#endif

namespace xlb {

// First match follows the loop-and-break rule walk; Last keeps scanning and
// lets the final matching rule decide.
enum class MatchOrder { First, Last };

inline constexpr MatchOrder kDefaultMatchOrder =
    XLB_DEFAULT_MATCH_ORDER_LAST ? MatchOrder::Last : MatchOrder::First;

struct ClusterView {
  std::string name;
  std::uint32_t slot = kNoSlot;
  LbPolicy policy = LbPolicy::RoundRobin;
  std::vector<Endpoint> endpoints;
};

struct RouteDecision {
  std::string listener;
  std::uint32_t filter_index = 0;
  std::uint32_t matched_rule_index = 0;
  Protocol protocol = Protocol::Http11;
  ClusterView cluster;
  std::uint64_t version = 0;
};

// Cached location of a listener in the listeners root map.
struct ListenerHandle {
  std::string name;
  std::uint32_t slot_hint = kNoSlot;
};

template <class R>
struct Indexed {
  std::uint32_t index;
  R record;
};

/// First filter (in configured order) whose type equals `protocol`, scanning
/// at most kFilterMaxNum records.
std::optional<Indexed<FilterRecord>> match_filter(const NestedMapStore& store, const ListenerRecord& listener,
                                                  Protocol protocol);

/// Scans at most kRouteMaxNum rules of `filter` against the request.
std::optional<Indexed<RouteRecord>> match_route(const NestedMapStore& store, const FilterRecord& filter,
                                                const Request& req, MatchOrder order = kDefaultMatchOrder);

bool rule_matches(MatchField field, std::string_view header, MatchKind kind, std::string_view value,
                  const Request& req);

std::optional<ListenerRecord> find_listener(const NestedMapStore& store, ListenerHandle& handle);
std::optional<ClusterView> load_cluster(const NestedMapStore& store, std::uint32_t slot);

class Router {
 public:
  explicit Router(const NestedMapStore& store, MatchOrder order = kDefaultMatchOrder)
      : store_(store), order_(order) {}

  /// Walks listener -> filter -> route -> cluster under one read guard.
  /// Returns nullopt for NoRoute and counts it on `flow` when given.
  std::optional<RouteDecision> route(const Request& req, ListenerHandle& listener,
                                     FlowMetrics* flow = nullptr) const;

  MatchOrder match_order() const { return order_; }

 private:
  const NestedMapStore& store_;
  MatchOrder order_;
};

}  // namespace xlb
