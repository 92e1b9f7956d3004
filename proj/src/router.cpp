#include "xlb/router.hpp"

#include "xlb/regex.hpp"

namespace xlb {

namespace {

std::optional<std::string> field_string(const NestedMapStore& store, const StoredString& s) {
  return store.load_string(s);
}

}  // namespace

bool rule_matches(MatchField field, std::string_view header, MatchKind kind, std::string_view value,
                  const Request& req) {
  FieldRef ref{field, std::string(header)};
  auto actual = get_field(req, ref);
  if (!actual) return false;
  switch (kind) {
    case MatchKind::Exact: return *actual == value;
    case MatchKind::Prefix: return actual->substr(0, value.size()) == value;
    case MatchKind::Regex:
      try {
        return cached_regex(value)->full_match(*actual);
      } catch (const RegexError&) {
        return false;
      }
  }
  return false;
}

std::optional<Indexed<FilterRecord>> match_filter(const NestedMapStore& store, const ListenerRecord& listener,
                                                  Protocol protocol) {
  const std::uint32_t n = std::min<std::uint32_t>(listener.filters.count, kFilterMaxNum);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto f = store.resolve_as<FilterRecord>(listener.filters.map, i);
    if (!f) continue;
    if (f->config_type == static_cast<std::uint8_t>(protocol)) return Indexed<FilterRecord>{i, *f};
  }
  return std::nullopt;
}

std::optional<Indexed<RouteRecord>> match_route(const NestedMapStore& store, const FilterRecord& filter,
                                                const Request& req, MatchOrder order) {
  std::optional<Indexed<RouteRecord>> found;
  const std::uint32_t n = std::min<std::uint32_t>(filter.routes.count, kRouteMaxNum);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto r = store.resolve_as<RouteRecord>(filter.routes.map, i);
    if (!r) continue;
    auto header = field_string(store, r->header);
    auto value = field_string(store, r->value);
    if (!header || !value) continue;
    if (rule_matches(static_cast<MatchField>(r->match_field), *header, static_cast<MatchKind>(r->match_kind),
                     *value, req)) {
      found = Indexed<RouteRecord>{i, *r};
      if (order == MatchOrder::First) break;
    }
  }
  return found;
}

std::optional<ListenerRecord> find_listener(const NestedMapStore& store, ListenerHandle& handle) {
  const MapId root = store.roots().listeners_root;
  auto name_is = [&](const ListenerRecord& rec) {
    auto name = store.load_string(rec.name);
    return name && *name == handle.name;
  };
  if (handle.slot_hint != kNoSlot) {
    if (auto rec = store.resolve_as<ListenerRecord>(root, handle.slot_hint); rec && name_is(*rec)) return rec;
  }
  auto info = store.map_info(root);
  for (std::uint32_t i = 0; info && i < info->high_water; ++i) {
    auto rec = store.resolve_as<ListenerRecord>(root, i);
    if (rec && name_is(*rec)) {
      handle.slot_hint = i;
      return rec;
    }
  }
  return std::nullopt;
}

std::optional<ClusterView> load_cluster(const NestedMapStore& store, std::uint32_t slot) {
  if (slot == kNoSlot) return std::nullopt;
  auto rec = store.resolve_as<ClusterRecord>(store.roots().clusters_root, slot);
  if (!rec) return std::nullopt;
  auto name = store.load_string(rec->name);
  if (!name) return std::nullopt;
  ClusterView view;
  view.name = std::move(*name);
  view.slot = slot;
  view.policy = static_cast<LbPolicy>(rec->policy);
  const std::uint32_t n = std::min<std::uint32_t>(rec->endpoints.count, kMaxEndpoints);
  view.endpoints.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto ep = store.resolve_as<EndpointRecord>(rec->endpoints.map, i);
    if (!ep) return std::nullopt;
    auto addr = store.load_string(ep->address);
    if (!addr) return std::nullopt;
    view.endpoints.push_back(Endpoint{std::move(*addr), ep->port, ep->weight});
  }
  return view;
}

std::optional<RouteDecision> Router::route(const Request& req, ListenerHandle& listener, FlowMetrics* flow) const {
  auto guard = store_.read_guard();
  auto no_route = [&]() -> std::optional<RouteDecision> {
    if (flow) flow->record(FlowEvent::NoRouteMatch);
    return std::nullopt;
  };

  const std::uint64_t version = store_.version();
  auto lrec = find_listener(store_, listener);
  if (!lrec) return no_route();
  auto filter = match_filter(store_, *lrec, req.protocol);
  if (!filter) return no_route();
  auto rule = match_route(store_, filter->record, req, order_);
  if (!rule) return no_route();
  auto cluster = load_cluster(store_, rule->record.cluster_slot);
  if (!cluster || cluster->endpoints.empty()) return no_route();

  RouteDecision d;
  d.listener = listener.name;
  d.filter_index = filter->index;
  d.matched_rule_index = rule->index;
  d.protocol = req.protocol;
  d.cluster = std::move(*cluster);
  d.version = version;
  return d;
}

}  // namespace xlb
