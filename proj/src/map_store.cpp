#include "xlb/map_store.hpp"

#include <algorithm>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace xlb {

namespace {

thread_local std::uint64_t t_resolve_calls = 0;

constexpr std::uint32_t kSegmentSize = 64;

}  // namespace

std::string_view to_string(RecordKind k) {
  switch (k) {
    case RecordKind::Listener: return "listener";
    case RecordKind::Filter: return "filter";
    case RecordKind::Route: return "route";
    case RecordKind::Cluster: return "cluster";
    case RecordKind::Endpoint: return "endpoint";
    case RecordKind::StringChunk: return "string";
    case RecordKind::LbState: return "lb_state";
    case RecordKind::Metrics: return "metrics";
  }
  return "?";
}

std::size_t entry_size_of(RecordKind k) {
  switch (k) {
    case RecordKind::Listener: return sizeof(ListenerRecord);
    case RecordKind::Filter: return sizeof(FilterRecord);
    case RecordKind::Route: return sizeof(RouteRecord);
    case RecordKind::Cluster: return sizeof(ClusterRecord);
    case RecordKind::Endpoint: return sizeof(EndpointRecord);
    case RecordKind::StringChunk: return sizeof(StringChunk);
    case RecordKind::LbState:
    case RecordKind::Metrics: return sizeof(std::uint64_t);
  }
  return 0;
}

// Fixed-capacity index -> record table. Slots hold pointers to immutable
// record buffers; only the writer stores, readers load with acquire.
class InnerMap {
 public:
  InnerMap(MapId id, RecordKind kind, std::uint32_t capacity)
      : id_(id),
        kind_(kind),
        entry_size_(static_cast<std::uint32_t>(entry_size_of(kind))),
        capacity_(capacity),
        segments_((capacity + kSegmentSize - 1) / kSegmentSize) {}

  ~InnerMap() {
    for (auto& seg : segments_) {
      Segment* s = seg.load(std::memory_order_relaxed);
      if (!s) continue;
      for (auto& slot : s->slots) delete[] slot.load(std::memory_order_relaxed);
      delete s;
    }
  }

  InnerMap(const InnerMap&) = delete;
  InnerMap& operator=(const InnerMap&) = delete;

  MapId id() const { return id_; }
  RecordKind kind() const { return kind_; }
  std::uint32_t entry_size() const { return entry_size_; }
  std::uint32_t capacity() const { return capacity_; }
  std::uint32_t high_water() const { return high_water_.load(std::memory_order_acquire); }
  std::uint32_t live() const { return live_.load(std::memory_order_acquire); }

  const std::byte* load(std::uint32_t index) const {
    if (index >= capacity_) return nullptr;
    Segment* s = segments_[index / kSegmentSize].load(std::memory_order_acquire);
    if (!s) return nullptr;
    return s->slots[index % kSegmentSize].load(std::memory_order_acquire);
  }

  // Writer only. Returns the displaced record, which the caller retires.
  const std::byte* store(std::uint32_t index, const std::byte* rec) {
    auto& seg = segments_[index / kSegmentSize];
    Segment* s = seg.load(std::memory_order_relaxed);
    if (!s) {
      s = new Segment();
      seg.store(s, std::memory_order_release);
    }
    const std::byte* prev = s->slots[index % kSegmentSize].exchange(rec, std::memory_order_acq_rel);
    if (!prev) live_.fetch_add(1, std::memory_order_acq_rel);
    if (index + 1 > high_water_.load(std::memory_order_relaxed)) {
      high_water_.store(index + 1, std::memory_order_release);
    }
    return prev;
  }

  const std::byte* clear(std::uint32_t index) {
    if (index >= capacity_) return nullptr;
    Segment* s = segments_[index / kSegmentSize].load(std::memory_order_relaxed);
    if (!s) return nullptr;
    const std::byte* prev = s->slots[index % kSegmentSize].exchange(nullptr, std::memory_order_acq_rel);
    if (prev) live_.fetch_sub(1, std::memory_order_acq_rel);
    return prev;
  }

 private:
  struct Segment {
    std::array<std::atomic<const std::byte*>, kSegmentSize> slots{};
  };

  MapId id_;
  RecordKind kind_;
  std::uint32_t entry_size_;
  std::uint32_t capacity_;
  std::vector<std::atomic<Segment*>> segments_;
  std::atomic<std::uint32_t> high_water_{0};
  std::atomic<std::uint32_t> live_{0};
};

struct NestedMapStore::OuterSegment {
  std::array<std::atomic<InnerMap*>, kOuterSegmentSize> maps{};
};

// ---------------------------------------------------------------------------
// Writer-side shadow of what the store currently holds, used for planning.

struct NodeLayout {
  std::vector<std::byte> record;
  std::vector<std::pair<std::string, MapId>> long_strings;
};

struct FilterNode {
  NodeLayout node;
  MapId routes_map;
  std::vector<NodeLayout> routes;
};

struct ListenerNode {
  NodeLayout node;
  std::uint32_t slot = 0;
  MapId filters_map;
  std::vector<FilterNode> filters;
};

struct ClusterNode {
  NodeLayout node;
  std::uint32_t slot = 0;
  MapId endpoints_map;
  std::vector<NodeLayout> endpoints;
};

struct StoreLayout {
  std::uint64_t version = 0;
  std::map<std::string, ListenerNode> listeners;
  std::map<std::string, ClusterNode> clusters;
  std::size_t occupancy = 0;
};

namespace {

template <class R>
std::vector<std::byte> to_bytes(const R& rec) {
  std::vector<std::byte> out(sizeof(R));
  std::memcpy(out.data(), &rec, sizeof(R));
  return out;
}

template <class R>
R zeroed() {
  R r;
  std::memset(static_cast<void*>(&r), 0, sizeof(R));
  return r;
}

void collect_ids(const NodeLayout& n, std::vector<MapId>& out) {
  for (const auto& [_, id] : n.long_strings) out.push_back(id);
}

// Parent-first enumeration of every map owned by the layout below the roots.
std::vector<MapId> owned_maps(const StoreLayout& layout) {
  std::vector<MapId> out;
  for (const auto& [_, l] : layout.listeners) {
    if (l.filters_map) out.push_back(l.filters_map);
    for (const auto& f : l.filters) {
      if (f.routes_map) out.push_back(f.routes_map);
      for (const auto& r : f.routes) collect_ids(r, out);
      collect_ids(f.node, out);
    }
    collect_ids(l.node, out);
  }
  for (const auto& [_, c] : layout.clusters) {
    if (c.endpoints_map) out.push_back(c.endpoints_map);
    for (const auto& e : c.endpoints) collect_ids(e, out);
    collect_ids(c.node, out);
  }
  return out;
}

std::size_t node_records(const NodeLayout& n) {
  std::size_t total = 1;
  for (const auto& [value, _] : n.long_strings) total += (value.size() + kInlineString - 1) / kInlineString;
  return total;
}

std::size_t count_records(const StoreLayout& layout) {
  std::size_t total = 0;
  for (const auto& [_, l] : layout.listeners) {
    total += node_records(l.node);
    for (const auto& f : l.filters) {
      total += node_records(f.node);
      for (const auto& r : f.routes) total += node_records(r);
    }
  }
  for (const auto& [_, c] : layout.clusters) {
    total += node_records(c.node);
    for (const auto& e : c.endpoints) total += node_records(e);
  }
  return total;
}

class Planner {
 public:
  Planner(const NestedMapStore& store, const StoreLayout& old, DeltaPlan& plan,
          std::function<MapId()> reserve)
      : store_(store), old_(old), plan_(plan), reserve_(std::move(reserve)) {}

  std::shared_ptr<StoreLayout> run(const ConfigSnapshot& next) {
    auto out = std::make_shared<StoreLayout>();
    out->version = next.version;
    const RootDirectory& roots = store_.roots();

    std::vector<bool> cluster_used(kMapCapacity, false), listener_used(kMapCapacity, false);
    for (const auto& [_, c] : old_.clusters) cluster_used[c.slot] = true;
    for (const auto& [_, l] : old_.listeners) listener_used[l.slot] = true;

    for (const auto& c : next.clusters) {
      const ClusterNode* prev = nullptr;
      if (auto it = old_.clusters.find(c.name); it != old_.clusters.end()) prev = &it->second;
      ClusterNode node;
      node.slot = prev ? prev->slot : take_slot(cluster_used);

      std::vector<NodeLayout> endpoints;
      for (std::size_t i = 0; i < c.endpoints.size(); ++i) {
        const auto& e = c.endpoints[i];
        const NodeLayout* prev_ep = prev && i < prev->endpoints.size() ? &prev->endpoints[i] : nullptr;
        NodeLayout ep;
        auto rec = zeroed<EndpointRecord>();
        rec.address = encode(e.address, prev_ep, ep);
        rec.port = e.port;
        rec.weight = e.weight;
        ep.record = to_bytes(rec);
        endpoints.push_back(std::move(ep));
      }
      node.endpoints_map = collection(prev ? prev->endpoints_map : kNullMap,
                                      prev ? &prev->endpoints : nullptr, endpoints, RecordKind::Endpoint);
      node.endpoints = std::move(endpoints);

      auto rec = zeroed<ClusterRecord>();
      rec.name = encode(c.name, prev ? &prev->node : nullptr, node.node);
      rec.policy = static_cast<std::uint8_t>(c.policy);
      rec.endpoints = ChildRef{node.endpoints_map, static_cast<std::uint32_t>(c.endpoints.size())};
      node.node.record = to_bytes(rec);
      if (!prev || prev->node.record != node.node.record) {
        write(roots.clusters_root, node.slot, RecordKind::Cluster, node.node.record, !prev);
      }
      out->clusters.emplace(c.name, std::move(node));
    }

    auto slot_of = [&](const std::string& name) {
      auto it = out->clusters.find(name);
      return it == out->clusters.end() ? kNoSlot : it->second.slot;
    };

    for (const auto& l : next.listeners) {
      const ListenerNode* prev = nullptr;
      if (auto it = old_.listeners.find(l.name); it != old_.listeners.end()) prev = &it->second;
      ListenerNode node;
      node.slot = prev ? prev->slot : take_slot(listener_used);

      std::vector<FilterNode> filters;
      for (std::size_t j = 0; j < l.filters.size(); ++j) {
        const auto& f = l.filters[j];
        const FilterNode* prev_f = prev && j < prev->filters.size() ? &prev->filters[j] : nullptr;
        FilterNode fn;
        std::vector<NodeLayout> routes;
        for (std::size_t k = 0; k < f.routes.size(); ++k) {
          const auto& r = f.routes[k];
          const NodeLayout* prev_r = prev_f && k < prev_f->routes.size() ? &prev_f->routes[k] : nullptr;
          NodeLayout rn;
          auto rec = zeroed<RouteRecord>();
          rec.match_field = static_cast<std::uint8_t>(r.field);
          rec.match_kind = static_cast<std::uint8_t>(r.kind);
          rec.header = encode(r.header, prev_r, rn);
          rec.value = encode(r.value, prev_r, rn);
          rec.cluster_slot = slot_of(r.cluster);
          rn.record = to_bytes(rec);
          routes.push_back(std::move(rn));
        }
        fn.routes_map = collection(prev_f ? prev_f->routes_map : kNullMap, prev_f ? &prev_f->routes : nullptr,
                                   routes, RecordKind::Route);
        fn.routes = std::move(routes);
        auto rec = zeroed<FilterRecord>();
        rec.config_type = static_cast<std::uint8_t>(f.type);
        rec.routes = ChildRef{fn.routes_map, static_cast<std::uint32_t>(f.routes.size())};
        fn.node.record = to_bytes(rec);
        filters.push_back(std::move(fn));
      }

      std::vector<NodeLayout> filter_nodes;
      std::vector<NodeLayout> prev_filter_nodes;
      for (const auto& f : filters) filter_nodes.push_back(f.node);
      if (prev) {
        for (const auto& f : prev->filters) prev_filter_nodes.push_back(f.node);
      }
      node.filters_map = collection(prev ? prev->filters_map : kNullMap, prev ? &prev_filter_nodes : nullptr,
                                    filter_nodes, RecordKind::Filter);
      node.filters = std::move(filters);

      auto rec = zeroed<ListenerRecord>();
      rec.name = encode(l.name, prev ? &prev->node : nullptr, node.node);
      rec.bind = encode(l.bind, prev ? &prev->node : nullptr, node.node);
      rec.has_virtual_ip = l.virtual_ip ? 1 : 0;
      rec.virtual_ip = encode(l.virtual_ip.value_or(""), prev ? &prev->node : nullptr, node.node);
      rec.tenant_group = encode(l.tenant_group, prev ? &prev->node : nullptr, node.node);
      rec.default_cluster_slot = l.default_cluster ? slot_of(*l.default_cluster) : kNoSlot;
      rec.filters = ChildRef{node.filters_map, static_cast<std::uint32_t>(l.filters.size())};
      node.node.record = to_bytes(rec);
      if (!prev || prev->node.record != node.node.record) {
        write(roots.listeners_root, node.slot, RecordKind::Listener, node.node.record, !prev);
      }
      out->listeners.emplace(l.name, std::move(node));
    }

    // Top-down removal: unhook root entries first, then drop the maps they owned.
    for (const auto& [name, l] : old_.listeners) {
      if (!out->listeners.count(name)) plan_.deletes.emplace_back(ClearRecord{roots.listeners_root, l.slot});
    }
    for (const auto& [name, c] : old_.clusters) {
      if (!out->clusters.count(name)) plan_.deletes.emplace_back(ClearRecord{roots.clusters_root, c.slot});
    }
    std::set<MapId> kept;
    for (MapId id : owned_maps(*out)) kept.insert(id);
    for (MapId id : owned_maps(old_)) {
      if (!kept.count(id)) plan_.deletes.emplace_back(DropMap{id});
    }

    out->occupancy = count_records(*out);
    plan_.peak_occupancy = old_.occupancy + new_slots_;
    plan_.final_occupancy = out->occupancy;
    return out;
  }

 private:
  static std::uint32_t take_slot(std::vector<bool>& used) {
    for (std::uint32_t i = 0; i < used.size(); ++i) {
      if (!used[i]) {
        used[i] = true;
        return i;
      }
    }
    throw StoreError(StoreErrc::CapacityExceeded, "root map full");
  }

  void write(MapId map, std::uint32_t index, RecordKind kind, std::vector<std::byte> bytes, bool new_slot) {
    if (new_slot) ++new_slots_;
    plan_.adds.emplace_back(WriteRecord{map, index, kind, std::move(bytes)});
  }

  MapId create(RecordKind kind, std::uint32_t capacity) {
    MapId id = reserve_();
    plan_.adds.emplace_back(CreateMap{id, kind, capacity});
    return id;
  }

  // Reuses the previous map when every record is unchanged; otherwise writes
  // a fresh map that the parent record will be swung to.
  MapId collection(MapId prev_map, const std::vector<NodeLayout>* prev, const std::vector<NodeLayout>& next,
                   RecordKind kind) {
    if (next.empty()) return kNullMap;
    if (prev && prev_map && prev->size() == next.size()) {
      bool same = true;
      for (std::size_t i = 0; i < next.size() && same; ++i) same = (*prev)[i].record == next[i].record;
      if (same) return prev_map;
    }
    MapId id = create(kind, static_cast<std::uint32_t>(next.size()));
    for (std::size_t i = 0; i < next.size(); ++i) {
      write(id, static_cast<std::uint32_t>(i), kind, next[i].record, true);
    }
    return id;
  }

  StoredString encode(const std::string& value, const NodeLayout* prev, NodeLayout& node) {
    auto s = zeroed<StoredString>();
    s.length = static_cast<std::uint32_t>(value.size());
    if (value.size() <= kInlineString) {
      std::memcpy(s.inline_bytes, value.data(), value.size());
      return s;
    }
    if (prev) {
      for (const auto& [v, id] : prev->long_strings) {
        if (v == value) {
          s.chunks = id;
          node.long_strings.emplace_back(value, id);
          return s;
        }
      }
    }
    auto chunks = static_cast<std::uint32_t>((value.size() + kInlineString - 1) / kInlineString);
    MapId id = create(RecordKind::StringChunk, chunks);
    for (std::uint32_t i = 0; i < chunks; ++i) {
      auto chunk = zeroed<StringChunk>();
      std::size_t off = std::size_t{i} * kInlineString;
      std::memcpy(chunk.bytes, value.data() + off, std::min(kInlineString, value.size() - off));
      write(id, i, RecordKind::StringChunk, to_bytes(chunk), true);
    }
    s.chunks = id;
    node.long_strings.emplace_back(value, id);
    return s;
  }

  const NestedMapStore& store_;
  const StoreLayout& old_;
  DeltaPlan& plan_;
  std::function<MapId()> reserve_;
  std::size_t new_slots_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------

NestedMapStore::NestedMapStore() {
  auto root = [&](RecordKind kind) {
    MapId id = reserve_id();
    link(std::make_unique<InnerMap>(id, kind, static_cast<std::uint32_t>(kMapCapacity)));
    return id;
  };
  roots_.listeners_root = root(RecordKind::Listener);
  roots_.clusters_root = root(RecordKind::Cluster);
  roots_.lb_state_root = root(RecordKind::LbState);
  roots_.metrics_root = root(RecordKind::Metrics);
  layout_ = std::make_shared<StoreLayout>();
}

NestedMapStore::~NestedMapStore() {
  for (auto& seg : outer_) {
    OuterSegment* s = seg.load(std::memory_order_relaxed);
    if (!s) continue;
    for (auto& m : s->maps) delete m.load(std::memory_order_relaxed);
    delete s;
  }
}

NestedMapStore::ReadGuard NestedMapStore::read_guard() const {
  std::uint64_t e = epoch_.load(std::memory_order_seq_cst);
  auto* counter = &readers_[e & 1];
  counter->fetch_add(1, std::memory_order_seq_cst);
  return ReadGuard(counter);
}

void NestedMapStore::synchronize() {
  // Two flips: a reader registered under either parity before the call has
  // left by the time both counters have drained once.
  for (int round = 0; round < 2; ++round) {
    std::uint64_t e = epoch_.fetch_add(1, std::memory_order_seq_cst);
    while (readers_[e & 1].load(std::memory_order_seq_cst) != 0) std::this_thread::yield();
  }
}

MapId NestedMapStore::reserve_id() const {
  std::uint32_t v = next_id_.fetch_add(1, std::memory_order_relaxed);
  if (v >= kOuterSegmentSize * kOuterDirectory) {
    throw StoreError(StoreErrc::CapacityExceeded, "map id space exhausted");
  }
  return MapId{v};
}

InnerMap* NestedMapStore::find(MapId id) const {
  if (!id || id.value >= kOuterSegmentSize * kOuterDirectory) return nullptr;
  OuterSegment* s = outer_[id.value / kOuterSegmentSize].load(std::memory_order_acquire);
  if (!s) return nullptr;
  return s->maps[id.value % kOuterSegmentSize].load(std::memory_order_acquire);
}

void NestedMapStore::link(std::unique_ptr<InnerMap> map) {
  std::uint32_t v = map->id().value;
  auto& seg = outer_[v / kOuterSegmentSize];
  OuterSegment* s = seg.load(std::memory_order_relaxed);
  if (!s) {
    s = new OuterSegment();
    seg.store(s, std::memory_order_release);
  }
  s->maps[v % kOuterSegmentSize].store(map.release(), std::memory_order_release);
  map_count_.fetch_add(1, std::memory_order_acq_rel);
}

std::unique_ptr<InnerMap> NestedMapStore::unlink(MapId id) {
  OuterSegment* s = outer_[id.value / kOuterSegmentSize].load(std::memory_order_relaxed);
  if (!s) return nullptr;
  InnerMap* m = s->maps[id.value % kOuterSegmentSize].exchange(nullptr, std::memory_order_acq_rel);
  if (m) map_count_.fetch_sub(1, std::memory_order_acq_rel);
  return std::unique_ptr<InnerMap>(m);
}

std::optional<RecordBytes> NestedMapStore::resolve(MapId id, std::uint32_t index) const {
  ++t_resolve_calls;
  if (!id) return std::nullopt;
  auto guard = read_guard();
  InnerMap* map = find(id);
  if (!map) return std::nullopt;
  const std::byte* rec = map->load(index);
  if (!rec) return std::nullopt;
  RecordBytes out;
  out.kind = map->kind();
  out.size = map->entry_size();
  std::memcpy(out.data.data(), rec, out.size);
  return out;
}

std::optional<MapInfo> NestedMapStore::map_info(MapId id) const {
  auto guard = read_guard();
  InnerMap* map = find(id);
  if (!map) return std::nullopt;
  return MapInfo{id, map->kind(), map->entry_size(), map->capacity(), map->high_water(), map->live()};
}

std::optional<std::string> NestedMapStore::load_string(const StoredString& s) const {
  if (s.length <= kInlineString) return std::string(s.inline_bytes, s.length);
  std::string out;
  out.reserve(s.length);
  std::uint32_t chunks = (s.length + kInlineString - 1) / kInlineString;
  for (std::uint32_t i = 0; i < chunks; ++i) {
    auto c = resolve_as<StringChunk>(s.chunks, i);
    if (!c) return std::nullopt;
    out.append(c->bytes, std::min<std::size_t>(kInlineString, s.length - out.size()));
  }
  return out;
}

std::uint64_t NestedMapStore::thread_resolve_calls() { return t_resolve_calls; }

DeltaPlan NestedMapStore::plan_delta(const ConfigSnapshot& old_snap, const ConfigSnapshot& new_snap) const {
  std::shared_ptr<const StoreLayout> base;
  {
    std::lock_guard lock(writer_);
    base = layout_;
  }
  if (old_snap.version != base->version) {
    throw StoreError(StoreErrc::VersionMismatch, "plan base version " + std::to_string(old_snap.version) +
                                                     " does not match store version " +
                                                     std::to_string(base->version));
  }
  if (new_snap.version < old_snap.version) {
    throw StoreError(StoreErrc::VersionMismatch, "new snapshot version is older than the current one");
  }
  DeltaPlan plan;
  plan.version_from = old_snap.version;
  plan.version_to = new_snap.version;
  Planner planner(*this, *base, plan, [this] { return reserve_id(); });
  auto target = planner.run(new_snap);
  if (plan.peak_occupancy > kMapCapacity) {
    throw StoreError(StoreErrc::CapacityExceeded,
                     "delta needs " + std::to_string(plan.peak_occupancy) + " records, capacity is " +
                         std::to_string(kMapCapacity));
  }
  plan.target = std::move(target);
  plan.base = std::move(base);
  return plan;
}

std::uint64_t NestedMapStore::apply_delta(const DeltaPlan& plan) {
  std::lock_guard lock(writer_);
  if (plan.version_from != layout_->version || plan.base != layout_ || !plan.target) {
    throw StoreError(StoreErrc::VersionMismatch, "delta planned against version " +
                                                     std::to_string(plan.version_from) + ", store is at " +
                                                     std::to_string(layout_->version));
  }
  std::vector<const std::byte*> retired;

  for (const auto& step : plan.adds) {
    if (const auto* c = std::get_if<CreateMap>(&step)) {
      link(std::make_unique<InnerMap>(c->id, c->kind, c->capacity));
      continue;
    }
    const auto& w = std::get<WriteRecord>(step);
    InnerMap* map = find(w.map);
    auto* rec = new std::byte[w.bytes.size()];
    std::memcpy(rec, w.bytes.data(), w.bytes.size());
    if (const std::byte* prev = map->store(w.index, rec)) {
      retired.push_back(prev);
    } else {
      occupancy_.fetch_add(1, std::memory_order_acq_rel);
    }
    std::size_t now = occupancy_.load(std::memory_order_relaxed);
    if (now > peak_occupancy_.load(std::memory_order_relaxed)) peak_occupancy_.store(now, std::memory_order_release);
  }

  std::vector<MapId> drops;
  for (const auto& step : plan.deletes) {
    if (const auto* c = std::get_if<ClearRecord>(&step)) {
      if (InnerMap* map = find(c->map)) {
        if (const std::byte* prev = map->clear(c->index)) {
          retired.push_back(prev);
          occupancy_.fetch_sub(1, std::memory_order_acq_rel);
        }
      }
    } else {
      drops.push_back(std::get<DropMap>(step).id);
    }
  }

  // Readers that saw a reference to anything below must be gone before the
  // maps leave the outer table.
  synchronize();
  for (MapId id : drops) {
    if (auto map = unlink(id)) occupancy_.fetch_sub(map->live(), std::memory_order_acq_rel);
  }
  for (const std::byte* r : retired) delete[] r;

  layout_ = plan.target;
  version_.store(plan.version_to, std::memory_order_release);
  return plan.version_to;
}

std::unique_ptr<NestedMapStore> flatten(const ConfigSnapshot& snap) {
  auto store = std::make_unique<NestedMapStore>();
  ConfigSnapshot empty;
  empty.version = 0;
  auto plan = store->plan_delta(empty, snap);
  store->apply_delta(plan);
  return store;
}

DeltaPlan plan_delta(const NestedMapStore& store, const ConfigSnapshot& old_snap, const ConfigSnapshot& new_snap) {
  return store.plan_delta(old_snap, new_snap);
}

std::uint64_t apply_delta(NestedMapStore& store, const DeltaPlan& plan) { return store.apply_delta(plan); }

ConfigSnapshot canonicalize(ConfigSnapshot snap) {
  std::sort(snap.listeners.begin(), snap.listeners.end(),
            [](const Listener& a, const Listener& b) { return a.name < b.name; });
  std::sort(snap.clusters.begin(), snap.clusters.end(),
            [](const Cluster& a, const Cluster& b) { return a.name < b.name; });
  return snap;
}

// ---------------------------------------------------------------------------
// Walks

ConfigSnapshot NestedMapStore::unflatten() const {
  auto guard = read_guard();
  auto str = [&](const StoredString& s) {
    auto v = load_string(s);
    if (!v) throw StoreError(StoreErrc::NotFound, "unresolvable string reference");
    return *v;
  };
  auto need = [](auto opt, const char* what) {
    if (!opt) throw StoreError(StoreErrc::NotFound, std::string("unresolvable ") + what);
    return *opt;
  };

  ConfigSnapshot snap;
  snap.version = version();
  std::map<std::uint32_t, std::string> cluster_names;
  auto clusters = need(map_info(roots_.clusters_root), "clusters root");
  for (std::uint32_t i = 0; i < clusters.high_water; ++i) {
    auto rec = resolve_as<ClusterRecord>(roots_.clusters_root, i);
    if (!rec) continue;
    Cluster c;
    c.name = str(rec->name);
    c.policy = static_cast<LbPolicy>(rec->policy);
    for (std::uint32_t j = 0; j < rec->endpoints.count; ++j) {
      auto ep = need(resolve_as<EndpointRecord>(rec->endpoints.map, j), "endpoint");
      c.endpoints.push_back(Endpoint{str(ep.address), ep.port, ep.weight});
    }
    cluster_names[i] = c.name;
    snap.clusters.push_back(std::move(c));
  }
  auto cluster_name = [&](std::uint32_t slot) {
    auto it = cluster_names.find(slot);
    if (it == cluster_names.end()) throw StoreError(StoreErrc::NotFound, "dangling cluster slot");
    return it->second;
  };

  auto listeners = need(map_info(roots_.listeners_root), "listeners root");
  for (std::uint32_t i = 0; i < listeners.high_water; ++i) {
    auto rec = resolve_as<ListenerRecord>(roots_.listeners_root, i);
    if (!rec) continue;
    Listener l;
    l.name = str(rec->name);
    l.bind = str(rec->bind);
    if (rec->has_virtual_ip) l.virtual_ip = str(rec->virtual_ip);
    l.tenant_group = str(rec->tenant_group);
    if (rec->default_cluster_slot != kNoSlot) l.default_cluster = cluster_name(rec->default_cluster_slot);
    for (std::uint32_t j = 0; j < rec->filters.count; ++j) {
      auto fr = need(resolve_as<FilterRecord>(rec->filters.map, j), "filter");
      Filter f;
      f.type = static_cast<Protocol>(fr.config_type);
      for (std::uint32_t k = 0; k < fr.routes.count; ++k) {
        auto rr = need(resolve_as<RouteRecord>(fr.routes.map, k), "route");
        RouteRule r;
        r.field = static_cast<MatchField>(rr.match_field);
        r.kind = static_cast<MatchKind>(rr.match_kind);
        r.header = str(rr.header);
        r.value = str(rr.value);
        r.cluster = cluster_name(rr.cluster_slot);
        f.routes.push_back(std::move(r));
      }
      l.filters.push_back(std::move(f));
    }
    snap.listeners.push_back(std::move(l));
  }
  return snap;
}

namespace {

struct Walker {
  const NestedMapStore& store;
  std::vector<MapId> seen;
  std::size_t dangling = 0;

  void child(const ChildRef& ref) {
    if (ref.count == 0) return;
    seen.push_back(ref.map);
    for (std::uint32_t i = 0; i < ref.count; ++i) {
      if (!store.resolve(ref.map, i)) ++dangling;
    }
  }

  void string(const StoredString& s) {
    if (s.length <= kInlineString) return;
    seen.push_back(s.chunks);
    if (!store.load_string(s)) ++dangling;
  }
};

}  // namespace

std::vector<MapId> NestedMapStore::walk(std::size_t& dangling) const {
  auto guard = read_guard();
  Walker w{*this, {}, 0};
  w.seen = {roots_.listeners_root, roots_.clusters_root, roots_.lb_state_root, roots_.metrics_root};
  std::vector<bool> cluster_live(kMapCapacity, false);

  for (MapId root : w.seen) {
    if (!find(root)) ++w.dangling;
  }
  auto cinfo = map_info(roots_.clusters_root);
  for (std::uint32_t i = 0; cinfo && i < cinfo->high_water; ++i) {
    auto c = resolve_as<ClusterRecord>(roots_.clusters_root, i);
    if (!c) continue;
    cluster_live[i] = true;
    w.string(c->name);
    w.child(c->endpoints);
    for (std::uint32_t j = 0; j < c->endpoints.count; ++j) {
      if (auto e = resolve_as<EndpointRecord>(c->endpoints.map, j)) w.string(e->address);
    }
  }
  auto slot_ok = [&](std::uint32_t slot) { return slot < cluster_live.size() && cluster_live[slot]; };
  auto linfo = map_info(roots_.listeners_root);
  for (std::uint32_t i = 0; linfo && i < linfo->high_water; ++i) {
    auto l = resolve_as<ListenerRecord>(roots_.listeners_root, i);
    if (!l) continue;
    w.string(l->name);
    w.string(l->bind);
    w.string(l->virtual_ip);
    w.string(l->tenant_group);
    if (l->default_cluster_slot != kNoSlot && !slot_ok(l->default_cluster_slot)) ++w.dangling;
    w.child(l->filters);
    for (std::uint32_t j = 0; j < l->filters.count; ++j) {
      auto f = resolve_as<FilterRecord>(l->filters.map, j);
      if (!f) continue;
      w.child(f->routes);
      for (std::uint32_t k = 0; k < f->routes.count; ++k) {
        auto r = resolve_as<RouteRecord>(f->routes.map, k);
        if (!r) continue;
        w.string(r->header);
        w.string(r->value);
        if (!slot_ok(r->cluster_slot)) ++w.dangling;
      }
    }
  }
  dangling = w.dangling;
  return w.seen;
}

std::vector<MapId> NestedMapStore::reachable_maps() const {
  std::size_t dangling = 0;
  return walk(dangling);
}

std::size_t NestedMapStore::dangling_references() const {
  std::size_t dangling = 0;
  walk(dangling);
  return dangling;
}

std::string NestedMapStore::debug_dump() const {
  auto guard = read_guard();
  std::ostringstream os;
  auto q = [&](const StoredString& s) {
    auto v = load_string(s);
    std::ostringstream t;
    if (v) {
      t << std::quoted(*v);
    } else {
      t << "<dangling>";
    }
    return t.str();
  };
  auto ref = [](const ChildRef& r) { return std::to_string(r.map.value) + "/" + std::to_string(r.count); };
  auto slot = [](std::uint32_t s) { return s == kNoSlot ? std::string("-") : std::to_string(s); };
  auto header = [&](MapId id) {
    if (auto info = map_info(id)) {
      os << "map " << id.value << " kind=" << to_string(info->kind) << " entry_size=" << info->entry_size
         << " capacity=" << info->capacity << " live=" << info->live << "\n";
    } else {
      os << "map " << id.value << " <missing>\n";
    }
  };

  os << "version " << version() << "\n";
  os << "roots listeners=" << roots_.listeners_root.value << " clusters=" << roots_.clusters_root.value
     << " lb_state=" << roots_.lb_state_root.value << " metrics=" << roots_.metrics_root.value << "\n";
  os << "occupancy " << occupancy() << "\n";

  header(roots_.listeners_root);
  std::vector<ListenerRecord> listeners;
  auto linfo = map_info(roots_.listeners_root);
  for (std::uint32_t i = 0; linfo && i < linfo->high_water; ++i) {
    auto l = resolve_as<ListenerRecord>(roots_.listeners_root, i);
    if (!l) continue;
    os << "  [" << i << "] name=" << q(l->name) << " bind=" << q(l->bind)
       << " vip=" << (l->has_virtual_ip ? q(l->virtual_ip) : std::string("-")) << " tenant=" << q(l->tenant_group)
       << " default_cluster=" << slot(l->default_cluster_slot) << " filters=" << ref(l->filters) << "\n";
    listeners.push_back(*l);
  }
  for (const auto& l : listeners) {
    if (l.filters.count == 0) continue;
    header(l.filters.map);
    std::vector<FilterRecord> filters;
    for (std::uint32_t j = 0; j < l.filters.count; ++j) {
      auto f = resolve_as<FilterRecord>(l.filters.map, j);
      if (!f) {
        os << "  [" << j << "] <missing>\n";
        continue;
      }
      os << "  [" << j << "] type=" << to_string(static_cast<Protocol>(f->config_type))
         << " routes=" << ref(f->routes) << "\n";
      filters.push_back(*f);
    }
    for (const auto& f : filters) {
      header(f.routes.map);
      for (std::uint32_t k = 0; k < f.routes.count; ++k) {
        auto r = resolve_as<RouteRecord>(f.routes.map, k);
        if (!r) {
          os << "  [" << k << "] <missing>\n";
          continue;
        }
        static constexpr const char* kFields[] = {"path", "method", "header"};
        os << "  [" << k << "] field=" << kFields[r->match_field % 3];
        if (r->match_field == static_cast<std::uint8_t>(MatchField::Header)) os << ":" << q(r->header);
        os << " kind=" << to_string(static_cast<MatchKind>(r->match_kind)) << " value=" << q(r->value)
           << " cluster=" << slot(r->cluster_slot) << "\n";
      }
    }
  }

  header(roots_.clusters_root);
  std::vector<ClusterRecord> clusters;
  auto cinfo = map_info(roots_.clusters_root);
  for (std::uint32_t i = 0; cinfo && i < cinfo->high_water; ++i) {
    auto c = resolve_as<ClusterRecord>(roots_.clusters_root, i);
    if (!c) continue;
    os << "  [" << i << "] name=" << q(c->name) << " policy=" << to_string(static_cast<LbPolicy>(c->policy))
       << " endpoints=" << ref(c->endpoints) << "\n";
    clusters.push_back(*c);
  }
  for (const auto& c : clusters) {
    header(c.endpoints.map);
    for (std::uint32_t j = 0; j < c.endpoints.count; ++j) {
      auto e = resolve_as<EndpointRecord>(c.endpoints.map, j);
      if (!e) {
        os << "  [" << j << "] <missing>\n";
        continue;
      }
      os << "  [" << j << "] addr=" << q(e->address) << " port=" << e->port << " weight=" << e->weight << "\n";
    }
  }
  header(roots_.lb_state_root);
  header(roots_.metrics_root);
  return os.str();
}

}  // namespace xlb
