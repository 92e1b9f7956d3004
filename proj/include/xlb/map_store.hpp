#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "xlb/config.hpp"
#include "xlb/limits.hpp"

namespace xlb {

// Reference to an inner map. 0 is the null reference; ids are allocated
// from a process-lifetime counter and never reused.
struct MapId {
  std::uint32_t value = 0;

  explicit operator bool() const { return value != 0; }
  auto operator<=>(const MapId&) const = default;
};

inline constexpr MapId kNullMap{};

enum class RecordKind : std::uint8_t {
  Listener = 1,
  Filter,
  Route,
  Cluster,
  Endpoint,
  StringChunk,
  LbState,
  Metrics,
};

std::string_view to_string(RecordKind k);

// Fixed-size string field. Up to kInlineString bytes live in the record;
// longer strings are split over a dedicated chunk map referenced by `chunks`.
inline constexpr std::size_t kInlineString = 64;

struct StoredString {
  std::uint32_t length;
  MapId chunks;
  char inline_bytes[kInlineString];
};

struct ChildRef {
  MapId map;
  std::uint32_t count;
};

inline constexpr std::uint32_t kNoSlot = 0xffffffffu;

struct ListenerRecord {
  StoredString name;
  StoredString bind;
  StoredString virtual_ip;
  StoredString tenant_group;
  std::uint8_t has_virtual_ip;
  std::uint32_t default_cluster_slot;  // kNoSlot when absent
  ChildRef filters;
};

struct FilterRecord {
  std::uint8_t config_type;  // Protocol
  ChildRef routes;
};

struct RouteRecord {
  std::uint8_t match_field;  // MatchField
  std::uint8_t match_kind;   // MatchKind
  StoredString header;
  StoredString value;
  std::uint32_t cluster_slot;  // index into the clusters root map
};

struct ClusterRecord {
  StoredString name;
  std::uint8_t policy;  // LbPolicy
  ChildRef endpoints;
};

struct EndpointRecord {
  StoredString address;
  std::uint16_t port;
  std::uint32_t weight;
};

struct StringChunk {
  char bytes[kInlineString];
};

template <class R> struct RecordTraits;
template <> struct RecordTraits<ListenerRecord> { static constexpr RecordKind kind = RecordKind::Listener; };
template <> struct RecordTraits<FilterRecord> { static constexpr RecordKind kind = RecordKind::Filter; };
template <> struct RecordTraits<RouteRecord> { static constexpr RecordKind kind = RecordKind::Route; };
template <> struct RecordTraits<ClusterRecord> { static constexpr RecordKind kind = RecordKind::Cluster; };
template <> struct RecordTraits<EndpointRecord> { static constexpr RecordKind kind = RecordKind::Endpoint; };
template <> struct RecordTraits<StringChunk> { static constexpr RecordKind kind = RecordKind::StringChunk; };

inline constexpr std::size_t kMaxRecordSize = 320;
static_assert(sizeof(ListenerRecord) <= kMaxRecordSize);
static_assert(std::is_trivially_copyable_v<ListenerRecord> && std::is_trivially_copyable_v<RouteRecord>);

std::size_t entry_size_of(RecordKind k);

// Copy of one fixed-size record taken under a read guard.
struct RecordBytes {
  RecordKind kind{};
  std::uint32_t size = 0;
  std::array<std::byte, kMaxRecordSize> data{};

  template <class R>
  std::optional<R> as() const {
    if (kind != RecordTraits<R>::kind || size != sizeof(R)) return std::nullopt;
    R out;
    std::memcpy(&out, data.data(), sizeof(R));
    return out;
  }
};

enum class StoreErrc { NotFound, CapacityExceeded, VersionMismatch, KindMismatch };

class StoreError : public std::runtime_error {
 public:
  StoreError(StoreErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  StoreErrc code() const { return code_; }

 private:
  StoreErrc code_;
};

struct RootDirectory {
  MapId listeners_root;
  MapId clusters_root;
  MapId lb_state_root;
  MapId metrics_root;
};

struct CreateMap {
  MapId id;
  RecordKind kind;
  std::uint32_t capacity;
};

struct WriteRecord {
  MapId map;
  std::uint32_t index;
  RecordKind kind;
  std::vector<std::byte> bytes;
};

struct ClearRecord {
  MapId map;
  std::uint32_t index;
};

struct DropMap {
  MapId id;
};

struct StoreLayout;

// Ordered mutation list turning the store from one snapshot into another.
// `adds` run child-before-parent; `deletes` run parent-before-child.
struct DeltaPlan {
  std::uint64_t version_from = 0;
  std::uint64_t version_to = 0;
  std::vector<std::variant<CreateMap, WriteRecord>> adds;
  std::vector<std::variant<ClearRecord, DropMap>> deletes;
  std::size_t peak_occupancy = 0;
  std::size_t final_occupancy = 0;
  std::shared_ptr<const StoreLayout> base;
  std::shared_ptr<const StoreLayout> target;

  bool empty() const { return adds.empty() && deletes.empty(); }
};

struct MapInfo {
  MapId id;
  RecordKind kind;
  std::uint32_t entry_size;
  std::uint32_t capacity;
  std::uint32_t high_water;  // one past the highest index ever written
  std::uint32_t live;
};

class InnerMap;

class NestedMapStore {
 public:
  NestedMapStore();
  ~NestedMapStore();
  NestedMapStore(const NestedMapStore&) = delete;
  NestedMapStore& operator=(const NestedMapStore&) = delete;

  // Keeps every record reachable at guard creation resolvable until the
  // guard is released. Entering and leaving never waits on the writer.
  class ReadGuard {
   public:
    ReadGuard(ReadGuard&& other) noexcept : counter_(std::exchange(other.counter_, nullptr)) {}
    ReadGuard(const ReadGuard&) = delete;
    ReadGuard& operator=(const ReadGuard&) = delete;
    ReadGuard& operator=(ReadGuard&&) = delete;
    ~ReadGuard() {
      if (counter_) counter_->fetch_sub(1, std::memory_order_seq_cst);
    }

   private:
    friend class NestedMapStore;
    explicit ReadGuard(std::atomic<std::uint64_t>* c) : counter_(c) {}
    std::atomic<std::uint64_t>* counter_;
  };

  ReadGuard read_guard() const;

  const RootDirectory& roots() const { return roots_; }
  std::uint64_t version() const { return version_.load(std::memory_order_acquire); }
  std::size_t occupancy() const { return occupancy_.load(std::memory_order_acquire); }
  std::size_t map_count() const { return map_count_.load(std::memory_order_acquire); }

  std::optional<RecordBytes> resolve(MapId id, std::uint32_t index) const;

  template <class R>
  std::optional<R> resolve_as(MapId id, std::uint32_t index) const {
    auto rec = resolve(id, index);
    if (!rec) return std::nullopt;
    return rec->template as<R>();
  }

  std::optional<MapInfo> map_info(MapId id) const;

  // Materializes a string field, following its chunk map when needed.
  std::optional<std::string> load_string(const StoredString& s) const;

  DeltaPlan plan_delta(const ConfigSnapshot& old_snap, const ConfigSnapshot& new_snap) const;
  std::uint64_t apply_delta(const DeltaPlan& plan);

  ConfigSnapshot unflatten() const;
  std::string debug_dump() const;

  // Full-store walk from the roots: every MapId found in a reachable record,
  // and the number of those that fail to resolve.
  std::vector<MapId> reachable_maps() const;
  std::size_t dangling_references() const;

  // Highest record occupancy observed at any instant, including mid-delta.
  std::size_t peak_occupancy() const { return peak_occupancy_.load(std::memory_order_acquire); }

  // Number of resolve() calls made by the calling thread.
  static std::uint64_t thread_resolve_calls();

 private:
  friend std::unique_ptr<NestedMapStore> flatten(const ConfigSnapshot& snap);

  InnerMap* find(MapId id) const;
  MapId reserve_id() const;
  void link(std::unique_ptr<InnerMap> map);
  std::unique_ptr<InnerMap> unlink(MapId id);
  void synchronize();
  std::vector<MapId> walk(std::size_t& dangling) const;

  struct OuterSegment;
  static constexpr std::size_t kOuterSegmentSize = 1024;
  static constexpr std::size_t kOuterDirectory = 4096;

  std::array<std::atomic<OuterSegment*>, kOuterDirectory> outer_{};
  mutable std::atomic<std::uint32_t> next_id_{1};
  std::atomic<std::uint64_t> version_{0};
  std::atomic<std::size_t> occupancy_{0};
  std::atomic<std::size_t> map_count_{0};
  RootDirectory roots_;

  mutable std::atomic<std::uint64_t> epoch_{0};
  mutable std::array<std::atomic<std::uint64_t>, 2> readers_{};

  mutable std::mutex writer_;
  std::shared_ptr<const StoreLayout> layout_;
  std::atomic<std::size_t> peak_occupancy_{0};
};

/// Builds a store holding `snap`. Throws StoreError(CapacityExceeded) when
/// the snapshot needs more than kMapCapacity records.
std::unique_ptr<NestedMapStore> flatten(const ConfigSnapshot& snap);

DeltaPlan plan_delta(const NestedMapStore& store, const ConfigSnapshot& old_snap,
                     const ConfigSnapshot& new_snap);
std::uint64_t apply_delta(NestedMapStore& store, const DeltaPlan& plan);

// Listeners and clusters sorted by name; slot order in the store is not
// part of a snapshot's meaning.
ConfigSnapshot canonicalize(ConfigSnapshot snap);

}  // namespace xlb
