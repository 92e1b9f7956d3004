#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xlb/limits.hpp"

namespace xlb {

enum class Protocol : std::uint8_t { Http11 = 1, Mux = 2 };
enum class LbPolicy : std::uint8_t { RoundRobin = 0, Random = 1, LeastRequest = 2 };
enum class MatchField : std::uint8_t { Path = 0, Method = 1, Header = 2 };
enum class MatchKind : std::uint8_t { Exact = 0, Prefix = 1, Regex = 2 };

std::string_view to_string(Protocol p);
std::string_view to_string(LbPolicy p);
std::string_view to_string(MatchKind k);

struct Endpoint {
  std::string address;
  std::uint16_t port = 0;
  std::uint32_t weight = 1;

  bool operator==(const Endpoint&) const = default;
};

struct Cluster {
  std::string name;
  LbPolicy policy = LbPolicy::RoundRobin;
  std::vector<Endpoint> endpoints;

  bool operator==(const Cluster&) const = default;
};

struct RouteRule {
  MatchField field = MatchField::Path;
  std::string header;  // lowercase; only meaningful for MatchField::Header
  MatchKind kind = MatchKind::Prefix;
  std::string value;
  std::string cluster;

  bool operator==(const RouteRule&) const = default;
};

struct Filter {
  Protocol type = Protocol::Http11;
  std::vector<RouteRule> routes;

  bool operator==(const Filter&) const = default;
};

struct Listener {
  std::string name;
  std::string bind;  // host:port, IPv6 hosts bracketed
  std::optional<std::string> virtual_ip;
  std::string tenant_group;
  std::vector<Filter> filters;
  // Target of a passthrough listener (one with no filters).
  std::optional<std::string> default_cluster;

  bool passthrough() const { return filters.empty(); }
  bool operator==(const Listener&) const = default;
};

struct ConfigSnapshot {
  std::uint64_t version = 1;
  std::vector<Listener> listeners;
  std::vector<Cluster> clusters;

  const Cluster* find_cluster(std::string_view name) const;
  const Listener* find_listener(std::string_view name) const;
  // listeners + filters + routes + clusters + endpoints
  std::size_t node_count() const;

  bool operator==(const ConfigSnapshot&) const = default;
};

struct Violation {
  std::string path;
  std::string message;

  bool operator==(const Violation&) const = default;
};

struct ValidationOptions {
  bool strict = false;  // reject clusters no route references
};

class ConfigError : public std::runtime_error {
 public:
  enum class Kind { Syntax, Validation };

  ConfigError(Kind kind, std::string message, std::vector<Violation> violations = {});

  Kind kind() const { return kind_; }
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  Kind kind_;
  std::vector<Violation> violations_;
};

/// Parses a YAML or JSON config document and validates it. The document
/// version defaults to 1 when absent.
ConfigSnapshot parse_config(std::string_view text, const ValidationOptions& opts = {});
ConfigSnapshot load_config_file(const std::string& path, const ValidationOptions& opts = {});

/// The `version` value written in the document, if any. Does not validate.
std::optional<std::uint64_t> declared_version(std::string_view text);

/// Empty iff every invariant of the snapshot holds.
std::vector<Violation> validate_snapshot(const ConfigSnapshot& snap,
                                         const ValidationOptions& opts = {});

/// JSON rendering accepted back by parse_config.
std::string serialize_config(const ConfigSnapshot& snap);

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

std::optional<HostPort> parse_host_port(std::string_view text);
bool is_ip_address(std::string_view host);

}  // namespace xlb
