#include "xlb/config.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <yaml-cpp/yaml.h>

#include "json.hpp"
#include "xlb/regex.hpp"

namespace xlb {

std::string_view to_string(Protocol p) { return p == Protocol::Mux ? "mux" : "http1"; }

std::string_view to_string(LbPolicy p) {
  switch (p) {
    case LbPolicy::RoundRobin: return "round_robin";
    case LbPolicy::Random: return "random";
    case LbPolicy::LeastRequest: return "least_request";
  }
  return "?";
}

std::string_view to_string(MatchKind k) {
  switch (k) {
    case MatchKind::Exact: return "exact";
    case MatchKind::Prefix: return "prefix";
    case MatchKind::Regex: return "regex";
  }
  return "?";
}

const Cluster* ConfigSnapshot::find_cluster(std::string_view name) const {
  for (const auto& c : clusters) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

const Listener* ConfigSnapshot::find_listener(std::string_view name) const {
  for (const auto& l : listeners) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

std::size_t ConfigSnapshot::node_count() const {
  std::size_t n = listeners.size() + clusters.size();
  for (const auto& l : listeners) {
    n += l.filters.size();
    for (const auto& f : l.filters) n += f.routes.size();
  }
  for (const auto& c : clusters) n += c.endpoints.size();
  return n;
}

ConfigError::ConfigError(Kind kind, std::string message, std::vector<Violation> violations)
    : std::runtime_error(std::move(message)), kind_(kind), violations_(std::move(violations)) {}

bool is_ip_address(std::string_view host) {
  std::string h(host);
  unsigned char buf[sizeof(in6_addr)];
  return inet_pton(AF_INET, h.c_str(), buf) == 1 || inet_pton(AF_INET6, h.c_str(), buf) == 1;
}

std::optional<HostPort> parse_host_port(std::string_view text) {
  HostPort out;
  std::string_view port_part;
  if (!text.empty() && text.front() == '[') {
    auto close = text.find(']');
    if (close == std::string_view::npos || close + 1 >= text.size() || text[close + 1] != ':') {
      return std::nullopt;
    }
    out.host = std::string(text.substr(1, close - 1));
    port_part = text.substr(close + 2);
  } else {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos) return std::nullopt;
    out.host = std::string(text.substr(0, colon));
    port_part = text.substr(colon + 1);
    if (out.host.find(':') != std::string::npos) return std::nullopt;
  }
  if (port_part.empty() || port_part.size() > 5) return std::nullopt;
  unsigned value = 0;
  for (char c : port_part) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
    value = value * 10 + static_cast<unsigned>(c - '0');
  }
  if (value == 0 || value > 65535 || !is_ip_address(out.host)) return std::nullopt;
  out.port = static_cast<std::uint16_t>(value);
  return out;
}

namespace {

bool is_identifier(std::string_view s) {
  if (s.empty() || s.size() > 128) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

bool is_header_token(std::string_view s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) ||
           c == '-' || c == '_' || c == '.';
  });
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string idx(std::string_view base, std::size_t i) {
  return std::string(base) + "[" + std::to_string(i) + "]";
}

// Schema-level reader: converts the YAML tree into a snapshot, recording
// shape problems as violations instead of stopping at the first one.
class Reader {
 public:
  std::vector<Violation> violations;

  ConfigSnapshot read(const YAML::Node& root) {
    ConfigSnapshot snap;
    if (!root.IsMap()) {
      add("", "document root must be a mapping");
      return snap;
    }
    if (auto v = root["version"]) {
      if (auto n = integer(v, "version"); n) {
        if (*n < 1) {
          add("version", "version must be >= 1");
        } else {
          snap.version = static_cast<std::uint64_t>(*n);
        }
      }
    }
    if (auto ls = root["listeners"]) {
      if (!ls.IsSequence()) {
        add("listeners", "must be a list");
      } else {
        for (std::size_t i = 0; i < ls.size(); ++i) {
          snap.listeners.push_back(listener(ls[i], idx("listeners", i)));
        }
      }
    } else {
      add("listeners", "missing");
    }
    if (auto cs = root["clusters"]) {
      if (!cs.IsSequence()) {
        add("clusters", "must be a list");
      } else {
        for (std::size_t i = 0; i < cs.size(); ++i) {
          snap.clusters.push_back(cluster(cs[i], idx("clusters", i)));
        }
      }
    } else {
      add("clusters", "missing");
    }
    return snap;
  }

 private:
  void add(std::string path, std::string msg) { violations.push_back({std::move(path), std::move(msg)}); }

  std::optional<std::string> scalar(const YAML::Node& n, const std::string& path) {
    if (!n || !n.IsScalar()) {
      add(path, n ? "must be a scalar" : "missing");
      return std::nullopt;
    }
    return n.Scalar();
  }

  std::optional<long long> integer(const YAML::Node& n, const std::string& path) {
    auto s = scalar(n, path);
    if (!s) return std::nullopt;
    try {
      std::size_t used = 0;
      long long v = std::stoll(*s, &used);
      if (used != s->size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      add(path, "must be an integer");
      return std::nullopt;
    }
  }

  Listener listener(const YAML::Node& n, const std::string& path) {
    Listener l;
    if (!n.IsMap()) {
      add(path, "must be a mapping");
      return l;
    }
    l.name = scalar(n["name"], path + ".name").value_or("");
    l.bind = scalar(n["bind"], path + ".bind").value_or("");
    l.tenant_group = scalar(n["tenant_group"], path + ".tenant_group").value_or("");
    if (n["virtual_ip"]) l.virtual_ip = scalar(n["virtual_ip"], path + ".virtual_ip");
    if (n["default_cluster"]) l.default_cluster = scalar(n["default_cluster"], path + ".default_cluster");
    auto fs = n["filters"];
    if (!fs) {
      add(path + ".filters", "missing");
    } else if (!fs.IsSequence()) {
      add(path + ".filters", "must be a list");
    } else {
      for (std::size_t i = 0; i < fs.size(); ++i) {
        l.filters.push_back(filter(fs[i], idx(path + ".filters", i)));
      }
    }
    return l;
  }

  Filter filter(const YAML::Node& n, const std::string& path) {
    Filter f;
    if (!n.IsMap()) {
      add(path, "must be a mapping");
      return f;
    }
    if (auto t = scalar(n["type"], path + ".config_type")) {
      if (*t == "http1") {
        f.type = Protocol::Http11;
      } else if (*t == "mux") {
        f.type = Protocol::Mux;
      } else {
        add(path + ".config_type", "unknown filter type '" + *t + "'");
      }
    }
    auto rs = n["routes"];
    if (!rs || !rs.IsSequence()) {
      add(path + ".routes", rs ? "must be a list" : "missing");
    } else {
      for (std::size_t i = 0; i < rs.size(); ++i) f.routes.push_back(route(rs[i], idx(path + ".routes", i)));
    }
    return f;
  }

  RouteRule route(const YAML::Node& n, const std::string& path) {
    RouteRule r;
    if (!n.IsMap()) {
      add(path, "must be a mapping");
      return r;
    }
    if (auto field = scalar(n["field"], path + ".match_field")) {
      if (*field == "path") {
        r.field = MatchField::Path;
      } else if (*field == "method") {
        r.field = MatchField::Method;
      } else if (field->rfind("header:", 0) == 0) {
        r.field = MatchField::Header;
        r.header = lowercase(field->substr(7));
      } else {
        add(path + ".match_field", "unknown field '" + *field + "'");
      }
    }
    if (auto kind = scalar(n["kind"], path + ".match_kind")) {
      if (*kind == "exact") {
        r.kind = MatchKind::Exact;
      } else if (*kind == "prefix") {
        r.kind = MatchKind::Prefix;
      } else if (*kind == "regex") {
        r.kind = MatchKind::Regex;
      } else {
        add(path + ".match_kind", "unknown kind '" + *kind + "'");
      }
    }
    r.value = scalar(n["value"], path + ".match_value").value_or("");
    r.cluster = scalar(n["cluster"], path + ".cluster_ref").value_or("");
    return r;
  }

  Cluster cluster(const YAML::Node& n, const std::string& path) {
    Cluster c;
    if (!n.IsMap()) {
      add(path, "must be a mapping");
      return c;
    }
    c.name = scalar(n["name"], path + ".name").value_or("");
    if (auto p = scalar(n["policy"], path + ".lb_policy")) {
      if (*p == "round_robin") {
        c.policy = LbPolicy::RoundRobin;
      } else if (*p == "random") {
        c.policy = LbPolicy::Random;
      } else if (*p == "least_request") {
        c.policy = LbPolicy::LeastRequest;
      } else {
        add(path + ".lb_policy", "unknown policy '" + *p + "'");
      }
    }
    auto es = n["endpoints"];
    if (!es || !es.IsSequence()) {
      add(path + ".endpoints", es ? "must be a list" : "missing");
      return c;
    }
    for (std::size_t i = 0; i < es.size(); ++i) {
      const std::string ep = idx(path + ".endpoints", i);
      Endpoint e;
      if (!es[i].IsMap()) {
        add(ep, "must be a mapping");
        continue;
      }
      e.address = scalar(es[i]["addr"], ep + ".address").value_or("");
      if (auto port = integer(es[i]["port"], ep + ".port")) {
        if (*port < 1 || *port > 65535) {
          add(ep + ".port", "port out of range");
        } else {
          e.port = static_cast<std::uint16_t>(*port);
        }
      }
      if (es[i]["weight"]) {
        if (auto w = integer(es[i]["weight"], ep + ".weight")) {
          if (*w < 1 || *w > 0xffffffffLL) {
            add(ep + ".weight", "weight must be >= 1");
          } else {
            e.weight = static_cast<std::uint32_t>(*w);
          }
        }
      }
      c.endpoints.push_back(std::move(e));
    }
    return c;
  }
};

}  // namespace

std::vector<Violation> validate_snapshot(const ConfigSnapshot& snap, const ValidationOptions& opts) {
  std::vector<Violation> out;
  auto add = [&](std::string path, std::string msg) { out.push_back({std::move(path), std::move(msg)}); };

  if (snap.version < 1) add("version", "version must be >= 1");

  std::unordered_set<std::string> cluster_names;
  for (std::size_t i = 0; i < snap.clusters.size(); ++i) {
    const auto& c = snap.clusters[i];
    const std::string path = idx("clusters", i);
    if (!is_identifier(c.name)) add(path + ".name", "invalid identifier");
    if (!cluster_names.insert(c.name).second) add(path + ".name", "duplicate cluster name '" + c.name + "'");
    if (c.endpoints.empty()) add(path + ".endpoints", "cluster has no endpoints");
    if (c.endpoints.size() > kMaxEndpoints) add(path + ".endpoints", "endpoint count exceeds bound");
    std::set<std::pair<std::string, std::uint16_t>> seen;
    for (std::size_t j = 0; j < c.endpoints.size(); ++j) {
      const auto& e = c.endpoints[j];
      const std::string ep = idx(path + ".endpoints", j);
      if (!is_ip_address(e.address)) add(ep + ".address", "not an IPv4/IPv6 address");
      if (e.port == 0) add(ep + ".port", "port out of range");
      if (e.weight < 1) add(ep + ".weight", "weight must be >= 1");
      if (!seen.emplace(e.address, e.port).second) add(ep, "duplicate endpoint");
    }
  }

  std::unordered_set<std::string> referenced;
  std::unordered_set<std::string> binds;
  std::unordered_set<std::string> listener_names;
  for (std::size_t i = 0; i < snap.listeners.size(); ++i) {
    const auto& l = snap.listeners[i];
    const std::string path = idx("listeners", i);
    if (!is_identifier(l.name)) add(path + ".name", "invalid identifier");
    if (!listener_names.insert(l.name).second) add(path + ".name", "duplicate listener name '" + l.name + "'");
    if (!parse_host_port(l.bind)) add(path + ".bind_address", "expected ip:port");
    if (!binds.insert(l.bind).second) add(path + ".bind_address", "duplicate bind address '" + l.bind + "'");
    if (l.virtual_ip && !is_ip_address(*l.virtual_ip)) add(path + ".virtual_ip", "not an IP address");
    if (!is_identifier(l.tenant_group)) add(path + ".tenant_group", "invalid identifier");
    if (l.filters.size() > kFilterMaxNum) add(path + ".filters", "filter count exceeds bound");
    if (l.default_cluster) {
      referenced.insert(*l.default_cluster);
      if (!cluster_names.count(*l.default_cluster)) {
        add(path + ".default_cluster", "unknown cluster '" + *l.default_cluster + "'");
      }
    } else if (l.filters.empty()) {
      add(path + ".filters", "listener without filters needs default_cluster");
    }
    for (std::size_t j = 0; j < l.filters.size(); ++j) {
      const auto& f = l.filters[j];
      const std::string fp = idx(path + ".filters", j);
      if (f.routes.empty()) add(fp + ".routes", "filter has no routes");
      if (f.routes.size() > kRouteMaxNum) add(fp + ".routes", "route count exceeds bound");
      for (std::size_t k = 0; k < f.routes.size(); ++k) {
        const auto& r = f.routes[k];
        const std::string rp = idx(fp + ".routes", k);
        if (r.field == MatchField::Header && !is_header_token(r.header)) {
          add(rp + ".match_field", "invalid header name");
        }
        if (r.kind == MatchKind::Regex) {
          if (auto err = Regex::check(r.value)) add(rp + ".match_value", *err);
        }
        referenced.insert(r.cluster);
        if (!cluster_names.count(r.cluster)) add(rp + ".cluster_ref", "unknown cluster '" + r.cluster + "'");
      }
    }
  }

  if (opts.strict) {
    for (std::size_t i = 0; i < snap.clusters.size(); ++i) {
      if (!referenced.count(snap.clusters[i].name)) {
        add(idx("clusters", i), "cluster '" + snap.clusters[i].name + "' is not referenced");
      }
    }
  }

  if (snap.node_count() > kMapCapacity) {
    add("", "node count " + std::to_string(snap.node_count()) + " exceeds map capacity");
  }
  return out;
}

namespace {

std::string describe(const std::vector<Violation>& vs) {
  std::ostringstream os;
  os << "invalid config:";
  for (const auto& v : vs) os << "\n  " << (v.path.empty() ? "<root>" : v.path) << ": " << v.message;
  return os.str();
}

}  // namespace

ConfigSnapshot parse_config(std::string_view text, const ValidationOptions& opts) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(ConfigError::Kind::Syntax, std::string("syntax error: ") + e.what());
  }
  Reader reader;
  ConfigSnapshot snap = reader.read(root);
  auto violations = std::move(reader.violations);
  if (violations.empty()) violations = validate_snapshot(snap, opts);
  if (!violations.empty()) {
    std::string msg = describe(violations);
    throw ConfigError(ConfigError::Kind::Validation, std::move(msg), std::move(violations));
  }
  return snap;
}

ConfigSnapshot load_config_file(const std::string& path, const ValidationOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(ConfigError::Kind::Syntax, "cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), opts);
}

std::optional<std::uint64_t> declared_version(std::string_view text) {
  try {
    YAML::Node root = YAML::Load(std::string(text));
    if (!root.IsMap() || !root["version"]) return std::nullopt;
    return root["version"].as<std::uint64_t>();
  } catch (const YAML::Exception&) {
    return std::nullopt;
  }
}

std::string serialize_config(const ConfigSnapshot& snap) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["version"] = snap.version;
  doc["listeners"] = ordered_json::array();
  for (const auto& l : snap.listeners) {
    ordered_json jl;
    jl["name"] = l.name;
    jl["bind"] = l.bind;
    if (l.virtual_ip) jl["virtual_ip"] = *l.virtual_ip;
    jl["tenant_group"] = l.tenant_group;
    if (l.default_cluster) jl["default_cluster"] = *l.default_cluster;
    jl["filters"] = ordered_json::array();
    for (const auto& f : l.filters) {
      ordered_json jf;
      jf["type"] = std::string(to_string(f.type));
      jf["routes"] = ordered_json::array();
      for (const auto& r : f.routes) {
        ordered_json jr;
        switch (r.field) {
          case MatchField::Path: jr["field"] = "path"; break;
          case MatchField::Method: jr["field"] = "method"; break;
          case MatchField::Header: jr["field"] = "header:" + r.header; break;
        }
        jr["kind"] = std::string(to_string(r.kind));
        jr["value"] = r.value;
        jr["cluster"] = r.cluster;
        jf["routes"].push_back(std::move(jr));
      }
      jl["filters"].push_back(std::move(jf));
    }
    doc["listeners"].push_back(std::move(jl));
  }
  doc["clusters"] = ordered_json::array();
  for (const auto& c : snap.clusters) {
    ordered_json jc;
    jc["name"] = c.name;
    jc["policy"] = std::string(to_string(c.policy));
    jc["endpoints"] = ordered_json::array();
    for (const auto& e : c.endpoints) {
      ordered_json je;
      je["addr"] = e.address;
      je["port"] = e.port;
      if (e.weight != 1) je["weight"] = e.weight;
      jc["endpoints"].push_back(std::move(je));
    }
    doc["clusters"].push_back(std::move(jc));
  }
  return doc.dump(2) + "\n";
}

}  // namespace xlb
