#include "xlb/daemon.hpp"

#include <spdlog/spdlog.h>

#include "httplib.h"

namespace xlb {

namespace {

using nlohmann::json;

const char* protocol_name(Protocol p) { return p == Protocol::Mux ? "mux" : "http1"; }

json flow_json(const FlowSnapshot& f) {
  return json{{"conn_id", f.conn_id},
              {"tx_bytes", f.tx_bytes},
              {"rx_bytes", f.rx_bytes},
              {"request_count", f.request_count},
              {"no_route_match", f.no_route_match},
              {"orphan_responses", f.orphan_responses}};
}

json violations_json(const ConfigError& e) {
  json out = json::array();
  for (const auto& v : e.violations()) out.push_back({{"path", v.path}, {"message", v.message}});
  return out;
}

}  // namespace

Daemon::Daemon(DaemonOptions options) : options_(std::move(options)) {
  current_.version = 0;
}

Daemon::~Daemon() { stop(); }

void Daemon::boot() {
  if (options_.config_path.empty()) throw ConfigError(ConfigError::Kind::Syntax, "no config file given");
  start(load_config_file(options_.config_path));
}

void Daemon::boot_from_document(std::string_view document) { start(parse_config(document)); }

void Daemon::start(ConfigSnapshot snap) {
  {
    std::lock_guard lock(config_mu_);
    ConfigSnapshot empty;
    empty.version = 0;
    store_.apply_delta(store_.plan_delta(empty, snap));
    current_ = snap;
  }
  relay_ = std::make_unique<Relay>(io_, store_, lb_, metrics_, options_.relay);
  relay_->start(snap);
  if (options_.serve_admin) serve_admin();
  work_.emplace(io_.get_executor());
  relay_->loop_started();
  io_thread_ = std::thread([this] { io_.run(); });
  running_ = true;
  spdlog::info("booted config version {} with {} listener(s)", snap.version, snap.listeners.size());
}

void Daemon::serve_admin() {
  admin_ = std::make_unique<httplib::Server>();
  admin_->Get("/v1/stats", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(stats().dump(), "application/json");
  });
  admin_->Get("/v1/config", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(config_document(), "application/json");
  });
  admin_->Post("/v1/config", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      auto v = submit_config(req.body);
      res.set_content(json{{"version", v}}.dump(), "application/json");
    } catch (const ConfigError& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}, {"violations", violations_json(e)}}.dump(), "application/json");
    } catch (const VersionConflict& e) {
      res.status = 409;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    } catch (const StoreError& e) {
      res.status = 422;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  });

  int port = options_.admin_port;
  if (port == 0) {
    port = admin_->bind_to_any_port(options_.admin_host);
    if (port <= 0) throw BindError("admin: cannot bind " + options_.admin_host);
  } else if (!admin_->bind_to_port(options_.admin_host, port)) {
    throw BindError("admin: cannot bind " + options_.admin_host + ":" + std::to_string(port));
  }
  admin_port_ = static_cast<std::uint16_t>(port);
  admin_thread_ = std::thread([this] { admin_->listen_after_bind(); });
}

std::uint64_t Daemon::submit_config(std::string_view document) {
  ConfigSnapshot snap = parse_config(document);
  std::lock_guard lock(config_mu_);
  const std::uint64_t cur = current_.version;
  auto declared = declared_version(document);
  if (declared && *declared < cur) {
    throw VersionConflict("document version " + std::to_string(*declared) + " is older than active version " +
                          std::to_string(cur));
  }
  snap.version = declared && *declared > cur ? *declared : cur + 1;
  auto plan = store_.plan_delta(current_, snap);
  store_.apply_delta(plan);
  current_ = snap;
  spdlog::info("applied config version {} ({} adds, {} deletes)", snap.version, plan.adds.size(),
               plan.deletes.size());
  if (relay_) relay_->reconcile(snap);
  return snap.version;
}

std::string Daemon::config_document() const {
  std::lock_guard lock(config_mu_);
  return serialize_config(current_);
}

std::uint16_t Daemon::listener_port(const std::string& name) {
  if (!relay_) return 0;
  for (const auto& [n, port] : relay_->stats().listeners) {
    if (n == name) return port;
  }
  return 0;
}

json Daemon::stats() {
  json doc;
  doc["version"] = store_.version();
  doc["mode"] = options_.relay.sidecar ? "sidecar" : "inline";
  doc["match_order"] = options_.relay.match_order == MatchOrder::Last ? "last" : "first";
  doc["store"] = {{"occupancy", store_.occupancy()},
                  {"capacity", kMapCapacity},
                  {"maps", store_.map_count()},
                  {"peak_occupancy", store_.peak_occupancy()}};

  // Going through the event loop first lets completed writes reach the
  // counters read below.
  std::optional<RelayStats> rs;
  if (relay_ && running_) rs = relay_->stats();

  json live = json::array();
  for (const auto& f : metrics_.live_flows()) live.push_back(flow_json(f));
  auto totals = metrics_.totals();
  doc["flows"] = {{"live", live}, {"retired", flow_json(metrics_.retired())}, {"totals", flow_json(totals)}};
  doc["no_route_match"] = totals.no_route_match;

  json clusters = json::array();
  for (const auto& c : metrics_.clusters()) {
    clusters.push_back({{"name", c.name},
                        {"requests", c.requests},
                        {"tx_bytes", c.tx_bytes},
                        {"rx_bytes", c.rx_bytes},
                        {"responses", c.responses},
                        {"errors", c.errors}});
  }
  doc["clusters"] = clusters;

  const auto& table = lb_.outstanding();
  json endpoints = json::array();
  for (const auto& [key, n] : table.all()) endpoints.push_back({{"endpoint", key.to_string()}, {"outstanding", n}});
  doc["outstanding"] = {{"dispatches", table.dispatches()},
                        {"completions", table.completions()},
                        {"underflows", table.underflows()},
                        {"total", table.total_outstanding()},
                        {"endpoints", endpoints}};

  json relay = {{"relayed_requests", metrics_.relayed_requests.load()},
                {"orphan_responses", metrics_.orphan_responses.load()},
                {"discarded_responses", metrics_.discarded_responses.load()},
                {"error_responses", metrics_.error_responses.load()}};
  json pools = json::array();
  json listeners = json::array();
  if (rs) {
    for (const auto& p : rs->pools) {
      pools.push_back({{"tenant_group", p.tenant_group},
                       {"endpoint", p.endpoint},
                       {"protocol", protocol_name(p.protocol)},
                       {"connections", p.connections},
                       {"ready", p.ready},
                       {"mapped", p.mapped},
                       {"held", p.held},
                       {"max_held", p.max_held}});
    }
    for (const auto& [name, port] : rs->listeners) listeners.push_back({{"name", name}, {"port", port}});
    relay["client_connections"] = rs->client_connections;
    relay["passthrough_connections"] = rs->passthrough_connections;
    relay["backend_connects"] = rs->backend_connects;
    relay["backend_failures"] = rs->backend_failures;
    relay["timeouts"] = rs->timeouts;
  }
  doc["relay"] = relay;
  doc["pools"] = pools;
  doc["listeners"] = listeners;
  return doc;
}

void Daemon::stop() {
  if (admin_) {
    admin_->stop();
    if (admin_thread_.joinable()) admin_thread_.join();
  }
  if (running_.exchange(false)) {
    relay_->stop();
    work_.reset();
    io_.stop();
  }
  if (io_thread_.joinable()) io_thread_.join();
}

}  // namespace xlb
