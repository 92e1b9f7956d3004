#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>

#include <boost/asio/executor_work_guard.hpp>
#include <boost/asio/io_context.hpp>

#include "json.hpp"
#include "xlb/config.hpp"
#include "xlb/lb_policy.hpp"
#include "xlb/map_store.hpp"
#include "xlb/metrics.hpp"
#include "xlb/relay.hpp"

namespace httplib {
class Server;
}

namespace xlb {

struct DaemonOptions {
  std::string config_path;
  std::string admin_host = "127.0.0.1";
  std::uint16_t admin_port = 15001;  // 0 picks a free port
  bool serve_admin = true;
  RelayOptions relay;
};

class VersionConflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One per node: owns the store, the data-plane event loop and the admin
// endpoint. Config application is serialized; stats reads never take the
// writer lock.
class Daemon {
 public:
  explicit Daemon(DaemonOptions options);
  ~Daemon();

  Daemon(const Daemon&) = delete;
  Daemon& operator=(const Daemon&) = delete;

  // Throws ConfigError for a bad document and BindError when a listener or
  // the admin port cannot be bound.
  void boot();
  void boot_from_document(std::string_view document);

  // Returns the applied version. Throws ConfigError, VersionConflict or
  // StoreError; the active version is unchanged on any error.
  std::uint64_t submit_config(std::string_view document);

  nlohmann::json stats();
  std::string config_document() const;
  std::uint64_t version() const { return store_.version(); }

  std::uint16_t admin_port() const { return admin_port_; }
  // Bound port of a listener, 0 when not bound.
  std::uint16_t listener_port(const std::string& name);

  void stop();
  bool running() const { return running_; }

  NestedMapStore& store() { return store_; }
  LbState& lb() { return lb_; }
  MetricsRegistry& metrics() { return metrics_; }
  const DaemonOptions& options() const { return options_; }

 private:
  void start(ConfigSnapshot snap);
  void serve_admin();

  DaemonOptions options_;
  NestedMapStore store_;
  LbState lb_;
  MetricsRegistry metrics_;
  boost::asio::io_context io_;
  std::unique_ptr<Relay> relay_;
  std::optional<boost::asio::executor_work_guard<boost::asio::io_context::executor_type>> work_;
  std::thread io_thread_;

  std::unique_ptr<httplib::Server> admin_;
  std::thread admin_thread_;
  std::uint16_t admin_port_ = 0;

  mutable std::mutex config_mu_;
  ConfigSnapshot current_;
  std::atomic<bool> running_{false};
};

}  // namespace xlb
