#include <signal.h>

#include <cstdlib>
#include <iostream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "xlb/daemon.hpp"

namespace {

constexpr int kExitInvalidConfig = 2;
constexpr int kExitBindFailure = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xlbd: L7 load balancing relay daemon"};
  xlb::DaemonOptions opts;
  std::string mode = "inline";
  std::string match_order = xlb::kDefaultMatchOrder == xlb::MatchOrder::Last ? "last" : "first";
  std::string log_level = "info";
  long timeout_ms = 30000;

  app.add_option("--config", opts.config_path, "config file (YAML or JSON); falls back to $XLB_CONFIG");
  app.add_option("--admin-port", opts.admin_port, "admin HTTP port on localhost (0 picks one)")->capture_default_str();
  app.add_option("--admin-host", opts.admin_host, "admin bind address")->capture_default_str();
  app.add_option("--mode", mode, "inline balances requests; sidecar splices bytes to the next hop")
      ->check(CLI::IsMember({"inline", "sidecar"}))
      ->capture_default_str();
  app.add_option("--match-order", match_order, "which matching route decides")
      ->check(CLI::IsMember({"first", "last"}))
      ->capture_default_str();
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();
  app.add_option("--min-conns", opts.relay.min_per_endpoint, "pre-established backend connections per endpoint")
      ->capture_default_str();
  app.add_option("--max-conns", opts.relay.max_per_endpoint, "backend connection cap per endpoint")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--dispatch-timeout-ms", timeout_ms, "per-request backend timeout")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  spdlog::set_level(spdlog::level::from_str(log_level));
  if (opts.config_path.empty()) {
    if (const char* env = std::getenv("XLB_CONFIG")) opts.config_path = env;
  }
  if (opts.config_path.empty()) {
    std::cerr << "xlbd: no config given (--config or XLB_CONFIG)\n";
    return kExitInvalidConfig;
  }
  opts.relay.sidecar = mode == "sidecar";
  opts.relay.match_order = match_order == "last" ? xlb::MatchOrder::Last : xlb::MatchOrder::First;
  opts.relay.dispatch_timeout = std::chrono::milliseconds(timeout_ms);

  // Block termination signals before any thread starts so only sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  signal(SIGPIPE, SIG_IGN);

  xlb::Daemon daemon(opts);
  try {
    daemon.boot();
  } catch (const xlb::ConfigError& e) {
    std::cerr << "xlbd: invalid config: " << e.what() << "\n";
    return kExitInvalidConfig;
  } catch (const xlb::BindError& e) {
    std::cerr << "xlbd: " << e.what() << "\n";
    return kExitBindFailure;
  } catch (const std::exception& e) {
    std::cerr << "xlbd: " << e.what() << "\n";
    return 1;
  }
  std::cout << "xlbd ready version=" << daemon.version() << " admin=" << daemon.admin_port() << " mode=" << mode
            << std::endl;

  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("signal {}, shutting down", sig);
  daemon.stop();
  return 0;
}
