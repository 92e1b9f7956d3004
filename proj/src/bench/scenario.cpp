#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "json.hpp"
#include "xlb/bench.hpp"

extern char** environ;

namespace xlb::bench {

namespace fs = std::filesystem;
using nlohmann::json;

Process::Process(std::vector<std::string> argv, const fs::path& log) {
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
  std::vector<char*> args;
  for (auto& a : argv) args.push_back(a.data());
  args.push_back(nullptr);
  int rc = posix_spawn(&pid_, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw std::runtime_error("cannot spawn " + argv[0] + ": " + std::strerror(rc));
}

Process::~Process() { terminate(); }

bool Process::alive() {
  if (reaped_) return false;
  int status = 0;
  if (waitpid(pid_, &status, WNOHANG) == pid_) {
    reaped_ = true;
    status_ = status;
    return false;
  }
  return true;
}

int Process::terminate() {
  if (!reaped_) {
    kill(pid_, SIGTERM);
    for (int i = 0; i < 200 && alive(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    if (!reaped_) {
      kill(pid_, SIGKILL);
      waitpid(pid_, &status_, 0);
      reaped_ = true;
    }
  }
  if (WIFEXITED(status_)) return WEXITSTATUS(status_);
  if (WIFSIGNALED(status_)) return -WTERMSIG(status_);
  return -1;
}

std::uint16_t free_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  socklen_t len = sizeof(addr);
  if (fd < 0 || ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
    if (fd >= 0) ::close(fd);
    throw std::runtime_error("no free port");
  }
  ::close(fd);
  return ntohs(addr.sin_port);
}

bool wait_for_port(std::uint16_t port, std::chrono::milliseconds timeout) {
  auto until = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < until) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    bool ok = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0;
    ::close(fd);
    if (ok) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return false;
}

std::string hop_config(std::uint16_t listen_port, const std::vector<std::uint16_t>& next, Protocol protocol,
                       const std::vector<std::string>& service_paths) {
  const char* type = protocol == Protocol::Mux ? "mux" : "http1";
  json routes = json::array();
  json clusters = json::array();
  auto endpoint = [](std::uint16_t port) { return json{{"addr", "127.0.0.1"}, {"port", port}}; };
  if (service_paths.empty()) {
    json eps = json::array();
    for (auto p : next) eps.push_back(endpoint(p));
    routes.push_back({{"field", "path"}, {"kind", "prefix"}, {"value", "/"}, {"cluster", "next"}});
    clusters.push_back({{"name", "next"}, {"policy", "round_robin"}, {"endpoints", eps}});
  } else {
    for (std::size_t i = 0; i < service_paths.size(); ++i) {
      std::string name = "svc" + std::to_string(i);
      routes.push_back({{"field", "path"}, {"kind", "prefix"}, {"value", service_paths[i]}, {"cluster", name}});
      clusters.push_back(
          {{"name", name}, {"policy", "round_robin"}, {"endpoints", json::array({endpoint(next[i % next.size()])})}});
    }
  }
  json doc = {{"version", 1},
              {"listeners",
               json::array({{{"name", "hop"},
                             {"bind", "127.0.0.1:" + std::to_string(listen_port)},
                             {"tenant_group", "bench"},
                             {"filters", json::array({{{"type", type}, {"routes", routes}}})}}})},
              {"clusters", clusters}};
  return doc.dump(2);
}

namespace {

struct Daemon {
  std::uint16_t listen_port = 0;
  std::uint16_t admin_port = 0;
};

struct Topology {
  std::vector<std::unique_ptr<Process>> procs;
  std::vector<Daemon> daemons;  // client side first
  std::uint16_t entry_port = 0;
};

std::string self_exe() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  return ec ? std::string() : p.string();
}

void wait_ready(std::uint16_t port, const std::string& what) {
  if (!wait_for_port(port, std::chrono::seconds(10))) throw std::runtime_error(what + " did not come up on port " + std::to_string(port));
}

// client -> [sidecar_1] -> relay_1 -> ... -> [sidecar_L] -> relay_L -> backends
Topology build(const ScenarioOptions& o, const std::string& mode, std::size_t length, std::size_t services,
               const fs::path& dir, const std::string& tag) {
  Topology t;
  const bool sidecar = mode == "sidecar";
  std::vector<std::uint16_t> backend_ports;
  for (std::size_t k = 0; k < std::max<std::size_t>(1, services); ++k) {
    auto port = free_port();
    t.procs.push_back(std::make_unique<Process>(
        std::vector<std::string>{o.bench_path, "backend", "--port", std::to_string(port), "--think-us",
                                 std::to_string(o.think_time.count()), "--name", "b" + std::to_string(k)},
        dir / (tag + "-backend" + std::to_string(k) + ".log")));
    backend_ports.push_back(port);
  }
  std::vector<std::string> paths;
  if (services > 1) {
    for (std::size_t k = 0; k < services; ++k) paths.push_back("/svc" + std::to_string(k));
  }

  auto spawn_daemon = [&](std::uint16_t listen, const std::string& config, bool as_sidecar, const std::string& name) {
    Daemon d{listen, free_port()};
    auto cfg = dir / (tag + "-" + name + ".json");
    std::ofstream(cfg) << config;
    std::vector<std::string> argv{o.xlbd_path,  "--config", cfg.string(), "--admin-port", std::to_string(d.admin_port),
                                  "--log-level", "warn",   "--mode",     as_sidecar ? "sidecar" : "inline"};
    t.procs.push_back(std::make_unique<Process>(argv, dir / (tag + "-" + name + ".log")));
    return d;
  };

  std::vector<Daemon> chain;
  std::vector<std::uint16_t> next = backend_ports;
  for (std::size_t hop = length; hop >= 1; --hop) {
    auto relay_port = free_port();
    bool last = hop == length;
    chain.push_back(spawn_daemon(relay_port, hop_config(relay_port, next, o.protocol, last ? paths : std::vector<std::string>{}),
                                 false, "relay" + std::to_string(hop)));
    next = {relay_port};
    if (sidecar) {
      auto sc_port = free_port();
      chain.push_back(spawn_daemon(sc_port, hop_config(sc_port, next, o.protocol), true, "sidecar" + std::to_string(hop)));
      next = {sc_port};
    }
  }
  std::reverse(chain.begin(), chain.end());
  t.daemons = chain;
  t.entry_port = next.front();

  for (auto p : backend_ports) wait_ready(p, "backend");
  for (const auto& d : t.daemons) {
    wait_ready(d.listen_port, "relay");
    wait_ready(d.admin_port, "relay admin");
  }
  return t;
}

json fetch_stats(std::uint16_t admin_port) {
  httplib::Client cli("127.0.0.1", admin_port);
  cli.set_read_timeout(5, 0);
  auto res = cli.Get("/v1/stats");
  if (!res || res->status != 200) throw std::runtime_error("stats unavailable on admin port " + std::to_string(admin_port));
  return json::parse(res->body);
}

std::vector<long> default_params(const std::string& name, const ScenarioOptions& o) {
  if (name == "connections") return {1, 8, 64};
  if (name == "payload") return {0, 1024, 16384, 65536};
  if (name == "chain") return {1, 3, 5};
  if (name == "services") return {1, 4, 16};
  if (name == "compare") return {static_cast<long>(o.connections)};
  throw std::invalid_argument("unknown scenario " + name);
}

}  // namespace

std::vector<ScenarioRow> run_scenario(const ScenarioOptions& options) {
  ScenarioOptions o = options;
  if (o.bench_path.empty()) o.bench_path = self_exe();
  if (o.xlbd_path.empty()) o.xlbd_path = (fs::path(o.bench_path).parent_path() / "xlbd").string();
  fs::path dir = o.workdir;
  if (dir.empty()) {
    std::string tmpl = (fs::temp_directory_path() / "xlb-bench-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("cannot create work directory");
    dir = tmpl;
  }
  fs::create_directories(dir);

  auto params = o.params.empty() ? default_params(o.name, o) : o.params;
  std::vector<ScenarioRow> rows;
  for (long param : params) {
    for (const auto& mode : o.modes) {
      std::size_t length = o.chain_length;
      std::size_t services = 1;
      LoadOptions load;
      load.connections = o.connections;
      load.payload_bytes = o.payload_bytes;
      load.protocol = o.protocol;
      load.duration = o.duration;
      load.warmup = o.warmup;
      if (o.name == "connections") load.connections = static_cast<std::size_t>(param);
      if (o.name == "payload") load.payload_bytes = static_cast<std::size_t>(param);
      if (o.name == "chain") length = static_cast<std::size_t>(param);
      if (o.name == "services") services = static_cast<std::size_t>(param);
      if (services > 1) {
        load.paths.clear();
        for (std::size_t k = 0; k < services; ++k) load.paths.push_back("/svc" + std::to_string(k) + "/item");
      }

      std::string tag = o.name + "-" + mode + "-" + std::to_string(param);
      auto topo = build(o, mode, length, services, dir, tag);
      load.port = topo.entry_port;
      ScenarioRow row;
      row.scenario = o.name;
      row.mode = mode;
      row.param = param;
      row.report = run_load(load);
      row.daemons = topo.daemons.size();
      // Counters are compared at quiescence, once every relay has seen the
      // client side close.
      std::vector<json> stats;
      auto until = std::chrono::steady_clock::now() + std::chrono::seconds(3);
      for (;;) {
        stats.clear();
        bool idle = true;
        for (const auto& d : topo.daemons) {
          stats.push_back(fetch_stats(d.admin_port));
          const auto& st = stats.back();
          idle = idle && st["outstanding"]["total"] == 0 && st["relay"]["client_connections"] == 0 &&
                 st["relay"]["passthrough_connections"] == 0;
        }
        if (idle || std::chrono::steady_clock::now() > until) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
      for (std::size_t i = 0; i < topo.daemons.size(); ++i) {
        const auto& st = stats[i];
        row.hops.relayed_requests += st["relay"]["relayed_requests"].get<std::uint64_t>();
        row.hops.dispatches += st["outstanding"]["dispatches"].get<std::uint64_t>();
        row.hops.completions += st["outstanding"]["completions"].get<std::uint64_t>();
        if (i == 0) {
          row.hops.flow_tx_bytes = st["flows"]["totals"]["tx_bytes"].get<std::uint64_t>();
          row.hops.flow_rx_bytes = st["flows"]["totals"]["rx_bytes"].get<std::uint64_t>();
        }
      }
      row.hops.client_errors = row.report.errors;
      spdlog::info("{}", summary_line(row));
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string csv_header() { return "scenario,mode,param,throughput_rps,mean_us,p99_us,errors"; }

std::string csv_row(const ScenarioRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%ld,%.1f,%.1f,%.1f,%llu", r.scenario.c_str(), r.mode.c_str(), r.param,
                r.report.throughput_rps, r.report.mean_us, r.report.p99_us,
                static_cast<unsigned long long>(r.report.errors));
  return buf;
}

std::string summary_line(const ScenarioRow& r) {
  std::ostringstream out;
  out << r.scenario << " mode=" << r.mode << " param=" << r.param << ": " << static_cast<long>(r.report.throughput_rps)
      << " req/s, mean " << static_cast<long>(r.report.mean_us) << " us, p99 " << static_cast<long>(r.report.p99_us)
      << " us, errors " << r.report.errors << ", relays " << r.daemons << ", hops/request "
      << (r.report.completed ? static_cast<double>(r.hops.relayed_requests) / static_cast<double>(r.report.completed) : 0.0)
      << ", dispatches " << r.hops.dispatches << "/" << r.hops.completions << " completed";
  return out.str();
}

}  // namespace xlb::bench
