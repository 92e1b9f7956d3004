#include <signal.h>

#include <fstream>
#include <iostream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "xlb/bench.hpp"

namespace {

xlb::Protocol protocol_of(const std::string& s) { return s == "mux" ? xlb::Protocol::Mux : xlb::Protocol::Http11; }

int run_backend(const xlb::bench::BackendOptions& opts, bool strict) {
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  xlb::bench::EchoBackend backend(opts);
  backend.on_violation = [strict](const std::string& what) {
    std::cerr << "bench backend: invariant violated: " << what << std::endl;
    if (strict) std::_Exit(4);
  };
  try {
    backend.start();
  } catch (const std::exception& e) {
    std::cerr << "bench backend: " << e.what() << "\n";
    return 3;
  }
  std::cout << "backend listening on " << backend.port() << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  backend.stop();
  auto st = backend.stats();
  std::cout << "requests=" << st.requests << " connections=" << st.connections
            << " http11_overlaps=" << st.http11_overlaps << " mux_duplicates=" << st.mux_duplicates << std::endl;
  return st.violations() == 0 ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  signal(SIGPIPE, SIG_IGN);
  CLI::App app{"bench: echo backend, closed-loop load generator and scenario runner"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level)->capture_default_str();

  auto* backend = app.add_subcommand("backend", "echo server asserting protocol invariants");
  xlb::bench::BackendOptions bopts;
  long think_us = 0;
  bool strict = false;
  backend->add_option("--port", bopts.port, "listen port (0 picks one)");
  backend->add_option("--host", bopts.host)->capture_default_str();
  backend->add_option("--think-us", think_us, "service time per request in microseconds");
  backend->add_option("--response-bytes", bopts.response_bytes, "fixed response size; -1 echoes the request body")
      ->capture_default_str();
  backend->add_option("--name", bopts.name, "value of the x-backend response header");
  backend->add_flag("--strict", strict, "exit nonzero on the first invariant violation");

  auto* load = app.add_subcommand("load", "closed-loop load against a target");
  xlb::bench::LoadOptions lopts;
  std::string lproto = "http1";
  long duration_ms = 5000, warmup_ms = 0;
  load->add_option("--port", lopts.port)->required();
  load->add_option("--host", lopts.host)->capture_default_str();
  load->add_option("--connections,-c", lopts.connections)->capture_default_str();
  load->add_option("--payload", lopts.payload_bytes, "request body bytes")->capture_default_str();
  load->add_option("--protocol", lproto)->check(CLI::IsMember({"http1", "mux"}))->capture_default_str();
  load->add_option("--streams", lopts.streams, "concurrent requests per mux connection")->capture_default_str();
  load->add_option("--duration-ms", duration_ms)->capture_default_str();
  load->add_option("--warmup-ms", warmup_ms)->capture_default_str();
  load->add_option("--requests", lopts.requests_per_connection, "requests per connection (0: until duration)");
  load->add_option("--rate", lopts.rate, "total request rate cap per second");
  load->add_option("--path", lopts.paths, "request paths, used round robin");
  load->add_flag("!--no-echo", lopts.expect_echo, "do not require echoed bodies");

  auto* scenario = app.add_subcommand("scenario", "spawn backends and relays and sweep one parameter");
  xlb::bench::ScenarioOptions sopts;
  std::string sproto = "http1", mode = "both", csv_path;
  long sduration_ms = 5000, swarmup_ms = 500, sthink_us = 0;
  scenario->add_option("name", sopts.name, "connections|payload|chain|services|compare")
      ->check(CLI::IsMember({"connections", "payload", "chain", "services", "compare"}))
      ->required();
  scenario->add_option("--mode", mode)->check(CLI::IsMember({"inline", "sidecar", "both"}))->capture_default_str();
  scenario->add_option("--params", sopts.params, "sweep points");
  scenario->add_option("--duration-ms", sduration_ms)->capture_default_str();
  scenario->add_option("--warmup-ms", swarmup_ms)->capture_default_str();
  scenario->add_option("--connections,-c", sopts.connections)->capture_default_str();
  scenario->add_option("--payload", sopts.payload_bytes)->capture_default_str();
  scenario->add_option("--chain", sopts.chain_length)->capture_default_str();
  scenario->add_option("--protocol", sproto)->check(CLI::IsMember({"http1", "mux"}))->capture_default_str();
  scenario->add_option("--think-us", sthink_us);
  scenario->add_option("--xlbd", sopts.xlbd_path, "xlbd binary (default: next to bench)");
  scenario->add_option("--workdir", sopts.workdir, "where configs and logs go");
  scenario->add_option("--csv", csv_path, "also write the CSV here");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  if (*backend) {
    bopts.think_time = std::chrono::microseconds(think_us);
    return run_backend(bopts, strict);
  }
  if (*load) {
    lopts.protocol = protocol_of(lproto);
    lopts.duration = std::chrono::milliseconds(duration_ms);
    lopts.warmup = std::chrono::milliseconds(warmup_ms);
    auto r = xlb::bench::run_load(lopts);
    std::cout << "requests=" << r.requests << " errors=" << r.errors << " mismatches=" << r.mismatches
              << " throughput_rps=" << r.throughput_rps << " mean_us=" << r.mean_us << " p50_us=" << r.p50_us
              << " p99_us=" << r.p99_us << " tx_bytes=" << r.tx_bytes << " rx_bytes=" << r.rx_bytes << std::endl;
    return r.errors == 0 ? 0 : 1;
  }

  sopts.protocol = protocol_of(sproto);
  sopts.duration = std::chrono::milliseconds(sduration_ms);
  sopts.warmup = std::chrono::milliseconds(swarmup_ms);
  sopts.think_time = std::chrono::microseconds(sthink_us);
  if (mode != "both") sopts.modes = {mode};
  try {
    auto rows = xlb::bench::run_scenario(sopts);
    std::ofstream csv;
    if (!csv_path.empty()) csv.open(csv_path);
    std::cout << xlb::bench::csv_header() << "\n";
    if (csv) csv << xlb::bench::csv_header() << "\n";
    for (const auto& row : rows) {
      std::cout << xlb::bench::csv_row(row) << "\n";
      if (csv) csv << xlb::bench::csv_row(row) << "\n";
    }
    for (const auto& row : rows) std::cerr << xlb::bench::summary_line(row) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "bench scenario: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
