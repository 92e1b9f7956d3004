#include <gtest/gtest.h>

#include <sys/socket.h>
#include <sys/time.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <thread>

#include <boost/asio.hpp>

#include "httplib.h"
#include "json.hpp"
#include "xlb/bench.hpp"
#include "xlb/codec.hpp"
#include "xlb/daemon.hpp"

namespace xlb {
namespace {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using nlohmann::json;
using namespace std::chrono_literals;

json endpoint(std::uint16_t port) { return {{"addr", "127.0.0.1"}, {"port", port}}; }

json cluster(const std::string& name, const std::vector<std::uint16_t>& ports, const std::string& policy = "round_robin") {
  json eps = json::array();
  for (auto p : ports) eps.push_back(endpoint(p));
  return {{"name", name}, {"policy", policy}, {"endpoints", eps}};
}

json listener(const std::string& name, std::uint16_t port, const std::string& type, json routes,
              const std::string& tenant = "t") {
  return {{"name", name},
          {"bind", "127.0.0.1:" + std::to_string(port)},
          {"tenant_group", tenant},
          {"filters", json::array({{{"type", type}, {"routes", routes}}})}};
}

json prefix_route(const std::string& value, const std::string& cluster) {
  return {{"field", "path"}, {"kind", "prefix"}, {"value", value}, {"cluster", cluster}};
}

// Single listener, single cluster, everything under "/" routed.
std::string simple_config(std::uint16_t listen, const std::vector<std::uint16_t>& backends,
                          const std::string& type = "http1", std::uint64_t version = 1) {
  json doc = {{"version", version},
              {"listeners", json::array({listener("front", listen, type, json::array({prefix_route("/", "c")}))})},
              {"clusters", json::array({cluster("c", backends)})}};
  return doc.dump();
}

DaemonOptions quiet(RelayOptions relay = {}) {
  DaemonOptions o;
  o.serve_admin = false;
  o.relay = relay;
  return o;
}

bool wait_until(const std::function<bool()>& pred, std::chrono::milliseconds timeout = 5000ms) {
  auto until = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < until) {
    if (pred()) return true;
    std::this_thread::sleep_for(5ms);
  }
  return pred();
}

std::unique_ptr<bench::EchoBackend> echo(std::chrono::microseconds think = 0us, const std::string& name = "") {
  bench::BackendOptions o;
  o.think_time = think;
  o.name = name;
  auto b = std::make_unique<bench::EchoBackend>(o);
  b->start();
  return b;
}

class Client {
 public:
  explicit Client(std::uint16_t port) : socket_(io_) {
    socket_.connect(tcp::endpoint(asio::ip::make_address("127.0.0.1"), port));
    timeval tv{5, 0};
    ::setsockopt(socket_.native_handle(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  }

  void send(const Request& r) { send_raw(encode_request(r)); }
  void send_raw(const std::string& bytes) { asio::write(socket_, asio::buffer(bytes)); }

  std::optional<Response> recv() {
    for (;;) {
      auto result = decode_response(inbuf_);
      if (auto* d = std::get_if<Decoded<Response>>(&result)) {
        Response r = std::move(d->message);
        inbuf_.erase(0, d->consumed);
        return r;
      }
      if (std::holds_alternative<ProtocolError>(result)) return std::nullopt;
      char buf[4096];
      boost::system::error_code ec;
      std::size_t n = socket_.read_some(asio::buffer(buf), ec);
      if (ec) return std::nullopt;
      inbuf_.append(buf, n);
    }
  }

  std::optional<Response> call(const Request& r) {
    send(r);
    return recv();
  }

  void close() {
    boost::system::error_code ec;
    socket_.close(ec);
  }

 private:
  asio::io_context io_;
  tcp::socket socket_;
  std::string inbuf_;
};

Request make_request(const std::string& path, const std::string& nonce, Protocol p = Protocol::Http11,
                     std::optional<std::uint32_t> stream = std::nullopt, const std::string& body = "") {
  Request r;
  r.protocol = p;
  r.stream_id = p == Protocol::Mux ? stream.value_or(1) : std::optional<std::uint32_t>{};
  r.method = body.empty() ? "GET" : "POST";
  r.path = path;
  r.headers.push_back({"x-nonce", nonce});
  if (!body.empty()) {
    r.headers.push_back({"content-length", std::to_string(body.size())});
    r.body = body;
  }
  return r;
}

// Backend driven by a blocking script, one accepted connection at a time.
class ScriptedBackend {
 public:
  using Script = std::function<void(tcp::socket&)>;

  explicit ScriptedBackend(Script script) : acceptor_(io_, tcp::endpoint(asio::ip::make_address("127.0.0.1"), 0)) {
    port_ = acceptor_.local_endpoint().port();
    thread_ = std::thread([this, script = std::move(script)] {
      for (;;) {
        boost::system::error_code ec;
        tcp::socket s(io_);
        acceptor_.accept(s, ec);
        if (ec || done_) return;
        script(s);
        sockets_.push_back(std::move(s));
      }
    });
  }

  ~ScriptedBackend() {
    done_ = true;
    boost::system::error_code ec;
    ::shutdown(acceptor_.native_handle(), SHUT_RDWR);
    acceptor_.close(ec);
    thread_.join();
  }

  std::uint16_t port() const { return port_; }

 private:
  asio::io_context io_;
  tcp::acceptor acceptor_;
  std::uint16_t port_ = 0;
  std::atomic<bool> done_{false};
  std::vector<tcp::socket> sockets_;
  std::thread thread_;
};

// Reads until `n` complete requests are buffered.
std::vector<Request> read_requests(tcp::socket& s, std::size_t n) {
  std::vector<Request> out;
  std::string buf;
  char chunk[4096];
  while (out.size() < n) {
    boost::system::error_code ec;
    std::size_t got = s.read_some(asio::buffer(chunk), ec);
    if (ec) break;
    buf.append(chunk, got);
    for (;;) {
      auto r = decode_request(buf);
      auto* d = std::get_if<Decoded<Request>>(&r);
      if (!d) break;
      out.push_back(d->message);
      buf.erase(0, d->consumed);
    }
  }
  return out;
}

struct Bed {
  std::unique_ptr<Daemon> daemon;
  std::uint16_t port = 0;

  Bed(const std::function<std::string(std::uint16_t)>& config, DaemonOptions options = quiet()) {
    port = bench::free_port();
    daemon = std::make_unique<Daemon>(options);
    daemon->boot_from_document(config(port));
  }

  json stats() { return daemon->stats(); }
  json relay() { return stats()["relay"]; }
};

TEST(Relay, BootPreEstablishesPool) {
  auto a = echo(), b = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port(), b->port()}); });
  EXPECT_EQ(bed.daemon->version(), 1u);
  ASSERT_TRUE(wait_until([&] { return a->stats().connections == 1 && b->stats().connections == 1; }));
  auto s = bed.stats();
  ASSERT_EQ(s["pools"].size(), 2u);
  for (const auto& p : s["pools"]) {
    EXPECT_EQ(p["tenant_group"], "t");
    EXPECT_GE(p["connections"].get<int>(), 1);
  }
  EXPECT_EQ(s["listeners"][0]["port"], bed.port);
}

TEST(Relay, Http11RoundTripAndFlowCounters) {
  auto a = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  Client c(bed.port);
  for (int i = 0; i < 5; ++i) {
    auto r = c.call(make_request("/api", "n" + std::to_string(i), Protocol::Http11, {}, std::string(100, 'b')));
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(*r->header("x-nonce"), "n" + std::to_string(i));
    EXPECT_EQ(r->body, std::string(100, 'b'));
  }
  auto s = bed.stats();
  ASSERT_EQ(s["flows"]["live"].size(), 1u);
  EXPECT_EQ(s["flows"]["live"][0]["request_count"], 5);
  EXPECT_GE(s["flows"]["live"][0]["rx_bytes"].get<std::uint64_t>(), 500u);
  EXPECT_EQ(s["clusters"][0]["requests"], 5);
  EXPECT_EQ(s["relay"]["relayed_requests"], 5);
}

TEST(Relay, NoRouteReturns404) {
  auto a = echo();
  Bed bed([&](std::uint16_t p) {
    json doc = {{"listeners", json::array({listener("front", p, "http1", json::array({prefix_route("/api", "c")}))})},
                {"clusters", json::array({cluster("c", {a->port()})})}};
    return doc.dump();
  });
  Client c(bed.port);
  auto r = c.call(make_request("/zzz", "x"));
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(r->body, "no_route_match");
  EXPECT_EQ(bed.stats()["no_route_match"], 1);
  EXPECT_EQ(a->stats().requests, 0u);
  // the connection stays usable
  auto ok = c.call(make_request("/api/1", "y"));
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 200);
}

TEST(Relay, Http11RequestsWaitInHoldQueue) {
  auto a = echo(50ms);
  RelayOptions ro;
  ro.max_per_endpoint = 1;
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); }, quiet(ro));
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int i = 0; i < 4; ++i) {
    threads.emplace_back([&, i] {
      Client c(bed.port);
      auto r = c.call(make_request("/", "h" + std::to_string(i)));
      if (r && r->status == 200 && *r->header("x-nonce") == "h" + std::to_string(i)) ++ok;
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), 4);
  auto st = a->stats();
  EXPECT_EQ(st.http11_overlaps, 0u);
  EXPECT_EQ(st.connections, 1u);
  EXPECT_GE(bed.stats()["pools"][0]["max_held"].get<int>(), 1);
}

TEST(Relay, MuxClientsShareOneConnectionWithRemappedIds) {
  auto a = echo(50ms);
  RelayOptions ro;
  ro.max_per_endpoint = 1;
  Bed bed([&](auto p) { return simple_config(p, {a->port()}, "mux"); }, quiet(ro));
  Client c1(bed.port), c2(bed.port);
  c1.send(make_request("/", "one", Protocol::Mux, 7));
  c2.send(make_request("/", "two", Protocol::Mux, 7));
  auto r1 = c1.recv(), r2 = c2.recv();
  ASSERT_TRUE(r1 && r2);
  EXPECT_EQ(*r1->header("x-nonce"), "one");
  EXPECT_EQ(*r2->header("x-nonce"), "two");
  EXPECT_EQ(r1->stream_id, 7u);
  EXPECT_EQ(r2->stream_id, 7u);
  EXPECT_NE(*r1->header("x-backend-stream"), *r2->header("x-backend-stream"));
  auto st = a->stats();
  EXPECT_EQ(st.mux_duplicates, 0u);
  EXPECT_EQ(st.connections, 1u);
  EXPECT_EQ(st.max_mux_in_flight, 2u);
}

TEST(Relay, UnsolicitedResponseIsOrphan) {
  ScriptedBackend backend([](tcp::socket& s) {
    Response r;
    r.headers.push_back({"content-length", "0"});
    asio::write(s, asio::buffer(encode_response(r)));
  });
  Bed bed([&](auto p) { return simple_config(p, {backend.port()}); });
  ASSERT_TRUE(wait_until([&] { return bed.relay()["orphan_responses"] == 1; }));
}

TEST(Relay, BackendFailureFailsEveryOwedRequest) {
  ScriptedBackend backend([](tcp::socket& s) {
    read_requests(s, 3);
    s.close();
  });
  RelayOptions ro;
  ro.max_per_endpoint = 1;
  ro.min_per_endpoint = 1;
  Bed bed([&](auto p) { return simple_config(p, {backend.port()}, "mux"); }, quiet(ro));
  Client c(bed.port);
  for (std::uint32_t id = 1; id <= 3; ++id) c.send(make_request("/", "k" + std::to_string(id), Protocol::Mux, id));
  std::set<std::uint32_t> failed;
  for (int i = 0; i < 3; ++i) {
    auto r = c.recv();
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 503);
    failed.insert(*r->stream_id);
  }
  EXPECT_EQ(failed, (std::set<std::uint32_t>{1, 2, 3}));
  auto s = bed.stats();
  EXPECT_EQ(s["outstanding"]["total"], 0);
  EXPECT_EQ(s["outstanding"]["dispatches"], s["outstanding"]["completions"]);
}

TEST(Relay, ResponseForDepartedClientIsDiscarded) {
  auto a = echo(100ms);
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  {
    Client c(bed.port);
    c.send(make_request("/", "gone"));
    ASSERT_TRUE(wait_until([&] { return a->stats().requests == 1; }));
    c.close();
  }
  ASSERT_TRUE(wait_until([&] { return bed.relay()["discarded_responses"] == 1; }));
  auto s = bed.stats();
  EXPECT_EQ(s["outstanding"]["total"], 0);
  EXPECT_EQ(s["outstanding"]["dispatches"], 1);
  EXPECT_EQ(s["outstanding"]["completions"], 1);
  EXPECT_EQ(s["outstanding"]["underflows"], 0);
  // the pooled connection is still usable
  Client c2(bed.port);
  auto r = c2.call(make_request("/", "next"));
  ASSERT_TRUE(r);
  EXPECT_EQ(*r->header("x-nonce"), "next");
}

TEST(Relay, SilentBackendTimesOut) {
  ScriptedBackend backend([](tcp::socket& s) { read_requests(s, 1); });
  RelayOptions ro;
  ro.dispatch_timeout = 200ms;
  Bed bed([&](auto p) { return simple_config(p, {backend.port()}); }, quiet(ro));
  Client c(bed.port);
  auto r = c.call(make_request("/", "slow"));
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 504);
  EXPECT_EQ(r->body, "upstream_timeout");
  auto s = bed.stats();
  EXPECT_EQ(s["relay"]["timeouts"], 1);
  EXPECT_EQ(s["outstanding"]["total"], 0);
}

TEST(Relay, MalformedClientInputGets400) {
  auto a = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  Client c(bed.port);
  c.send_raw("GET / HTTP/1.1\r\ncontent-length: nope\r\n\r\n");
  auto r = c.recv();
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
}

TEST(Relay, PassthroughListenerSplices) {
  auto a = echo();
  Bed bed([&](std::uint16_t p) {
    json l = {{"name", "raw"},
              {"bind", "127.0.0.1:" + std::to_string(p)},
              {"tenant_group", "t"},
              {"filters", json::array()},
              {"default_cluster", "c"}};
    json doc = {{"listeners", json::array({l})}, {"clusters", json::array({cluster("c", {a->port()})})}};
    return doc.dump();
  });
  Client c(bed.port);
  auto r = c.call(make_request("/anything", "p", Protocol::Http11, {}, "payload"));
  ASSERT_TRUE(r);
  EXPECT_EQ(r->body, "payload");
  auto s = bed.stats();
  EXPECT_EQ(s["relay"]["passthrough_connections"], 1);
  EXPECT_EQ(s["relay"]["relayed_requests"], 1);
  EXPECT_TRUE(s["pools"].empty());
}

TEST(Relay, SidecarModeSplicesToFirstRoute) {
  auto a = echo();
  RelayOptions ro;
  ro.sidecar = true;
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); }, quiet(ro));
  Client c(bed.port);
  for (int i = 0; i < 3; ++i) {
    auto r = c.call(make_request("/", "s" + std::to_string(i)));
    ASSERT_TRUE(r);
    EXPECT_EQ(*r->header("x-nonce"), "s" + std::to_string(i));
  }
  auto s = bed.stats();
  EXPECT_EQ(s["mode"], "sidecar");
  EXPECT_EQ(s["relay"]["relayed_requests"], 3);
  EXPECT_EQ(a->stats().connections, 1u);
}

TEST(Relay, EveryConnectionIsItsOwnFlow) {
  auto a = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  std::vector<std::unique_ptr<Client>> clients;
  for (int i = 0; i < 100; ++i) {
    clients.push_back(std::make_unique<Client>(bed.port));
    ASSERT_TRUE(clients.back()->call(make_request("/", std::to_string(i))));
  }
  std::set<std::uint64_t> ids;
  auto s = bed.stats();
  for (const auto& f : s["flows"]["live"]) ids.insert(f["conn_id"].get<std::uint64_t>());
  EXPECT_EQ(ids.size(), 100u);
  clients.clear();
  ASSERT_TRUE(wait_until([&] { return bed.stats()["flows"]["live"].empty(); }));
  EXPECT_EQ(bed.stats()["flows"]["totals"]["request_count"], 100);
}

TEST(Relay, TenantGroupsUseSeparatePools) {
  auto a = echo();
  std::uint16_t second = bench::free_port();
  Bed bed([&](std::uint16_t p) {
    json routes = json::array({prefix_route("/", "c")});
    json doc = {{"listeners", json::array({listener("a", p, "http1", routes, "tenant-a"),
                                            listener("b", second, "http1", routes, "tenant-b")})},
                {"clusters", json::array({cluster("c", {a->port()})})}};
    return doc.dump();
  });
  ASSERT_TRUE(wait_until([&] { return a->stats().connections == 2; }));
  std::set<std::string> groups;
  auto s = bed.stats();
  for (const auto& p : s["pools"]) groups.insert(p["tenant_group"]);
  EXPECT_EQ(groups, (std::set<std::string>{"tenant-a", "tenant-b"}));
  Client ca(bed.port), cb(second);
  EXPECT_EQ(ca.call(make_request("/", "a"))->status, 200);
  EXPECT_EQ(cb.call(make_request("/", "b"))->status, 200);
  EXPECT_EQ(a->stats().connections, 2u);
}

TEST(Relay, ByteAccountingMatchesClient) {
  auto a = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  bench::LoadOptions lo;
  lo.port = bed.port;
  lo.connections = 4;
  lo.payload_bytes = 300;
  lo.requests_per_connection = 250;
  auto report = bench::run_load(lo);
  EXPECT_EQ(report.errors, 0u);
  EXPECT_EQ(report.completed, 1000u);
  auto s = bed.stats();
  EXPECT_EQ(s["flows"]["totals"]["rx_bytes"], report.tx_bytes);
  EXPECT_EQ(s["flows"]["totals"]["tx_bytes"], report.rx_bytes);
  EXPECT_EQ(s["flows"]["totals"]["request_count"], 1000);
  EXPECT_EQ(s["outstanding"]["dispatches"], s["outstanding"]["completions"]);
  EXPECT_EQ(a->stats().rx_bytes, report.tx_bytes);
}

TEST(Daemon, ConfigVersionPolicy) {
  auto a = echo(), b = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  std::uint16_t port = bed.port;
  EXPECT_EQ(bed.daemon->submit_config(simple_config(port, {a->port()}, "http1", 1)), 2u);
  EXPECT_THROW(bed.daemon->submit_config("listeners: [}"), ConfigError);
  EXPECT_EQ(bed.daemon->version(), 2u);
  EXPECT_THROW(bed.daemon->submit_config(R"({"listeners":[{"name":"x","bind":"1.2.3.4:1","tenant_group":"t",
      "filters":[{"type":"http1","routes":[{"field":"path","kind":"prefix","value":"/","cluster":"nope"}]}]}],"clusters":[]})"),
               ConfigError);
  EXPECT_EQ(bed.daemon->version(), 2u);
  EXPECT_EQ(bed.daemon->submit_config(simple_config(port, {a->port(), b->port()}, "http1", 10)), 10u);
  EXPECT_THROW(bed.daemon->submit_config(simple_config(port, {a->port()}, "http1", 3)), VersionConflict);
  EXPECT_EQ(bed.daemon->version(), 10u);
  ASSERT_TRUE(wait_until([&] { return b->stats().connections >= 1; }));
}

TEST(Daemon, EndpointChurnUnderLoadLosesNothing) {
  auto a = echo(), b = echo();
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); });
  std::uint16_t port = bed.port;
  bench::LoadReport report;
  std::thread load([&] {
    bench::LoadOptions lo;
    lo.port = port;
    lo.connections = 4;
    lo.duration = 1500ms;
    report = bench::run_load(lo);
  });
  std::string failure;
  for (int i = 0; i < 20; ++i) {
    std::vector<std::uint16_t> eps{a->port()};
    if (i % 2 == 0) eps.push_back(b->port());
    try {
      bed.daemon->submit_config(simple_config(port, eps, "http1", i + 2));
    } catch (const std::exception& e) {
      failure = e.what();
    }
    std::this_thread::sleep_for(50ms);
  }
  load.join();
  EXPECT_EQ(failure, "");
  EXPECT_EQ(report.errors, 0u);
  EXPECT_GT(report.requests, 100u);
  EXPECT_GT(b->stats().requests, 0u);
  EXPECT_EQ(bed.daemon->store().dangling_references(), 0u);
  ASSERT_TRUE(wait_until([&] {
    auto s = bed.stats();
    return s["outstanding"]["dispatches"] == s["outstanding"]["completions"];
  }));
}

TEST(Daemon, AdminEndpoint) {
  auto a = echo();
  DaemonOptions o;
  o.admin_port = 0;
  Bed bed([&](auto p) { return simple_config(p, {a->port()}); }, o);
  httplib::Client admin("127.0.0.1", bed.daemon->admin_port());
  auto stats = admin.Get("/v1/stats");
  ASSERT_TRUE(stats);
  EXPECT_EQ(stats->status, 200);
  EXPECT_EQ(json::parse(stats->body)["version"], 1);
  auto cfg = admin.Get("/v1/config");
  ASSERT_TRUE(cfg);
  EXPECT_EQ(parse_config(cfg->body).listeners.size(), 1u);

  auto bad = admin.Post("/v1/config", "listeners: [", "application/yaml");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  auto good = admin.Post("/v1/config", simple_config(bed.port, {a->port()}, "http1", 5), "application/json");
  ASSERT_TRUE(good);
  EXPECT_EQ(good->status, 200);
  EXPECT_EQ(json::parse(good->body)["version"], 5);
  auto stale = admin.Post("/v1/config", simple_config(bed.port, {a->port()}, "http1", 2), "application/json");
  ASSERT_TRUE(stale);
  EXPECT_EQ(stale->status, 409);
}

int run_to_exit(std::vector<std::string> argv, const std::filesystem::path& log) {
  bench::Process p(std::move(argv), log);
  for (int i = 0; i < 500 && p.alive(); ++i) std::this_thread::sleep_for(10ms);
  return p.terminate();
}

TEST(Xlbd, ExitCodes) {
  auto dir = std::filesystem::temp_directory_path() / ("xlbd_exit_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  auto log = dir / "xlbd.log";

  std::ofstream(dir / "bad.yaml") << "listeners: [\n";
  EXPECT_EQ(run_to_exit({XLBD_PATH, "--config", (dir / "bad.yaml").string(), "--admin-port", "0"}, log), 2);
  EXPECT_EQ(run_to_exit({XLBD_PATH, "--admin-port", "0"}, log), 2);

  asio::io_context io;
  tcp::acceptor taken(io, tcp::endpoint(asio::ip::make_address("127.0.0.1"), 0));
  std::ofstream(dir / "busy.json") << simple_config(taken.local_endpoint().port(), {1});
  EXPECT_EQ(run_to_exit({XLBD_PATH, "--config", (dir / "busy.json").string(), "--admin-port", "0"}, log), 3);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace xlb
