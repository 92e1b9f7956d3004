#include "xlb/relay.hpp"

#include <array>
#include <atomic>
#include <deque>
#include <future>
#include <map>
#include <set>
#include <unordered_map>

#include <boost/asio.hpp>
#include <spdlog/spdlog.h>

#include "xlb/codec.hpp"

namespace xlb {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kReadChunk = 16 * 1024;
constexpr std::size_t kPauseReadBytes = 1 << 20;

struct PoolKey {
  std::string tenant;
  EndpointKey endpoint;
  Protocol protocol = Protocol::Http11;

  bool operator<(const PoolKey& o) const {
    return std::tie(tenant, endpoint.address, endpoint.port, protocol) <
           std::tie(o.tenant, o.endpoint.address, o.endpoint.port, o.protocol);
  }
};

}  // namespace

class ClientSession;
class SpliceSession;
class BackendConnection;

// A response owed to a client.
struct Dispatch {
  std::weak_ptr<ClientSession> client;
  std::uint64_t conn_id = 0;
  Protocol protocol = Protocol::Http11;
  std::optional<std::uint32_t> original_id;
  std::string cluster;
  Clock::time_point dispatched_at;
  std::string held_bytes;
};

struct ListenerState {
  std::string name;
  std::string bind;
  std::string tenant;
  bool passthrough = false;
  std::uint16_t port = 0;
  std::unique_ptr<tcp::acceptor> acceptor;
};

class RelayContext : public std::enable_shared_from_this<RelayContext> {
 public:
  RelayContext(asio::io_context& io, NestedMapStore& store, LbState& lb, MetricsRegistry& metrics,
               RelayOptions options)
      : io(io), store(store), lb(lb), metrics(metrics), options(options), router(store, options.match_order) {}

  asio::io_context& io;
  NestedMapStore& store;
  LbState& lb;
  MetricsRegistry& metrics;
  RelayOptions options;
  Router router;

  std::map<std::string, std::shared_ptr<ListenerState>> listeners;
  std::map<PoolKey, std::vector<std::shared_ptr<BackendConnection>>> pools;
  std::set<std::shared_ptr<BackendConnection>> draining;
  std::unordered_map<std::uint64_t, std::weak_ptr<ClientSession>> clients;
  std::unordered_map<std::uint64_t, std::weak_ptr<SpliceSession>> splices;

  std::uint64_t next_conn_id = 1;
  std::uint64_t next_backend_id = 1;
  std::uint64_t backend_connects = 0;
  std::uint64_t backend_failures = 0;
  std::uint64_t timeouts = 0;
  std::atomic<bool> stopped{false};
  std::atomic<bool> loop_running{false};

  std::shared_ptr<BackendConnection> acquire(const std::string& tenant, const EndpointKey& ep, Protocol protocol);
  std::shared_ptr<BackendConnection> open_backend(const PoolKey& key);
  void forget(BackendConnection* conn);
  void apply_listeners(const ConfigSnapshot& snap, bool strict);
  void apply_pools(const ConfigSnapshot& snap);
  void accept(std::shared_ptr<ListenerState> listener);
  void on_accept(const std::shared_ptr<ListenerState>& listener, tcp::socket socket);
  RelayStats stats();
  void stop_all();

  template <class F>
  auto on_io(F&& fn) -> decltype(fn()) {
    if (!loop_running || io.get_executor().running_in_this_thread() || io.stopped()) return fn();
    std::packaged_task<decltype(fn())()> task(std::forward<F>(fn));
    auto result = task.get_future();
    asio::post(io, [&task] { task(); });
    if (result.wait_for(std::chrono::seconds(10)) != std::future_status::ready) {
      throw std::runtime_error("relay event loop not responding");
    }
    return result.get();
  }
};

namespace {

std::string status_bytes(Protocol protocol, std::optional<std::uint32_t> stream_id, int status, std::string body) {
  return encode_response(make_status_response(protocol, stream_id, status, std::move(body)));
}

void set_nodelay(tcp::socket& s) {
  boost::system::error_code ec;
  s.set_option(tcp::no_delay(true), ec);
}

}  // namespace

// Proxy endpoint: one per accepted client connection on a balancing listener.
class ClientSession : public std::enable_shared_from_this<ClientSession> {
 public:
  ClientSession(std::shared_ptr<RelayContext> ctx, tcp::socket socket, std::uint64_t conn_id, std::string listener,
                std::string tenant)
      : ctx_(std::move(ctx)),
        socket_(std::move(socket)),
        conn_id_(conn_id),
        listener_{std::move(listener)},
        tenant_(std::move(tenant)),
        flow_(ctx_->metrics.open_flow(conn_id)) {}

  void start() {
    set_nodelay(socket_);
    do_read();
  }

  bool closed() const { return closed_; }
  std::uint64_t conn_id() const { return conn_id_; }

  // A backend answered (or failed) one of this client's requests.
  void on_reply(std::string bytes, Protocol protocol) {
    if (pending_ > 0) --pending_;
    if (protocol == Protocol::Http11 && http11_pending_) {
      http11_pending_ = false;
      asio::post(ctx_->io, [self = shared_from_this()] { self->process(); });
    }
    write(std::move(bytes));
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    boost::system::error_code ec;
    socket_.shutdown(tcp::socket::shutdown_both, ec);
    socket_.close(ec);
    ctx_->clients.erase(conn_id_);
    ctx_->metrics.retire_flow(conn_id_);
  }

 private:
  void do_read() {
    if (closed_ || reading_) return;
    reading_ = true;
    socket_.async_read_some(asio::buffer(readbuf_),
                            [self = shared_from_this()](const boost::system::error_code& ec, std::size_t n) {
                              self->reading_ = false;
                              if (ec) {
                                self->close();
                                return;
                              }
                              self->flow_->record(FlowEvent::RxBytes, n);
                              self->inbuf_.append(self->readbuf_.data(), n);
                              self->process();
                            });
  }

  void process() {
    while (!closed_ && !http11_pending_ && !close_after_write_) {
      auto result = decode_request(inbuf_);
      if (std::holds_alternative<NeedMoreData>(result)) break;
      if (auto* err = std::get_if<ProtocolError>(&result)) {
        spdlog::debug("conn {}: protocol error: {}", conn_id_, err->message);
        ctx_->metrics.error_responses++;
        inbuf_.clear();
        write(status_bytes(Protocol::Http11, std::nullopt, 400, "bad_request"));
        close_after_write_ = true;
        return;
      }
      auto& decoded = std::get<Decoded<Request>>(result);
      std::string raw = inbuf_.substr(0, decoded.consumed);
      inbuf_.erase(0, decoded.consumed);
      handle(std::move(decoded.message), std::move(raw));
    }
    if (inbuf_.size() < kPauseReadBytes) do_read();
  }

  void handle(Request req, std::string raw) {
    flow_->record(FlowEvent::Request);
    auto decision = ctx_->router.route(req, listener_, flow_.get());
    if (!decision) {
      ctx_->metrics.error_responses++;
      write(status_bytes(req.protocol, req.stream_id, 404, "no_route_match"));
      return;
    }
    const ClusterView& cluster = decision->cluster;
    std::size_t idx = ctx_->lb.pick(cluster.name, cluster.policy, cluster.endpoints);
    auto conn = ctx_->acquire(tenant_, key_of(cluster.endpoints[idx]), decision->protocol);

    ++pending_;
    if (req.protocol == Protocol::Http11) http11_pending_ = true;
    Dispatch d;
    d.client = weak_from_this();
    d.conn_id = conn_id_;
    d.protocol = req.protocol;
    d.original_id = req.stream_id;
    d.cluster = cluster.name;
    d.dispatched_at = Clock::now();
    dispatch_to(conn, std::move(d), std::move(raw));
  }

  void dispatch_to(const std::shared_ptr<BackendConnection>& conn, Dispatch d, std::string raw);

  void write(std::string bytes) {
    if (closed_) return;
    outq_.push_back(std::move(bytes));
    if (!writing_) do_write();
  }

  void do_write() {
    if (outq_.empty()) {
      writing_ = false;
      if (close_after_write_) close();
      return;
    }
    writing_ = true;
    asio::async_write(socket_, asio::buffer(outq_.front()),
                      [self = shared_from_this()](const boost::system::error_code& ec, std::size_t n) {
                        if (ec) {
                          self->writing_ = false;
                          self->close();
                          return;
                        }
                        self->flow_->record(FlowEvent::TxBytes, n);
                        self->outq_.pop_front();
                        self->do_write();
                      });
  }

  std::shared_ptr<RelayContext> ctx_;
  tcp::socket socket_;
  std::uint64_t conn_id_;
  ListenerHandle listener_;
  std::string tenant_;
  std::shared_ptr<FlowMetrics> flow_;

  std::array<char, kReadChunk> readbuf_{};
  std::string inbuf_;
  std::deque<std::string> outq_;
  bool reading_ = false;
  bool writing_ = false;
  bool closed_ = false;
  bool close_after_write_ = false;
  bool http11_pending_ = false;
  std::size_t pending_ = 0;
};

// Instance connection: a pooled backend connection shared by many clients.
class BackendConnection : public std::enable_shared_from_this<BackendConnection> {
 public:
  enum class State { Connecting, Ready, Closed };

  BackendConnection(std::shared_ptr<RelayContext> ctx, PoolKey key, std::uint64_t id)
      : ctx_(std::move(ctx)), key_(std::move(key)), id_(id), socket_(ctx_->io), timer_(ctx_->io) {}

  const PoolKey& key() const { return key_; }
  State state() const { return state_; }
  std::size_t load() const { return mapped_.size() + (in_flight_ ? 1 : 0) + hold_.size(); }
  std::size_t mapped() const { return mapped_.size() + (in_flight_ ? 1 : 0); }
  std::size_t held() const { return hold_.size(); }
  std::size_t max_held() const { return max_held_; }

  void connect() {
    boost::system::error_code ec;
    auto addr = asio::ip::make_address(key_.endpoint.address, ec);
    if (ec) {
      fail_connection("bad address");
      return;
    }
    ctx_->backend_connects++;
    socket_.async_connect(tcp::endpoint(addr, key_.endpoint.port),
                          [self = shared_from_this()](const boost::system::error_code& ec) {
                            if (self->state_ == State::Closed) return;
                            if (ec) {
                              self->fail_connection(ec.message());
                              return;
                            }
                            set_nodelay(self->socket_);
                            self->state_ = State::Ready;
                            self->do_read();
                            self->do_write();
                          });
  }

  // Takes ownership of a request for a client. The dispatch is counted even
  // when held, so least-request sees queued work.
  void dispatch(Dispatch d, std::string raw) {
    if (state_ == State::Closed) {
      reply_error(d, 503, "backend_unavailable");
      return;
    }
    if (key_.protocol == Protocol::Http11 && in_flight_ && hold_.size() >= kHoldQueueBound) {
      reply_error(d, 503, "hold_queue_full");
      return;
    }
    ctx_->lb.on_dispatch(key_.endpoint);
    arm_timer();
    if (key_.protocol == Protocol::Mux) {
      std::uint32_t id = allocate_id();
      rewrite_stream_id_in_place(raw, id);
      mapped_.emplace(id, std::move(d));
      send_request(std::move(raw), mapped_[id].cluster);
      return;
    }
    if (in_flight_) {
      d.held_bytes = std::move(raw);
      hold_.push_back(std::move(d));
      max_held_ = std::max(max_held_, hold_.size());
      return;
    }
    in_flight_ = std::move(d);
    send_request(std::move(raw), in_flight_->cluster);
  }

  // Closes once the last owed response has been delivered.
  void drain() {
    draining_ = true;
    if (load() == 0) close(503);
  }

  // Fails every owed response with `status` and leaves the pool.
  void close(int status) {
    if (state_ == State::Closed) return;
    state_ = State::Closed;
    boost::system::error_code ec;
    timer_.cancel();
    socket_.shutdown(tcp::socket::shutdown_both, ec);
    socket_.close(ec);
    ctx_->forget(this);
    auto self = shared_from_this();
    auto mapped = std::move(mapped_);
    mapped_.clear();
    for (auto& [id, d] : mapped) finish_with_error(d, status);
    if (in_flight_) {
      auto d = std::move(*in_flight_);
      in_flight_.reset();
      finish_with_error(d, status);
    }
    auto held = std::move(hold_);
    hold_.clear();
    for (auto& d : held) finish_with_error(d, status);
  }

 private:
  std::uint32_t allocate_id() {
    for (;;) {
      std::uint32_t id = next_id_++;
      if (id == 0) continue;
      if (!mapped_.count(id)) return id;
    }
  }

  void send_request(std::string raw, const std::string& cluster) {
    ctx_->metrics.relayed_requests++;
    auto& counters = ctx_->metrics.cluster(cluster);
    counters.requests++;
    counters.tx_bytes += raw.size();
    outq_.push_back(std::move(raw));
    if (state_ == State::Ready && !writing_) do_write();
  }

  void do_write() {
    if (state_ != State::Ready) return;
    if (outq_.empty()) {
      writing_ = false;
      return;
    }
    writing_ = true;
    asio::async_write(socket_, asio::buffer(outq_.front()),
                      [self = shared_from_this()](const boost::system::error_code& ec, std::size_t) {
                        self->writing_ = false;
                        if (self->state_ == State::Closed) return;
                        if (ec) {
                          self->fail_connection(ec.message());
                          return;
                        }
                        self->outq_.pop_front();
                        self->do_write();
                      });
  }

  void do_read() {
    socket_.async_read_some(asio::buffer(readbuf_),
                            [self = shared_from_this()](const boost::system::error_code& ec, std::size_t n) {
                              if (self->state_ == State::Closed) return;
                              if (ec) {
                                self->fail_connection(ec == asio::error::eof ? "closed by backend" : ec.message());
                                return;
                              }
                              self->inbuf_.append(self->readbuf_.data(), n);
                              if (self->process_responses()) self->do_read();
                            });
  }

  bool process_responses() {
    for (;;) {
      auto result = decode_response(inbuf_);
      if (std::holds_alternative<NeedMoreData>(result)) return true;
      if (auto* err = std::get_if<ProtocolError>(&result)) {
        fail_connection("protocol error: " + err->message);
        return false;
      }
      auto& decoded = std::get<Decoded<Response>>(result);
      std::string raw = inbuf_.substr(0, decoded.consumed);
      inbuf_.erase(0, decoded.consumed);
      on_response(decoded.message, std::move(raw));
      if (state_ == State::Closed) return false;
    }
  }

  void on_response(const Response& resp, std::string raw) {
    std::optional<Dispatch> owner;
    if (key_.protocol == Protocol::Mux) {
      auto it = resp.stream_id ? mapped_.find(*resp.stream_id) : mapped_.end();
      if (it != mapped_.end()) {
        owner = std::move(it->second);
        mapped_.erase(it);
        rewrite_stream_id_in_place(raw, owner->original_id.value_or(0));
      }
    } else if (in_flight_) {
      owner = std::move(in_flight_);
      in_flight_.reset();
    }
    if (!owner) {
      ctx_->metrics.orphan_responses++;
      spdlog::debug("backend {}: orphan response dropped", key_.endpoint.to_string());
      return;
    }
    auto& counters = ctx_->metrics.cluster(owner->cluster);
    counters.responses++;
    counters.rx_bytes += raw.size();
    ctx_->lb.on_complete(key_.endpoint);
    deliver(*owner, std::move(raw));

    if (key_.protocol == Protocol::Http11 && !hold_.empty() && state_ != State::Closed) {
      in_flight_ = std::move(hold_.front());
      hold_.pop_front();
      std::string bytes = std::move(in_flight_->held_bytes);
      in_flight_->held_bytes.clear();
      send_request(std::move(bytes), in_flight_->cluster);
    }
    if (draining_ && load() == 0) close(503);
  }

  void deliver(Dispatch& d, std::string bytes) {
    auto client = d.client.lock();
    if (!client || client->closed()) {
      ctx_->metrics.discarded_responses++;
      return;
    }
    client->on_reply(std::move(bytes), d.protocol);
  }

  void reply_error(Dispatch& d, int status, std::string body) {
    ctx_->metrics.error_responses++;
    ctx_->metrics.cluster(d.cluster).errors++;
    deliver(d, status_bytes(d.protocol, d.original_id, status, std::move(body)));
  }

  void finish_with_error(Dispatch& d, int status) {
    ctx_->lb.on_complete(key_.endpoint);
    reply_error(d, status, status == 504 ? "upstream_timeout" : "backend_unavailable");
  }

  void fail_connection(const std::string& why) {
    if (state_ == State::Closed) return;
    ctx_->backend_failures++;
    spdlog::warn("backend {} ({}): {}", key_.endpoint.to_string(),
                 key_.protocol == Protocol::Mux ? "mux" : "http1", why);
    close(503);
  }

  void arm_timer() {
    if (timer_armed_) return;
    timer_armed_ = true;
    timer_.expires_after(ctx_->options.dispatch_timeout);
    timer_.async_wait([self = shared_from_this()](const boost::system::error_code& ec) {
      self->timer_armed_ = false;
      if (ec || self->state_ == State::Closed) return;
      self->on_timer();
    });
  }

  // Expired dispatches get 504; the connection is then torn down because a
  // late response could no longer be matched to its request.
  void on_timer() {
    auto now = Clock::now();
    auto timeout = ctx_->options.dispatch_timeout;
    std::optional<Clock::time_point> oldest;
    auto consider = [&](const Dispatch& d) {
      if (!oldest || d.dispatched_at < *oldest) oldest = d.dispatched_at;
    };
    for (auto& [id, d] : mapped_) consider(d);
    if (in_flight_) consider(*in_flight_);
    for (auto& d : hold_) consider(d);
    if (!oldest) return;
    if (*oldest + timeout > now) {
      timer_armed_ = true;
      timer_.expires_at(*oldest + timeout);
      timer_.async_wait([self = shared_from_this()](const boost::system::error_code& ec) {
        self->timer_armed_ = false;
        if (ec || self->state_ == State::Closed) return;
        self->on_timer();
      });
      return;
    }
    ctx_->timeouts++;
    spdlog::warn("backend {}: dispatch timed out", key_.endpoint.to_string());
    std::vector<Dispatch> expired;
    for (auto it = mapped_.begin(); it != mapped_.end();) {
      if (it->second.dispatched_at + timeout <= now) {
        expired.push_back(std::move(it->second));
        it = mapped_.erase(it);
      } else {
        ++it;
      }
    }
    if (in_flight_ && in_flight_->dispatched_at + timeout <= now) {
      expired.push_back(std::move(*in_flight_));
      in_flight_.reset();
    }
    for (auto& d : expired) finish_with_error(d, 504);
    close(503);
  }

  std::shared_ptr<RelayContext> ctx_;
  PoolKey key_;
  std::uint64_t id_;
  tcp::socket socket_;
  asio::steady_timer timer_;
  State state_ = State::Connecting;

  std::unordered_map<std::uint32_t, Dispatch> mapped_;
  std::optional<Dispatch> in_flight_;
  std::deque<Dispatch> hold_;
  std::size_t max_held_ = 0;
  std::uint32_t next_id_ = 1;

  std::array<char, kReadChunk> readbuf_{};
  std::string inbuf_;
  std::deque<std::string> outq_;
  bool writing_ = false;
  bool draining_ = false;
  bool timer_armed_ = false;
};

void ClientSession::dispatch_to(const std::shared_ptr<BackendConnection>& conn, Dispatch d, std::string raw) {
  conn->dispatch(std::move(d), std::move(raw));
}

// Byte tunnel for passthrough listeners and sidecar mode. Traffic is decoded
// passively on the way through only to be counted: each request is a
// dispatch to the target, each response a completion.
class SpliceSession : public std::enable_shared_from_this<SpliceSession> {
 public:
  SpliceSession(std::shared_ptr<RelayContext> ctx, tcp::socket client, std::uint64_t conn_id, EndpointKey target)
      : ctx_(std::move(ctx)),
        client_(std::move(client)),
        upstream_(ctx_->io),
        conn_id_(conn_id),
        target_(std::move(target)),
        flow_(ctx_->metrics.open_flow(conn_id)) {}

  void start() {
    set_nodelay(client_);
    boost::system::error_code ec;
    auto addr = asio::ip::make_address(target_.address, ec);
    if (ec) {
      close();
      return;
    }
    upstream_.async_connect(tcp::endpoint(addr, target_.port), [self = shared_from_this()](auto ec) {
      if (ec) {
        self->ctx_->backend_failures++;
        self->close();
        return;
      }
      set_nodelay(self->upstream_);
      self->pump(self->client_, self->upstream_, self->up_buf_, true);
      self->pump(self->upstream_, self->client_, self->down_buf_, false);
    });
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    boost::system::error_code ec;
    client_.close(ec);
    upstream_.close(ec);
    for (; owed_ > 0; --owed_) ctx_->lb.on_complete(target_);
    ctx_->splices.erase(conn_id_);
    ctx_->metrics.retire_flow(conn_id_);
  }

 private:
  void pump(tcp::socket& from, tcp::socket& to, std::array<char, kReadChunk>& buf, bool from_client) {
    from.async_read_some(asio::buffer(buf), [self = shared_from_this(), &from, &to, &buf, from_client](
                                                const boost::system::error_code& ec, std::size_t n) {
      if (ec || self->closed_) {
        self->close();
        return;
      }
      if (from_client) {
        self->flow_->record(FlowEvent::RxBytes, n);
        self->observe_requests(std::string_view(buf.data(), n));
      } else {
        self->observe_responses(std::string_view(buf.data(), n));
      }
      asio::async_write(to, asio::buffer(buf.data(), n),
                        [self, &from, &to, &buf, from_client](const boost::system::error_code& ec, std::size_t n) {
                          if (ec || self->closed_) {
                            self->close();
                            return;
                          }
                          if (!from_client) self->flow_->record(FlowEvent::TxBytes, n);
                          self->pump(from, to, buf, from_client);
                        });
    });
  }

  void observe_requests(std::string_view bytes) {
    if (!decoding_requests_) return;
    requests_.append(bytes);
    for (;;) {
      auto result = decode_request(requests_);
      if (std::holds_alternative<NeedMoreData>(result)) return;
      if (std::holds_alternative<ProtocolError>(result)) {
        decoding_requests_ = false;
        requests_.clear();
        return;
      }
      requests_.erase(0, std::get<Decoded<Request>>(result).consumed);
      flow_->record(FlowEvent::Request);
      ctx_->metrics.relayed_requests++;
      ctx_->lb.on_dispatch(target_);
      ++owed_;
    }
  }

  void observe_responses(std::string_view bytes) {
    if (!decoding_responses_) return;
    responses_.append(bytes);
    for (;;) {
      auto result = decode_response(responses_);
      if (std::holds_alternative<NeedMoreData>(result)) return;
      if (std::holds_alternative<ProtocolError>(result)) {
        decoding_responses_ = false;
        responses_.clear();
        return;
      }
      responses_.erase(0, std::get<Decoded<Response>>(result).consumed);
      if (owed_ > 0) {
        --owed_;
        ctx_->lb.on_complete(target_);
      }
    }
  }

  std::shared_ptr<RelayContext> ctx_;
  tcp::socket client_;
  tcp::socket upstream_;
  std::uint64_t conn_id_;
  EndpointKey target_;
  std::shared_ptr<FlowMetrics> flow_;
  std::array<char, kReadChunk> up_buf_{};
  std::array<char, kReadChunk> down_buf_{};
  std::string requests_;
  std::string responses_;
  bool decoding_requests_ = true;
  bool decoding_responses_ = true;
  std::uint64_t owed_ = 0;
  bool closed_ = false;
};

std::shared_ptr<BackendConnection> RelayContext::open_backend(const PoolKey& key) {
  auto conn = std::make_shared<BackendConnection>(shared_from_this(), key, next_backend_id++);
  pools[key].push_back(conn);
  conn->connect();
  return conn;
}

std::shared_ptr<BackendConnection> RelayContext::acquire(const std::string& tenant, const EndpointKey& ep,
                                                         Protocol protocol) {
  PoolKey key{tenant, ep, protocol};
  auto& list = pools[key];
  std::shared_ptr<BackendConnection> best;
  for (const auto& c : list) {
    if (c->state() == BackendConnection::State::Closed) continue;
    if (!best || c->load() < best->load()) best = c;
  }
  if (!best || (best->load() > 0 && list.size() < options.max_per_endpoint)) return open_backend(key);
  return best;
}

void RelayContext::forget(BackendConnection* conn) {
  auto it = pools.find(conn->key());
  if (it != pools.end()) {
    auto& list = it->second;
    list.erase(std::remove_if(list.begin(), list.end(), [&](const auto& c) { return c.get() == conn; }), list.end());
  }
  for (auto d = draining.begin(); d != draining.end(); ++d) {
    if (d->get() == conn) {
      draining.erase(d);
      break;
    }
  }
}

namespace {

// Pool keys a snapshot needs pre-established: every endpoint reachable from a
// balancing listener, per tenant group and per filter protocol.
std::set<PoolKey> desired_pools(const ConfigSnapshot& snap, bool sidecar) {
  std::set<PoolKey> out;
  if (sidecar) return out;
  for (const auto& l : snap.listeners) {
    if (l.passthrough()) continue;
    for (const auto& f : l.filters) {
      for (const auto& r : f.routes) {
        const Cluster* c = snap.find_cluster(r.cluster);
        if (!c) continue;
        for (const auto& e : c->endpoints) out.insert(PoolKey{l.tenant_group, key_of(e), f.type});
      }
    }
  }
  return out;
}

// Next hop of a splicing listener: its default cluster, else the cluster of
// its first route.
std::optional<ClusterView> splice_target(const NestedMapStore& store, const std::string& listener) {
  auto guard = store.read_guard();
  ListenerHandle handle{listener};
  auto rec = find_listener(store, handle);
  if (!rec) return std::nullopt;
  std::uint32_t slot = rec->default_cluster_slot;
  if (slot == kNoSlot && rec->filters.count > 0) {
    auto f = store.resolve_as<FilterRecord>(rec->filters.map, 0);
    if (f && f->routes.count > 0) {
      auto r = store.resolve_as<RouteRecord>(f->routes.map, 0);
      if (r) slot = r->cluster_slot;
    }
  }
  auto view = load_cluster(store, slot);
  if (!view || view->endpoints.empty()) return std::nullopt;
  return view;
}

}  // namespace

void RelayContext::apply_pools(const ConfigSnapshot& snap) {
  auto want = desired_pools(snap, options.sidecar);
  for (auto it = pools.begin(); it != pools.end();) {
    if (want.count(it->first)) {
      ++it;
      continue;
    }
    auto list = std::move(it->second);
    it = pools.erase(it);
    for (auto& c : list) {
      draining.insert(c);
      c->drain();
    }
  }
  for (const auto& key : want) {
    auto& list = pools[key];
    while (list.size() < options.min_per_endpoint) open_backend(key);
  }
}

void RelayContext::apply_listeners(const ConfigSnapshot& snap, bool strict) {
  std::set<std::string> keep;
  for (const auto& l : snap.listeners) {
    keep.insert(l.name);
    bool passthrough = l.passthrough() || options.sidecar;
    auto it = listeners.find(l.name);
    if (it != listeners.end() && it->second->bind == l.bind) {
      it->second->tenant = l.tenant_group;
      it->second->passthrough = passthrough;
      continue;
    }
    if (it != listeners.end()) {
      boost::system::error_code ec;
      it->second->acceptor->close(ec);
      listeners.erase(it);
    }
    auto hp = parse_host_port(l.bind);
    auto state = std::make_shared<ListenerState>();
    state->name = l.name;
    state->bind = l.bind;
    state->tenant = l.tenant_group;
    state->passthrough = passthrough;
    state->acceptor = std::make_unique<tcp::acceptor>(io);
    boost::system::error_code ec;
    tcp::endpoint ep(asio::ip::make_address(hp ? hp->host : "", ec), hp ? hp->port : 0);
    if (!ec) state->acceptor->open(ep.protocol(), ec);
    if (!ec) state->acceptor->set_option(tcp::acceptor::reuse_address(true), ec);
    if (!ec) state->acceptor->bind(ep, ec);
    if (!ec) state->acceptor->listen(asio::socket_base::max_listen_connections, ec);
    if (ec) {
      std::string msg = "listener " + l.name + ": cannot bind " + l.bind + ": " + ec.message();
      if (strict) throw BindError(msg);
      spdlog::error("{}", msg);
      continue;
    }
    state->port = state->acceptor->local_endpoint().port();
    spdlog::info("listener {} on {} ({})", l.name, l.bind, passthrough ? "splice" : "balance");
    listeners[l.name] = state;
    accept(state);
  }
  for (auto it = listeners.begin(); it != listeners.end();) {
    if (keep.count(it->first)) {
      ++it;
      continue;
    }
    boost::system::error_code ec;
    it->second->acceptor->close(ec);
    it = listeners.erase(it);
  }
}

void RelayContext::accept(std::shared_ptr<ListenerState> listener) {
  auto* acceptor = listener->acceptor.get();
  acceptor->async_accept([self = shared_from_this(), listener](const boost::system::error_code& ec,
                                                               tcp::socket socket) {
    if (ec == asio::error::operation_aborted || !listener->acceptor->is_open() || self->stopped) return;
    if (!ec) self->on_accept(listener, std::move(socket));
    self->accept(listener);
  });
}

void RelayContext::on_accept(const std::shared_ptr<ListenerState>& listener, tcp::socket socket) {
  std::uint64_t id = next_conn_id++;
  if (listener->passthrough) {
    auto target = splice_target(store, listener->name);
    if (!target) {
      spdlog::warn("listener {}: no splice target", listener->name);
      return;
    }
    std::size_t idx = lb.pick(target->name, target->policy, target->endpoints);
    auto s = std::make_shared<SpliceSession>(shared_from_this(), std::move(socket), id,
                                             key_of(target->endpoints[idx]));
    splices[id] = s;
    s->start();
    return;
  }
  auto s = std::make_shared<ClientSession>(shared_from_this(), std::move(socket), id, listener->name,
                                           listener->tenant);
  clients[id] = s;
  s->start();
}

RelayStats RelayContext::stats() {
  RelayStats out;
  for (const auto& [key, list] : pools) {
    PoolEntryStats e;
    e.tenant_group = key.tenant;
    e.endpoint = key.endpoint.to_string();
    e.protocol = key.protocol;
    for (const auto& c : list) {
      ++e.connections;
      if (c->state() == BackendConnection::State::Ready) ++e.ready;
      e.mapped += c->mapped();
      e.held += c->held();
      e.max_held = std::max(e.max_held, c->max_held());
    }
    out.pools.push_back(std::move(e));
  }
  out.client_connections = clients.size();
  out.passthrough_connections = splices.size();
  out.backend_connects = backend_connects;
  out.backend_failures = backend_failures;
  out.timeouts = timeouts;
  for (const auto& [name, l] : listeners) out.listeners.emplace_back(name, l->port);
  return out;
}

void RelayContext::stop_all() {
  stopped = true;
  for (auto& [name, l] : listeners) {
    boost::system::error_code ec;
    l->acceptor->close(ec);
  }
  listeners.clear();
  std::vector<std::shared_ptr<ClientSession>> cs;
  for (auto& [id, w] : clients) {
    if (auto s = w.lock()) cs.push_back(s);
  }
  for (auto& s : cs) s->close();
  std::vector<std::shared_ptr<SpliceSession>> ss;
  for (auto& [id, w] : splices) {
    if (auto s = w.lock()) ss.push_back(s);
  }
  for (auto& s : ss) s->close();
  std::vector<std::shared_ptr<BackendConnection>> bs;
  for (auto& [key, list] : pools) bs.insert(bs.end(), list.begin(), list.end());
  bs.insert(bs.end(), draining.begin(), draining.end());
  for (auto& b : bs) b->close(503);
  pools.clear();
  draining.clear();
}

Relay::Relay(asio::io_context& io, NestedMapStore& store, LbState& lb, MetricsRegistry& metrics,
             RelayOptions options)
    : ctx_(std::make_shared<RelayContext>(io, store, lb, metrics, options)) {}

Relay::~Relay() {
  try {
    stop();
  } catch (const std::exception&) {
  }
}

void Relay::start(const ConfigSnapshot& snap) {
  ctx_->apply_listeners(snap, true);
  ctx_->apply_pools(snap);
}

void Relay::loop_started() { ctx_->loop_running = true; }

void Relay::reconcile(const ConfigSnapshot& snap) {
  ctx_->on_io([&] {
    ctx_->apply_listeners(snap, false);
    ctx_->apply_pools(snap);
  });
}

RelayStats Relay::stats() {
  return ctx_->on_io([&] { return ctx_->stats(); });
}

void Relay::stop() {
  if (ctx_->stopped) return;
  ctx_->on_io([&] { ctx_->stop_all(); });
}

const RelayOptions& Relay::options() const { return ctx_->options; }

}  // namespace xlb
