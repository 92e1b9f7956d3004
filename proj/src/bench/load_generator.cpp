#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <numeric>
#include <unordered_map>

#include <boost/asio.hpp>

#include "xlb/bench.hpp"
#include "xlb/codec.hpp"

namespace xlb::bench {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using Clock = std::chrono::steady_clock;

namespace {

struct Run {
  const LoadOptions& options;
  asio::io_context io;
  Clock::time_point start;
  Clock::time_point measure_from;
  Clock::time_point stop_at;
  bool timed = false;
  std::uint64_t issued = 0;
  std::vector<std::uint32_t> latencies_us;
  LoadReport report;
  std::size_t live_loops = 0;

  explicit Run(const LoadOptions& o) : options(o) {}

  // One token per connection until it connects, then one per request loop.
  void release() {
    if (--live_loops == 0) io.stop();
  }

  bool accepting(Clock::time_point now) const { return !timed || now < stop_at; }

  // Earliest send time for the next request under the rate cap.
  std::optional<Clock::time_point> rate_slot() {
    if (options.rate <= 0) return std::nullopt;
    auto offset = std::chrono::duration<double>(static_cast<double>(issued) / options.rate);
    return start + std::chrono::duration_cast<Clock::duration>(offset);
  }
};

class LoadConnection : public std::enable_shared_from_this<LoadConnection> {
 public:
  LoadConnection(Run& run, std::size_t index) : run_(run), index_(index), socket_(run.io) {}

  void start(const tcp::endpoint& target) {
    socket_.async_connect(target, [self = shared_from_this()](auto ec) {
      if (ec) {
        self->run_.report.connect_failures++;
        self->run_.report.errors++;
        self->run_.release();
        return;
      }
      boost::system::error_code ignore;
      self->socket_.set_option(tcp::no_delay(true), ignore);
      self->do_read();
      std::size_t loops = self->run_.options.protocol == Protocol::Mux ? std::max<std::size_t>(1, self->run_.options.streams) : 1;
      for (std::size_t i = 0; i < loops; ++i) {
        ++self->run_.live_loops;
        ++self->loops_;
        self->next();
      }
      self->run_.release();
    });
  }

  // Requests still unanswered when the drain allowance ran out are errors.
  void shutdown() {
    run_.report.errors += outstanding_.size();
    outstanding_.clear();
    closed_ = true;
    boost::system::error_code ec;
    socket_.close(ec);
  }

 private:
  struct Outstanding {
    std::string nonce;
    std::string body;
    Clock::time_point sent;
  };

  void next() {
    auto now = Clock::now();
    const auto& o = run_.options;
    if (closed_ || !run_.accepting(now) || (o.requests_per_connection && sent_ >= o.requests_per_connection)) {
      end_loop();
      return;
    }
    if (auto slot = run_.rate_slot(); slot && *slot > now) {
      ++run_.issued;
      auto timer = std::make_shared<asio::steady_timer>(run_.io, *slot);
      timer->async_wait([self = shared_from_this(), timer](auto ec) {
        if (ec) return;
        self->send();
      });
      return;
    }
    ++run_.issued;
    send();
  }

  void send() {
    if (closed_) {
      end_loop();
      return;
    }
    const auto& o = run_.options;
    std::uint64_t seq = sent_++;
    Request req;
    req.protocol = o.protocol;
    req.method = o.payload_bytes ? "POST" : "GET";
    req.path = o.paths[(index_ + seq) % o.paths.size()];
    std::string nonce = std::to_string(index_) + "-" + std::to_string(seq);
    req.headers.push_back({"host", "bench"});
    req.headers.push_back({"x-nonce", nonce});
    if (o.payload_bytes) {
      std::string body = nonce + ":";
      body.resize(o.payload_bytes, static_cast<char>('a' + seq % 26));
      body.resize(o.payload_bytes);
      req.headers.push_back({"content-length", std::to_string(body.size())});
      req.body = std::move(body);
    }
    std::uint32_t key = 0;
    if (o.protocol == Protocol::Mux) {
      key = next_stream_++;
      if (next_stream_ == 0) next_stream_ = 1;
      req.stream_id = key;
    }
    outstanding_[key] = Outstanding{nonce, o.expect_echo ? req.body : std::string(), Clock::now()};
    queue_write(encode_request(req));
  }

  void queue_write(std::string bytes) {
    outq_.push_back(std::move(bytes));
    if (!writing_) do_write();
  }

  void do_write() {
    if (outq_.empty() || closed_) {
      writing_ = false;
      return;
    }
    writing_ = true;
    asio::async_write(socket_, asio::buffer(outq_.front()), [self = shared_from_this()](auto ec, std::size_t n) {
      if (ec) {
        self->fail();
        return;
      }
      self->run_.report.tx_bytes += n;
      self->outq_.pop_front();
      self->do_write();
    });
  }

  void do_read() {
    socket_.async_read_some(asio::buffer(buf_), [self = shared_from_this()](auto ec, std::size_t n) {
      if (ec) {
        self->fail();
        return;
      }
      self->run_.report.rx_bytes += n;
      self->inbuf_.append(self->buf_.data(), n);
      for (;;) {
        auto result = decode_response(self->inbuf_);
        if (std::holds_alternative<NeedMoreData>(result)) break;
        if (std::holds_alternative<ProtocolError>(result)) {
          self->fail();
          return;
        }
        auto& d = std::get<Decoded<Response>>(result);
        self->inbuf_.erase(0, d.consumed);
        self->on_response(d.message);
        if (self->closed_) return;
      }
      self->do_read();
    });
  }

  void on_response(const Response& resp) {
    auto now = Clock::now();
    std::uint32_t key = resp.stream_id.value_or(0);
    auto it = outstanding_.find(key);
    auto& report = run_.report;
    report.completed++;
    report.statuses[resp.status]++;
    if (it == outstanding_.end()) {
      report.mismatches++;
      report.errors++;
      return;
    }
    Outstanding out = std::move(it->second);
    outstanding_.erase(it);
    bool ok = resp.status >= 200 && resp.status < 300;
    if (ok) {
      const std::string* nonce = resp.header("x-nonce");
      if (!nonce || *nonce != out.nonce || (run_.options.expect_echo && resp.body != out.body)) {
        report.mismatches++;
        ok = false;
      }
    }
    if (!ok) {
      report.errors++;
    } else if (out.sent >= run_.measure_from) {
      report.requests++;
      auto us = std::chrono::duration_cast<std::chrono::microseconds>(now - out.sent).count();
      run_.latencies_us.push_back(static_cast<std::uint32_t>(std::min<long long>(us, UINT32_MAX)));
    }
    next();
  }

  void fail() {
    if (closed_) return;
    closed_ = true;
    run_.report.errors += outstanding_.size();
    outstanding_.clear();
    boost::system::error_code ec;
    socket_.close(ec);
    while (loops_ > 0) end_loop();
  }

  void end_loop() {
    if (loops_ == 0) return;
    --loops_;
    run_.release();
    if (loops_ == 0 && !closed_) {
      closed_ = true;
      boost::system::error_code ec;
      socket_.close(ec);
    }
  }

  Run& run_;
  std::size_t index_;
  tcp::socket socket_;
  std::array<char, 16384> buf_{};
  std::string inbuf_;
  std::deque<std::string> outq_;
  bool writing_ = false;
  bool closed_ = false;
  std::size_t loops_ = 0;
  std::uint64_t sent_ = 0;
  std::uint32_t next_stream_ = 1;
  std::unordered_map<std::uint32_t, Outstanding> outstanding_;
};

}  // namespace

LoadReport run_load(const LoadOptions& options) {
  LoadReport empty;
  if (options.connections == 0 || (options.duration.count() == 0 && options.requests_per_connection == 0)) {
    return empty;
  }
  Run run(options);
  run.start = Clock::now();
  run.timed = options.duration.count() > 0;
  run.measure_from = run.start + options.warmup;
  run.stop_at = run.measure_from + options.duration;

  boost::system::error_code ec;
  tcp::endpoint target(asio::ip::make_address(options.host, ec), options.port);
  if (ec) {
    empty.errors = empty.connect_failures = options.connections;
    return empty;
  }
  run.live_loops = options.connections;
  std::vector<std::shared_ptr<LoadConnection>> conns;
  for (std::size_t i = 0; i < options.connections; ++i) {
    conns.push_back(std::make_shared<LoadConnection>(run, i));
    conns.back()->start(target);
  }

  // Stops the loop when the run window plus the drain allowance is over.
  asio::steady_timer deadline(run.io);
  if (run.timed) {
    deadline.expires_at(run.stop_at + options.drain_timeout);
    deadline.async_wait([&](auto e) {
      if (!e) run.io.stop();
    });
  }
  run.io.run();
  auto end = Clock::now();
  for (auto& c : conns) c->shutdown();

  LoadReport report = run.report;
  double window = run.timed ? std::chrono::duration<double>(options.duration).count()
                            : std::chrono::duration<double>(end - run.measure_from).count();
  report.elapsed_s = window;
  if (window > 0) report.throughput_rps = static_cast<double>(report.requests) / window;
  auto& lat = run.latencies_us;
  if (!lat.empty()) {
    report.mean_us = std::accumulate(lat.begin(), lat.end(), 0.0) / static_cast<double>(lat.size());
    std::sort(lat.begin(), lat.end());
    auto pct = [&](double p) {
      std::size_t idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(lat.size()))) - 1;
      return static_cast<double>(lat[std::min(idx, lat.size() - 1)]);
    };
    report.p50_us = pct(0.50);
    report.p99_us = pct(0.99);
  }
  return report;
}

}  // namespace xlb::bench
