#include <array>
#include <deque>
#include <mutex>
#include <set>
#include <thread>

#include <boost/asio.hpp>

#include "xlb/bench.hpp"
#include "xlb/codec.hpp"

namespace xlb::bench {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

struct EchoBackend::Impl {
  explicit Impl(BackendOptions o) : options(std::move(o)), acceptor(io) {}

  BackendOptions options;
  asio::io_context io;
  tcp::acceptor acceptor;
  std::thread thread;
  std::uint16_t port = 0;
  std::function<void(const std::string&)> on_violation;

  mutable std::mutex mu;
  BackendStats stats;

  void violation(const std::string& what) {
    if (on_violation) on_violation(what);
  }

  void accept();
};

namespace {

class EchoConnection : public std::enable_shared_from_this<EchoConnection> {
 public:
  EchoConnection(EchoBackend::Impl* owner, tcp::socket socket) : owner_(owner), socket_(std::move(socket)) {}

  void start() {
    boost::system::error_code ec;
    socket_.set_option(tcp::no_delay(true), ec);
    do_read();
  }

 private:
  void do_read() {
    socket_.async_read_some(asio::buffer(buf_), [self = shared_from_this()](auto ec, std::size_t n) {
      if (ec) return;
      {
        std::lock_guard lock(self->owner_->mu);
        self->owner_->stats.rx_bytes += n;
      }
      self->inbuf_.append(self->buf_.data(), n);
      if (self->process()) self->do_read();
    });
  }

  bool process() {
    for (;;) {
      auto result = decode_request(inbuf_);
      if (std::holds_alternative<NeedMoreData>(result)) return true;
      if (std::holds_alternative<ProtocolError>(result)) {
        boost::system::error_code ec;
        socket_.close(ec);
        return false;
      }
      auto& d = std::get<Decoded<Request>>(result);
      inbuf_.erase(0, d.consumed);
      handle(std::move(d.message));
    }
  }

  void handle(Request req) {
    std::uint64_t seq = ++seq_;
    {
      std::lock_guard lock(owner_->mu);
      auto& st = owner_->stats;
      st.requests++;
      if (req.protocol == Protocol::Http11) {
        if (http11_busy_) {
          st.http11_overlaps++;
          report("two HTTP/1.1 requests in flight on one connection");
        }
        st.max_http11_in_flight = std::max<std::uint64_t>(st.max_http11_in_flight, http11_busy_ ? 2 : 1);
      } else {
        if (!mux_in_flight_.insert(*req.stream_id).second) {
          st.mux_duplicates++;
          report("duplicate in-flight Mux stream id " + std::to_string(*req.stream_id));
        }
        st.max_mux_in_flight = std::max<std::uint64_t>(st.max_mux_in_flight, mux_in_flight_.size());
      }
    }
    if (req.protocol == Protocol::Http11) http11_busy_ = true;

    Response resp;
    resp.protocol = req.protocol;
    resp.stream_id = req.stream_id;
    resp.status = 200;
    resp.reason = "OK";
    if (const auto* nonce = req.header("x-nonce")) resp.headers.push_back({"x-nonce", *nonce});
    resp.headers.push_back({"x-backend-stream", std::to_string(req.stream_id ? *req.stream_id : seq)});
    if (!owner_->options.name.empty()) resp.headers.push_back({"x-backend", owner_->options.name});
    resp.body = owner_->options.response_bytes < 0 ? std::move(req.body)
                                                   : std::string(owner_->options.response_bytes, 'x');
    resp.headers.push_back({"content-length", std::to_string(resp.body.size())});

    if (owner_->options.think_time.count() > 0) {
      auto timer = std::make_shared<asio::steady_timer>(socket_.get_executor(), owner_->options.think_time);
      timer->async_wait([self = shared_from_this(), timer, resp = std::move(resp)](auto ec) mutable {
        if (!ec) self->respond(std::move(resp));
      });
    } else {
      respond(std::move(resp));
    }
  }

  void respond(Response resp) {
    // Peek before writing: an in-order peer must not have sent anything more
    // on this connection while it still waits for this response.
    if (resp.protocol == Protocol::Http11) {
      boost::system::error_code ec;
      if (!inbuf_.empty() || socket_.available(ec) > 0) {
        std::lock_guard lock(owner_->mu);
        owner_->stats.http11_overlaps++;
        report("HTTP/1.1 bytes arrived before the outstanding response was written");
      }
    }
    Pending p{resp.protocol, resp.stream_id, encode_response(resp)};
    outq_.push_back(std::move(p));
    if (!writing_) do_write();
  }

  void do_write() {
    if (outq_.empty()) {
      writing_ = false;
      return;
    }
    writing_ = true;
    asio::async_write(socket_, asio::buffer(outq_.front().bytes), [self = shared_from_this()](auto ec, std::size_t n) {
      if (ec) return;
      auto done = std::move(self->outq_.front());
      self->outq_.pop_front();
      {
        std::lock_guard lock(self->owner_->mu);
        self->owner_->stats.tx_bytes += n;
      }
      if (done.protocol == Protocol::Http11) {
        self->http11_busy_ = false;
      } else {
        self->mux_in_flight_.erase(*done.stream_id);
      }
      self->do_write();
    });
  }

  void report(const std::string& what) {
    // called with owner mutex held; defer the callback
    asio::post(socket_.get_executor(), [owner = owner_, what] { owner->violation(what); });
  }

  struct Pending {
    Protocol protocol;
    std::optional<std::uint32_t> stream_id;
    std::string bytes;
  };

  EchoBackend::Impl* owner_;
  tcp::socket socket_;
  std::array<char, 16384> buf_{};
  std::string inbuf_;
  std::deque<Pending> outq_;
  bool writing_ = false;
  bool http11_busy_ = false;
  std::set<std::uint32_t> mux_in_flight_;
  std::uint64_t seq_ = 0;
};

}  // namespace

void EchoBackend::Impl::accept() {
  acceptor.async_accept([self = this](auto ec, tcp::socket socket) {
    if (ec == asio::error::operation_aborted || !self->acceptor.is_open()) return;
    if (!ec) {
      {
        std::lock_guard lock(self->mu);
        self->stats.connections++;
      }
      std::make_shared<EchoConnection>(self, std::move(socket))->start();
    }
    self->accept();
  });
}

EchoBackend::EchoBackend(BackendOptions options) : impl_(std::make_shared<Impl>(std::move(options))) {}

EchoBackend::~EchoBackend() { stop(); }

void EchoBackend::start() {
  impl_->on_violation = on_violation;
  tcp::endpoint ep(asio::ip::make_address(impl_->options.host), impl_->options.port);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(tcp::acceptor::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen(asio::socket_base::max_listen_connections);
  impl_->port = impl_->acceptor.local_endpoint().port();
  impl_->accept();
  impl_->thread = std::thread([impl = impl_] { impl->io.run(); });
}

void EchoBackend::stop() {
  if (!impl_->thread.joinable()) return;
  asio::post(impl_->io, [impl = impl_] {
    boost::system::error_code ec;
    impl->acceptor.close(ec);
    impl->io.stop();
  });
  impl_->thread.join();
}

std::uint16_t EchoBackend::port() const { return impl_->port; }

BackendStats EchoBackend::stats() const {
  std::lock_guard lock(impl_->mu);
  return impl_->stats;
}

}  // namespace xlb::bench
