#include "xlb/codec.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>

#include "xlb/limits.hpp"

namespace xlb {

namespace {

const std::string* find_header(const std::vector<Header>& headers, std::string_view name) {
  for (const auto& h : headers) {
    if (h.name == name) return &h.value;
  }
  return nullptr;
}

bool is_tchar(char c) {
  if (std::isalnum(static_cast<unsigned char>(c))) return true;
  return std::strchr("!#$%&'*+-.^_`|~", c) != nullptr && c != '\0';
}

bool is_token(std::string_view s) { return !s.empty() && std::all_of(s.begin(), s.end(), is_tchar); }

bool is_lower_token(std::string_view s) {
  return is_token(s) && std::none_of(s.begin(), s.end(), [](char c) { return std::isupper(static_cast<unsigned char>(c)); });
}

bool is_field_value(std::string_view v) {
  if (!v.empty() && (v.front() == ' ' || v.front() == '\t' || v.back() == ' ' || v.back() == '\t')) return false;
  return std::none_of(v.begin(), v.end(), [](char c) { return c == '\r' || c == '\n' || c == '\0'; });
}

std::string_view trim(std::string_view v) {
  while (!v.empty() && (v.front() == ' ' || v.front() == '\t')) v.remove_prefix(1);
  while (!v.empty() && (v.back() == ' ' || v.back() == '\t')) v.remove_suffix(1);
  return v;
}

std::uint32_t load_be32(const char* p) {
  auto b = reinterpret_cast<const unsigned char*>(p);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void store_be32(char* p, std::uint32_t v) {
  p[0] = static_cast<char>(v >> 24);
  p[1] = static_cast<char>(v >> 16);
  p[2] = static_cast<char>(v >> 8);
  p[3] = static_cast<char>(v);
}

// Head of an HTTP/1.1 message: start line plus lowercase headers.
struct Head {
  std::string_view start_line;
  std::vector<Header> headers;
  std::size_t head_length = 0;
  std::size_t content_length = 0;
};

std::variant<Head, NeedMoreData, ProtocolError> parse_head(std::string_view buf) {
  const std::size_t scan = std::min(buf.size(), kMaxHeaderBytes);
  const std::size_t end = buf.substr(0, scan).find("\r\n\r\n");
  if (end == std::string_view::npos) {
    if (buf.size() >= kMaxHeaderBytes) return ProtocolError{"header exceeds MAX_HEADER_BYTES"};
    return NeedMoreData{};
  }
  Head head;
  head.head_length = end + 4;
  std::string_view rest = buf.substr(0, end + 2);
  std::size_t eol = rest.find("\r\n");
  head.start_line = rest.substr(0, eol);
  rest.remove_prefix(eol + 2);

  std::optional<std::size_t> content_length;
  while (!rest.empty()) {
    eol = rest.find("\r\n");
    std::string_view line = rest.substr(0, eol);
    rest.remove_prefix(eol + 2);
    if (line.empty() || line.front() == ' ' || line.front() == '\t') {
      return ProtocolError{"malformed header line"};
    }
    auto colon = line.find(':');
    if (colon == std::string_view::npos) return ProtocolError{"header line without ':'"};
    std::string_view name = line.substr(0, colon);
    if (!is_token(name)) return ProtocolError{"invalid header name"};
    std::string lname(name);
    std::transform(lname.begin(), lname.end(), lname.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::string_view value = trim(line.substr(colon + 1));
    if (lname == "content-length") {
      if (value.empty() || value.size() > 10 ||
          !std::all_of(value.begin(), value.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        return ProtocolError{"non-numeric content-length"};
      }
      std::size_t n = std::stoull(std::string(value));
      if (n > kMaxMuxPayload) return ProtocolError{"content-length too large"};
      if (content_length && *content_length != n) return ProtocolError{"conflicting content-length"};
      content_length = n;
    } else if (lname == "transfer-encoding") {
      return ProtocolError{"transfer-encoding is not supported"};
    }
    head.headers.push_back(Header{std::move(lname), std::string(value)});
  }
  head.content_length = content_length.value_or(0);
  return head;
}

template <class Message, class StartLine>
DecodeResult<Message> decode_http(std::string_view buf, StartLine parse_start) {
  auto parsed = parse_head(buf);
  if (auto* e = std::get_if<ProtocolError>(&parsed)) return *e;
  if (std::holds_alternative<NeedMoreData>(parsed)) return NeedMoreData{};
  Head& head = std::get<Head>(parsed);
  Message msg;
  if (auto err = parse_start(head.start_line, msg)) return ProtocolError{*err};
  const std::size_t total = head.head_length + head.content_length;
  if (buf.size() < total) return NeedMoreData{};
  msg.headers = std::move(head.headers);
  msg.body.assign(buf.substr(head.head_length, head.content_length));
  return Decoded<Message>{std::move(msg), total};
}

std::optional<std::string> parse_request_line(std::string_view line, Request& req) {
  auto sp1 = line.find(' ');
  if (sp1 == std::string_view::npos) return "malformed request line";
  auto sp2 = line.find(' ', sp1 + 1);
  if (sp2 == std::string_view::npos) return "malformed request line";
  std::string_view method = line.substr(0, sp1);
  std::string_view target = line.substr(sp1 + 1, sp2 - sp1 - 1);
  std::string_view version = line.substr(sp2 + 1);
  if (!is_token(method)) return "invalid method";
  if (target.empty() || std::any_of(target.begin(), target.end(), [](char c) {
        return static_cast<unsigned char>(c) <= 0x20 || c == 0x7f;
      })) {
    return "invalid request target";
  }
  if (version != "HTTP/1.1" && version != "HTTP/1.0") return "unsupported HTTP version";
  req.method = std::string(method);
  req.path = std::string(target);
  return std::nullopt;
}

std::optional<std::string> parse_status_line(std::string_view line, Response& resp) {
  if (line.size() < 12 || (line.substr(0, 9) != "HTTP/1.1 " && line.substr(0, 9) != "HTTP/1.0 ")) {
    return "malformed status line";
  }
  std::string_view code = line.substr(9, 3);
  if (!std::all_of(code.begin(), code.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return "non-numeric status";
  }
  int status = std::stoi(std::string(code));
  if (status < 100 || status > 599) return "status out of range";
  std::string_view reason;
  if (line.size() > 12) {
    if (line[12] != ' ') return "malformed status line";
    reason = line.substr(13);
  }
  resp.status = status;
  resp.reason = std::string(reason);
  return std::nullopt;
}

template <class Message, class StartLine>
DecodeResult<Message> decode_frame(std::string_view buf, MuxFrameType want, StartLine parse_start) {
  if (buf.size() < kMuxHeaderSize) return NeedMoreData{};
  auto hdr = parse_mux_header(buf);
  if (!hdr) return ProtocolError{"bad mux magic"};
  if (hdr->type != want) return ProtocolError{"unexpected mux frame type"};
  if (hdr->payload_length > kMaxMuxPayload) return ProtocolError{"mux payload too large"};
  const std::size_t total = kMuxHeaderSize + hdr->payload_length;
  if (buf.size() < total) return NeedMoreData{};
  auto inner = decode_http<Message>(buf.substr(kMuxHeaderSize, hdr->payload_length), parse_start);
  if (auto* e = std::get_if<ProtocolError>(&inner)) return *e;
  if (std::holds_alternative<NeedMoreData>(inner)) return ProtocolError{"truncated mux payload"};
  auto& d = std::get<Decoded<Message>>(inner);
  if (d.consumed != hdr->payload_length) return ProtocolError{"trailing bytes in mux payload"};
  d.message.protocol = Protocol::Mux;
  d.message.stream_id = hdr->stream_id;
  d.consumed = total;
  return std::move(d);
}

template <class Message>
void append_headers(std::string& out, const Message& m) {
  for (const auto& h : m.headers) {
    out += h.name;
    out += ": ";
    out += h.value;
    out += "\r\n";
  }
  out += "\r\n";
  out += m.body;
}

std::string frame(MuxFrameType type, std::uint32_t stream_id, const std::string& payload) {
  std::string out(kMuxHeaderSize, '\0');
  std::memcpy(out.data(), kMuxMagic.data(), 4);
  out[4] = static_cast<char>(type);
  out[5] = 0;
  store_be32(out.data() + 6, stream_id);
  store_be32(out.data() + 10, static_cast<std::uint32_t>(payload.size()));
  out += payload;
  return out;
}

template <class Message>
bool framing_ok(const Message& m) {
  if ((m.protocol == Protocol::Mux) != m.stream_id.has_value()) return false;
  const std::string* cl = nullptr;
  for (const auto& h : m.headers) {
    if (!is_lower_token(h.name) || !is_field_value(h.value)) return false;
    if (h.name == "transfer-encoding") return false;
    if (h.name == "content-length") {
      if (cl && *cl != h.value) return false;
      cl = &h.value;
    }
  }
  if (!cl) return m.body.empty();
  if (cl->empty() || cl->size() > 10 || !std::all_of(cl->begin(), cl->end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return false;
  }
  return std::stoull(*cl) == m.body.size();
}

}  // namespace

const std::string* Request::header(std::string_view name) const { return find_header(headers, name); }
const std::string* Response::header(std::string_view name) const { return find_header(headers, name); }

bool starts_like_mux(std::string_view bytes) {
  std::size_t n = std::min(bytes.size(), kMuxMagic.size());
  return bytes.substr(0, n) == kMuxMagic.substr(0, n);
}

std::optional<MuxHeader> parse_mux_header(std::string_view bytes) {
  if (bytes.size() < kMuxHeaderSize || bytes.substr(0, 4) != kMuxMagic) return std::nullopt;
  MuxHeader h;
  auto type = static_cast<std::uint8_t>(bytes[4]);
  if (type != 1 && type != 2) return std::nullopt;
  h.type = static_cast<MuxFrameType>(type);
  h.flags = static_cast<std::uint8_t>(bytes[5]);
  h.stream_id = load_be32(bytes.data() + 6);
  h.payload_length = load_be32(bytes.data() + 10);
  return h;
}

DecodeResult<Request> decode_request(std::string_view buffer) {
  if (buffer.empty()) return NeedMoreData{};
  if (starts_like_mux(buffer)) {
    return decode_frame<Request>(buffer, MuxFrameType::Request, parse_request_line);
  }
  return decode_http<Request>(buffer, parse_request_line);
}

DecodeResult<Response> decode_response(std::string_view buffer) {
  if (buffer.empty()) return NeedMoreData{};
  if (starts_like_mux(buffer)) {
    return decode_frame<Response>(buffer, MuxFrameType::Response, parse_status_line);
  }
  return decode_http<Response>(buffer, parse_status_line);
}

std::string encode_request(const Request& req) {
  std::string http;
  http.reserve(64 + req.path.size() + req.body.size());
  http += req.method;
  http += ' ';
  http += req.path;
  http += " HTTP/1.1\r\n";
  append_headers(http, req);
  if (req.protocol == Protocol::Mux) return frame(MuxFrameType::Request, req.stream_id.value_or(0), http);
  return http;
}

std::string encode_response(const Response& resp) {
  std::string http;
  http.reserve(64 + resp.body.size());
  http += "HTTP/1.1 ";
  http += std::to_string(resp.status);
  if (!resp.reason.empty()) {
    http += ' ';
    http += resp.reason;
  }
  http += "\r\n";
  append_headers(http, resp);
  if (resp.protocol == Protocol::Mux) return frame(MuxFrameType::Response, resp.stream_id.value_or(0), http);
  return http;
}

bool is_well_formed(const Request& req) {
  if (!is_token(req.method) || req.path.empty()) return false;
  if (std::any_of(req.path.begin(), req.path.end(), [](char c) { return static_cast<unsigned char>(c) <= 0x20 || c == 0x7f; })) {
    return false;
  }
  return framing_ok(req);
}

bool is_well_formed(const Response& resp) {
  if (resp.status < 100 || resp.status > 599) return false;
  if (std::any_of(resp.reason.begin(), resp.reason.end(), [](char c) { return c == '\r' || c == '\n'; })) {
    return false;
  }
  return framing_ok(resp);
}

std::optional<std::string_view> get_field(const Request& req, const FieldRef& field) {
  switch (field.which) {
    case MatchField::Path: return std::string_view(req.path);
    case MatchField::Method: return std::string_view(req.method);
    case MatchField::Header:
      if (const std::string* v = req.header(field.header)) return std::string_view(*v);
      return std::nullopt;
  }
  return std::nullopt;
}

void rewrite_stream_id_in_place(std::span<char> frame, std::uint32_t new_id) {
  std::string_view view(frame.data(), frame.size());
  auto hdr = parse_mux_header(view);
  if (!hdr) throw CodecError("rewrite_stream_id: not a mux frame or truncated header");
  if (frame.size() != kMuxHeaderSize + hdr->payload_length) {
    throw CodecError("rewrite_stream_id: frame length does not match payload length");
  }
  store_be32(frame.data() + 6, new_id);
}

std::string rewrite_stream_id(std::string_view frame, std::uint32_t new_id) {
  std::string out(frame);
  rewrite_stream_id_in_place(out, new_id);
  return out;
}

std::string_view reason_phrase(int status) {
  switch (status) {
    case 200: return "OK";
    case 400: return "Bad Request";
    case 404: return "Not Found";
    case 500: return "Internal Server Error";
    case 502: return "Bad Gateway";
    case 503: return "Service Unavailable";
    case 504: return "Gateway Timeout";
    default: return "Unknown";
  }
}

Response make_status_response(Protocol protocol, std::optional<std::uint32_t> stream_id, int status,
                              std::string body) {
  Response r;
  r.protocol = protocol;
  r.stream_id = protocol == Protocol::Mux ? stream_id.value_or(0) : std::optional<std::uint32_t>{};
  r.status = status;
  r.reason = std::string(reason_phrase(status));
  r.headers.push_back({"content-length", std::to_string(body.size())});
  r.body = std::move(body);
  return r;
}

}  // namespace xlb
