#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "xlb/config.hpp"

namespace xlb {

struct Header {
  std::string name;  // lowercase
  std::string value;

  bool operator==(const Header&) const = default;
};

struct Request {
  Protocol protocol = Protocol::Http11;
  std::optional<std::uint32_t> stream_id;  // Mux only
  std::string method;
  std::string path;
  std::vector<Header> headers;
  std::string body;

  const std::string* header(std::string_view name) const;
  bool operator==(const Request&) const = default;
};

struct Response {
  Protocol protocol = Protocol::Http11;
  std::optional<std::uint32_t> stream_id;
  int status = 200;
  std::string reason = "OK";
  std::vector<Header> headers;
  std::string body;

  const std::string* header(std::string_view name) const;
  bool operator==(const Response&) const = default;
};

struct NeedMoreData {};

struct ProtocolError {
  std::string message;
};

template <class Message>
struct Decoded {
  Message message;
  std::size_t consumed = 0;
};

template <class Message>
using DecodeResult = std::variant<Decoded<Message>, NeedMoreData, ProtocolError>;

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incremental decoding: NeedMoreData until one complete message is buffered;
// `consumed` covers exactly that message. Mux frames are recognised by their
// magic, anything else is parsed as HTTP/1.1.
DecodeResult<Request> decode_request(std::string_view buffer);
DecodeResult<Response> decode_response(std::string_view buffer);

std::string encode_request(const Request& req);
std::string encode_response(const Response& resp);

// Framing invariants: stream id present iff Mux, lowercase header names,
// body length matching content-length (and empty without one).
bool is_well_formed(const Request& req);
bool is_well_formed(const Response& resp);

struct FieldRef {
  MatchField which = MatchField::Path;
  std::string header;  // lowercase
};

std::optional<std::string_view> get_field(const Request& req, const FieldRef& field);

// MUX frame header: magic "XMUX" | type u8 | flags u8 | stream id u32 BE |
// payload length u32 BE | reserved u16. The payload is an HTTP/1.1 message.
inline constexpr std::size_t kMuxHeaderSize = 16;
inline constexpr std::string_view kMuxMagic = "XMUX";

enum class MuxFrameType : std::uint8_t { Request = 1, Response = 2 };

struct MuxHeader {
  MuxFrameType type = MuxFrameType::Request;
  std::uint8_t flags = 0;
  std::uint32_t stream_id = 0;
  std::uint32_t payload_length = 0;
};

std::optional<MuxHeader> parse_mux_header(std::string_view bytes);

// True when the bytes are, or could still become, a Mux frame.
bool starts_like_mux(std::string_view bytes);

// Returns a copy of a complete Mux frame with only the stream-id field changed.
std::string rewrite_stream_id(std::string_view frame, std::uint32_t new_id);
void rewrite_stream_id_in_place(std::span<char> frame, std::uint32_t new_id);

Response make_status_response(Protocol protocol, std::optional<std::uint32_t> stream_id, int status,
                              std::string body);
std::string_view reason_phrase(int status);

}  // namespace xlb
