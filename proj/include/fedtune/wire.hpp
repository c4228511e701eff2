#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedtune/codec.hpp"
#include "fedtune/errors.hpp"

namespace fedtune {

enum class MsgKind : uint8_t {
    ModelBroadcast = 1,
    AdapterUpload = 2,
    AdapterDistribute = 3,
    EvalRequest = 4,
    EvalReport = 5,
    Finish = 6,
};

const char* msg_kind_name(MsgKind k);

// Typed envelope exchanged between server (sender 0) and clients (>= 1).
// Payload is a serialized parameter tree under `flags`, or a JSON metrics
// record (flags ignored for metrics).
struct Message {
    MsgKind kind = MsgKind::Finish;
    uint32_t round = 0;
    uint32_t sender = 0;
    CodecFlags flags;
    std::vector<uint8_t> payload;
};

inline constexpr uint32_t kWireMagic = 0x46534C4D;
inline constexpr uint8_t kWireVersion = 1;
// Frames larger than this are rejected before allocation.
inline constexpr uint64_t kMaxPayload = 1ull << 30;

// frame := magic u32 | version u8 | kind u8 | flags u8 | reserved u8 |
//          round u32 | sender u32 | payload_len u64 | payload | crc32 u32
// All integers little-endian; CRC-32 (IEEE) over the payload only.
std::vector<uint8_t> encode_frame(const Message& msg);

// Incremental decoder result: nullopt when more bytes are needed.
struct FrameView {
    Message msg;
    size_t consumed = 0;
};
std::optional<FrameView> try_decode_frame(const uint8_t* data, size_t len);

uint32_t crc32_ieee(const uint8_t* data, size_t len);

// --- blocking TCP transport (reliable byte stream) ---

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket();
    Socket(Socket&& other) noexcept;
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }
    void close();

    void send_message(const Message& msg);
    // Throws TransportError on timeout/EOF, ProtocolError on bad frames.
    Message recv_message(double timeout_seconds);

private:
    int fd_ = -1;
    std::vector<uint8_t> rxbuf_;
};

class Listener {
public:
    // addr "host:port"; port 0 picks an ephemeral port.
    explicit Listener(const std::string& addr);
    ~Listener();
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;

    uint16_t port() const { return port_; }
    Socket accept(double timeout_seconds);

private:
    int fd_ = -1;
    uint16_t port_ = 0;
};

Socket dial(const std::string& addr, double timeout_seconds);

}  // namespace fedtune
