#include "fedtune/wire.hpp"

#include <cerrno>
#include <cstring>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <zlib.h>

namespace fedtune {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

constexpr size_t kHeaderLen = 4 + 1 + 1 + 1 + 1 + 4 + 4 + 8;

std::pair<std::string, uint16_t> split_addr(const std::string& addr) {
    size_t colon = addr.rfind(':');
    if (colon == std::string::npos) {
        throw ConfigError("address must be host:port, got '" + addr + "'");
    }
    std::string host = addr.substr(0, colon);
    int port = std::stoi(addr.substr(colon + 1));
    if (port < 0 || port > 65535) throw ConfigError("bad port in '" + addr + "'");
    return {host.empty() ? "0.0.0.0" : host, static_cast<uint16_t>(port)};
}

void wait_readable(int fd, double timeout_seconds) {
    struct pollfd pfd{fd, POLLIN, 0};
    int ms = timeout_seconds <= 0 ? 0 : static_cast<int>(timeout_seconds * 1000.0);
    int rc = ::poll(&pfd, 1, ms);
    if (rc == 0) throw TransportError("receive timed out");
    if (rc < 0) throw TransportError(std::string("poll: ") + std::strerror(errno));
}

}  // namespace

const char* msg_kind_name(MsgKind k) {
    switch (k) {
        case MsgKind::ModelBroadcast: return "ModelBroadcast";
        case MsgKind::AdapterUpload: return "AdapterUpload";
        case MsgKind::AdapterDistribute: return "AdapterDistribute";
        case MsgKind::EvalRequest: return "EvalRequest";
        case MsgKind::EvalReport: return "EvalReport";
        case MsgKind::Finish: return "Finish";
    }
    return "?";
}

uint32_t crc32_ieee(const uint8_t* data, size_t len) {
    return static_cast<uint32_t>(::crc32(0L, data, static_cast<uInt>(len)));
}

std::vector<uint8_t> encode_frame(const Message& msg) {
    std::vector<uint8_t> out;
    out.reserve(kHeaderLen + msg.payload.size() + 4);
    put_u32(out, kWireMagic);
    out.push_back(kWireVersion);
    out.push_back(static_cast<uint8_t>(msg.kind));
    out.push_back(msg.flags.to_byte());
    out.push_back(0);  // reserved
    put_u32(out, msg.round);
    put_u32(out, msg.sender);
    put_u64(out, msg.payload.size());
    out.insert(out.end(), msg.payload.begin(), msg.payload.end());
    put_u32(out, crc32_ieee(msg.payload.data(), msg.payload.size()));
    return out;
}

std::optional<FrameView> try_decode_frame(const uint8_t* data, size_t len) {
    if (len < kHeaderLen) return std::nullopt;
    if (get_u32(data) != kWireMagic) throw ProtocolError("bad frame magic");
    if (data[4] != kWireVersion) throw ProtocolError("unsupported frame version");
    uint8_t kind = data[5];
    if (kind < 1 || kind > 6) throw ProtocolError("unknown message kind");
    if (data[7] != 0) throw ProtocolError("reserved byte not zero");
    uint64_t payload_len = get_u64(data + 16);
    if (payload_len > kMaxPayload) throw ProtocolError("frame payload too large");
    if (len < kHeaderLen + payload_len + 4) return std::nullopt;

    FrameView fv;
    fv.msg.kind = static_cast<MsgKind>(kind);
    try {
        fv.msg.flags = CodecFlags::from_byte(data[6]);
    } catch (const DecodeError& e) {
        throw ProtocolError(e.what());
    }
    fv.msg.round = get_u32(data + 8);
    fv.msg.sender = get_u32(data + 12);
    fv.msg.payload.assign(data + kHeaderLen, data + kHeaderLen + payload_len);
    uint32_t crc = get_u32(data + kHeaderLen + payload_len);
    if (crc != crc32_ieee(fv.msg.payload.data(), fv.msg.payload.size())) {
        throw ProtocolError("frame CRC mismatch");
    }
    fv.consumed = kHeaderLen + payload_len + 4;
    return fv;
}

Socket::~Socket() { close(); }

Socket::Socket(Socket&& other) noexcept : fd_(other.fd_), rxbuf_(std::move(other.rxbuf_)) {
    other.fd_ = -1;
}

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        rxbuf_ = std::move(other.rxbuf_);
        other.fd_ = -1;
    }
    return *this;
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

void Socket::send_message(const Message& msg) {
    if (fd_ < 0) throw TransportError("send on closed socket");
    std::vector<uint8_t> bytes = encode_frame(msg);
    size_t sent = 0;
    while (sent < bytes.size()) {
        ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(std::string("send: ") + std::strerror(errno));
        }
        sent += static_cast<size_t>(n);
    }
}

Message Socket::recv_message(double timeout_seconds) {
    if (fd_ < 0) throw TransportError("recv on closed socket");
    for (;;) {
        if (auto fv = try_decode_frame(rxbuf_.data(), rxbuf_.size())) {
            rxbuf_.erase(rxbuf_.begin(),
                         rxbuf_.begin() + static_cast<ptrdiff_t>(fv->consumed));
            return std::move(fv->msg);
        }
        wait_readable(fd_, timeout_seconds);
        uint8_t chunk[16384];
        ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
        if (n == 0) throw TransportError("connection closed by peer");
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(std::string("recv: ") + std::strerror(errno));
        }
        rxbuf_.insert(rxbuf_.end(), chunk, chunk + n);
    }
}

Listener::Listener(const std::string& addr) {
    auto [host, port] = split_addr(addr);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1) {
        throw ConfigError("listen address must be an IPv4 literal, got '" + host + "'");
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0) {
        throw TransportError(std::string("bind: ") + std::strerror(errno));
    }
    if (::listen(fd_, 64) < 0) {
        throw TransportError(std::string("listen: ") + std::strerror(errno));
    }
    socklen_t len = sizeof(sa);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    port_ = ntohs(sa.sin_port);
}

Listener::~Listener() {
    if (fd_ >= 0) ::close(fd_);
}

Socket Listener::accept(double timeout_seconds) {
    wait_readable(fd_, timeout_seconds);
    int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) throw TransportError(std::string("accept: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Socket(cfd);
}

Socket dial(const std::string& addr, double timeout_seconds) {
    auto [host, port] = split_addr(addr);
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) {
        throw TransportError("cannot resolve '" + host + "'");
    }
    sockaddr_in sa = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
    sa.sin_port = htons(port);
    ::freeaddrinfo(res);

    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError(std::string("socket: ") + std::strerror(errno));
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout_seconds);
    tv.tv_usec = static_cast<suseconds_t>((timeout_seconds - static_cast<double>(tv.tv_sec)) * 1e6);
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0) {
        int err = errno;
        ::close(fd);
        throw TransportError(std::string("connect: ") + std::strerror(err));
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Socket(fd);
}

}  // namespace fedtune
