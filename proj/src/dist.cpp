// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/dist.hpp>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace dgtr {

const char *
msgTypeName(std::uint16_t type) {
    switch (type) {
    case 1: return "HELLO";
    case 2: return "REGION_ASSIGN";
    case 3: return "MODEL_UPLOAD";
    case 4: return "ACK";
    case 5: return "AGGREGATE_DONE";
    case 6: return "ERROR";
    default: return "UNKNOWN";
    }
}

bool
isKnownMsgType(std::uint16_t type) {
    return type >= 1 && type <= 6;
}

// --- framing ----------------------------------------------------------------

namespace {

constexpr char kMagic[5] = "DGTR";

std::uint64_t
readU64(const std::uint8_t *p) {
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return v;
}

std::uint16_t
readU16(const std::uint8_t *p) {
    std::uint16_t v;
    std::memcpy(&v, p, 2);
    return v;
}

void
checkMagicPrefix(std::span<const std::uint8_t> bytes) {
    const std::size_t n = std::min<std::size_t>(bytes.size(), 4);
    if (std::memcmp(bytes.data(), kMagic, n) != 0) throw FormatError(FormatErrorCode::BadMagic, "frame: bad magic");
}

} // namespace

Bytes
encodeFrame(const WireMessage &msg) {
    if (msg.payload.size() > kMaxPayloadBytes) throw ContractError("frame: payload too large");
    ByteWriter w;
    w.putMagic(kMagic);
    w.put<std::uint16_t>(kProtocolVersion);
    w.put<std::uint16_t>(msg.type);
    w.put<std::uint64_t>(msg.payload.size());
    w.putBytes(msg.payload);
    w.put<std::uint32_t>(crc32(msg.payload));
    return w.take();
}

WireMessage
decodeFrame(std::span<const std::uint8_t> bytes, std::size_t *consumed) {
    checkMagicPrefix(bytes);
    if (bytes.size() < kFrameHeaderBytes) throw FormatError(FormatErrorCode::Truncated, "frame: short header");
    const std::uint16_t version = readU16(bytes.data() + 4);
    if (version != kProtocolVersion) {
        throw FormatError(FormatErrorCode::BadVersion, "frame: version " + std::to_string(version));
    }
    const std::uint64_t len = readU64(bytes.data() + 8);
    if (len > kMaxPayloadBytes) throw FormatError(FormatErrorCode::TooLarge, "frame: payload length " + std::to_string(len));
    const std::size_t total = kFrameHeaderBytes + len + kFrameTrailerBytes;
    if (bytes.size() < total) throw FormatError(FormatErrorCode::Truncated, "frame: short body");
    WireMessage msg(readU16(bytes.data() + 6), Bytes(bytes.begin() + kFrameHeaderBytes, bytes.begin() + kFrameHeaderBytes + len));
    std::uint32_t crc;
    std::memcpy(&crc, bytes.data() + kFrameHeaderBytes + len, 4);
    if (crc != crc32(msg.payload)) throw FormatError(FormatErrorCode::BadChecksum, "frame: checksum mismatch");
    if (consumed) *consumed = total;
    return msg;
}

void
FrameReader::feed(std::span<const std::uint8_t> bytes) {
    if (mPos > 0 && mPos * 2 >= mBuf.size()) {
        mBuf.erase(mBuf.begin(), mBuf.begin() + static_cast<std::ptrdiff_t>(mPos));
        mPos = 0;
    }
    mBuf.insert(mBuf.end(), bytes.begin(), bytes.end());
}

std::optional<WireMessage>
FrameReader::next() {
    if (mFailed) throw FormatError(FormatErrorCode::Malformed, "frame stream is desynchronized");
    const std::span<const std::uint8_t> avail(mBuf.data() + mPos, mBuf.size() - mPos);
    try {
        checkMagicPrefix(avail);
        if (avail.size() < kFrameHeaderBytes) return std::nullopt;
        const std::uint64_t len = readU64(avail.data() + 8);
        if (len > kMaxPayloadBytes) throw FormatError(FormatErrorCode::TooLarge, "frame: payload length " + std::to_string(len));
        const std::size_t total = kFrameHeaderBytes + len + kFrameTrailerBytes;
        if (avail.size() < total) return std::nullopt;
        mPos += total; // recoverable errors below still consume the frame
        return decodeFrame(avail.first(total));
    } catch (const FormatError &e) {
        if (e.code() == FormatErrorCode::BadMagic || e.code() == FormatErrorCode::TooLarge) mFailed = true;
        throw;
    }
}

// --- payloads ---------------------------------------------------------------

namespace {

void
expectEnd(const ByteReader &r, const char *what) {
    if (r.remaining() != 0) throw FormatError(FormatErrorCode::Malformed, std::string(what) + ": trailing bytes");
}

} // namespace

Bytes
encodeHello(const HelloPayload &p) {
    ByteWriter w;
    w.put<std::int32_t>(p.device);
    w.put<std::uint64_t>(p.token);
    return w.take();
}

HelloPayload
decodeHello(std::span<const std::uint8_t> b) {
    ByteReader r(b);
    HelloPayload p;
    p.device = r.get<std::int32_t>();
    p.token  = r.get<std::uint64_t>();
    expectEnd(r, "hello");
    return p;
}

Bytes
encodeAssign(const AssignPayload &p) {
    ByteWriter w;
    w.put<std::int32_t>(p.device);
    w.put<std::int32_t>(p.devices);
    w.put<double>(p.region.min_x);
    w.put<double>(p.region.max_x);
    w.put<double>(p.region.min_y);
    w.put<double>(p.region.max_y);
    return w.take();
}

AssignPayload
decodeAssign(std::span<const std::uint8_t> b) {
    ByteReader r(b);
    AssignPayload p;
    p.device       = r.get<std::int32_t>();
    p.devices      = r.get<std::int32_t>();
    p.region.min_x = r.get<double>();
    p.region.max_x = r.get<double>();
    p.region.min_y = r.get<double>();
    p.region.max_y = r.get<double>();
    p.region.device = p.device;
    expectEnd(r, "region assignment");
    return p;
}

Bytes
encodeUpload(const GaussianModel &model, std::span<const Camera> cameras) {
    Bytes out = encodeModel(model);
    const Bytes cams = encodeCameras(cameras);
    out.insert(out.end(), cams.begin(), cams.end());
    return out;
}

UploadPayload
decodeUpload(std::span<const std::uint8_t> b) {
    UploadPayload p;
    std::size_t used = 0, usedCams = 0;
    p.model   = decodeModel(b, &used);
    p.cameras = decodeCameras(b.subspan(used), &usedCams);
    if (used + usedCams != b.size()) throw FormatError(FormatErrorCode::Malformed, "model upload: trailing bytes");
    return p;
}

Bytes
encodeError(const ErrorPayload &p) {
    ByteWriter w;
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.code));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.message.size()));
    w.putBytes({reinterpret_cast<const std::uint8_t *>(p.message.data()), p.message.size()});
    return w.take();
}

ErrorPayload
decodeError(std::span<const std::uint8_t> b) {
    ByteReader r(b);
    ErrorPayload p;
    p.code         = static_cast<WireError>(r.get<std::uint16_t>());
    const auto len = r.get<std::uint32_t>();
    const auto s   = r.getBytes(len);
    p.message.assign(s.begin(), s.end());
    expectEnd(r, "error");
    return p;
}

Bytes
encodeDone(const DonePayload &p) {
    ByteWriter w;
    w.put<std::uint64_t>(p.primitives);
    w.put<std::uint64_t>(p.model_hash);
    return w.take();
}

DonePayload
decodeDone(std::span<const std::uint8_t> b) {
    ByteReader r(b);
    DonePayload p;
    p.primitives = r.get<std::uint64_t>();
    p.model_hash = r.get<std::uint64_t>();
    expectEnd(r, "aggregate done");
    return p;
}

std::uint64_t
contentHash(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : bytes) h = (h ^ b) * 0x100000001b3ull;
    return h;
}

// --- loopback ---------------------------------------------------------------

namespace {

struct Pipe {
    std::mutex m;
    std::condition_variable cv;
    Bytes buf;
    bool closed = false;

    void
    close() {
        {
            std::lock_guard lk(m);
            closed = true;
        }
        cv.notify_all();
    }
};

class LoopbackConnection final : public Connection {
  public:
    LoopbackConnection(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out) : mIn(std::move(in)), mOut(std::move(out)) {}
    ~LoopbackConnection() override { close(); }

    void
    send(const WireMessage &msg) override {
        const Bytes frame = encodeFrame(msg);
        {
            std::lock_guard lk(mOut->m);
            if (mOut->closed) throw TransportError("loopback: connection closed");
            mOut->buf.insert(mOut->buf.end(), frame.begin(), frame.end());
        }
        mOut->cv.notify_all();
    }

    std::optional<WireMessage>
    receive(Millis timeout) override {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        while (true) {
            if (auto msg = mReader.next()) return msg;
            std::unique_lock lk(mIn->m);
            if (!mIn->cv.wait_until(lk, deadline, [&] { return !mIn->buf.empty() || mIn->closed; })) return std::nullopt;
            if (mIn->buf.empty()) throw TransportError("loopback: peer closed");
            mReader.feed(mIn->buf);
            mIn->buf.clear();
        }
    }

    void
    close() override {
        mIn->close();
        mOut->close();
    }

  private:
    std::shared_ptr<Pipe> mIn, mOut;
    FrameReader mReader;
};

} // namespace

struct LoopbackNetwork::State {
    std::mutex m;
    std::condition_variable cv;
    bool listening = false;
    std::deque<std::unique_ptr<Connection>> pending;
};

namespace {

class LoopbackListener final : public Listener {
  public:
    explicit LoopbackListener(std::shared_ptr<LoopbackNetwork::State> s) : mState(std::move(s)) {}
    ~LoopbackListener() override { close(); }

    std::unique_ptr<Connection>
    accept(Millis timeout) override {
        std::unique_lock lk(mState->m);
        if (!mState->cv.wait_for(lk, timeout, [&] { return !mState->pending.empty() || !mState->listening; })) {
            return nullptr;
        }
        if (mState->pending.empty()) return nullptr;
        auto c = std::move(mState->pending.front());
        mState->pending.pop_front();
        return c;
    }

    void
    close() override {
        std::lock_guard lk(mState->m);
        mState->listening = false;
        mState->pending.clear();
        mState->cv.notify_all();
    }

  private:
    std::shared_ptr<LoopbackNetwork::State> mState;
};

} // namespace

LoopbackNetwork::LoopbackNetwork() : mState(std::make_shared<State>()) {}
LoopbackNetwork::~LoopbackNetwork() = default;

std::unique_ptr<Listener>
LoopbackNetwork::listen() {
    std::lock_guard lk(mState->m);
    if (mState->listening) throw ContractError("loopback: already listening");
    mState->listening = true;
    return std::make_unique<LoopbackListener>(mState);
}

std::unique_ptr<Connection>
LoopbackNetwork::connect() {
    auto up = std::make_shared<Pipe>(), down = std::make_shared<Pipe>();
    {
        std::lock_guard lk(mState->m);
        if (!mState->listening) throw TransportError("loopback: connection refused");
        mState->pending.push_back(std::make_unique<LoopbackConnection>(up, down));
    }
    mState->cv.notify_all();
    return std::make_unique<LoopbackConnection>(down, up);
}

Connector
LoopbackNetwork::connector() {
    return [this] { return connect(); };
}

// --- TCP --------------------------------------------------------------------

namespace {

std::pair<std::string, std::string>
splitAddress(const std::string &address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos || colon + 1 == address.size()) {
        throw ContractError("address must be host:port, got '" + address + "'");
    }
    return {address.substr(0, colon), address.substr(colon + 1)};
}

addrinfo *
resolve(const std::string &address, bool passive) {
    const auto [host, port] = splitAddress(address);
    addrinfo hints{};
    hints.ai_family   = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags    = passive ? AI_PASSIVE : 0;
    addrinfo *res     = nullptr;
    const int rc      = getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0) throw TransportError("cannot resolve " + address + ": " + gai_strerror(rc));
    return res;
}

class TcpConnection final : public Connection {
  public:
    explicit TcpConnection(int fd) : mFd(fd) {
        const int one = 1;
        setsockopt(mFd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }
    ~TcpConnection() override { close(); }

    void
    send(const WireMessage &msg) override {
        if (mFd < 0) throw TransportError("tcp: connection closed");
        const Bytes frame = encodeFrame(msg);
        std::size_t off   = 0;
        while (off < frame.size()) {
            const ssize_t n = ::send(mFd, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) throw TransportError(std::string("tcp: send failed: ") + std::strerror(errno));
            off += static_cast<std::size_t>(n);
        }
    }

    std::optional<WireMessage>
    receive(Millis timeout) override {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        std::uint8_t chunk[65536];
        while (true) {
            if (auto msg = mReader.next()) return msg;
            if (mFd < 0) throw TransportError("tcp: connection closed");
            const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
            pollfd p{mFd, POLLIN, 0};
            const int rc = ::poll(&p, 1, static_cast<int>(std::max<long long>(0, left.count())));
            if (rc < 0 && errno == EINTR) continue;
            if (rc < 0) throw TransportError(std::string("tcp: poll failed: ") + std::strerror(errno));
            if (rc == 0) return std::nullopt;
            const ssize_t n = ::recv(mFd, chunk, sizeof(chunk), 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) throw TransportError("tcp: peer closed");
            mReader.feed({chunk, static_cast<std::size_t>(n)});
        }
    }

    void
    close() override {
        if (mFd >= 0) {
            ::shutdown(mFd, SHUT_RDWR);
            ::close(mFd);
            mFd = -1;
        }
    }

  private:
    int mFd;
    FrameReader mReader;
};

} // namespace

TcpListener::TcpListener(const std::string &address) {
    addrinfo *res = resolve(address, true);
    mFd           = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (mFd < 0) {
        freeaddrinfo(res);
        throw TransportError(std::string("tcp: socket failed: ") + std::strerror(errno));
    }
    const int one = 1;
    setsockopt(mFd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    const int rc = ::bind(mFd, res->ai_addr, res->ai_addrlen);
    freeaddrinfo(res);
    if (rc != 0 || ::listen(mFd, 64) != 0) {
        const std::string err = std::strerror(errno);
        close();
        throw TransportError("tcp: cannot listen on " + address + ": " + err);
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    getsockname(mFd, reinterpret_cast<sockaddr *>(&bound), &len);
    mPort = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() { close(); }

std::unique_ptr<Connection>
TcpListener::accept(Millis timeout) {
    if (mFd < 0) return nullptr;
    pollfd p{mFd, POLLIN, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc <= 0) return nullptr;
    const int fd = ::accept(mFd, nullptr, nullptr);
    if (fd < 0) return nullptr;
    return std::make_unique<TcpConnection>(fd);
}

void
TcpListener::close() {
    if (mFd >= 0) {
        ::close(mFd);
        mFd = -1;
    }
}

std::unique_ptr<Connection>
tcpConnect(const std::string &address) {
    addrinfo *res = resolve(address, false);
    const int fd  = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
        freeaddrinfo(res);
        throw TransportError(std::string("tcp: socket failed: ") + std::strerror(errno));
    }
    const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
    freeaddrinfo(res);
    if (rc != 0) {
        const std::string err = std::strerror(errno);
        ::close(fd);
        throw TransportError("tcp: cannot connect to " + address + ": " + err);
    }
    return std::make_unique<TcpConnection>(fd);
}

// --- device -----------------------------------------------------------------

namespace {

// Waits for the next reply, treating silence as a transport failure.
WireMessage
awaitReply(Connection &conn, Millis timeout, const char *what) {
    auto msg = conn.receive(timeout);
    if (!msg) throw TransportError(std::string("timed out waiting for ") + what);
    return *msg;
}

struct ServerRejected : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void
throwIfError(const WireMessage &msg) {
    if (!msg.is(MsgType::Error)) return;
    std::string text = "server error";
    try {
        const auto e = decodeError(msg.payload);
        text         = "server error " + std::to_string(static_cast<int>(e.code)) + ": " + e.message;
    } catch (const FormatError &) {
    }
    throw ServerRejected(text);
}

} // namespace

DeviceReport
runDevice(const DeviceConfig &cfg, const Connector &connect) {
    if (cfg.retries < 0) throw ContractError("device: retries must be >= 0");
    DeviceReport rep;
    const std::uint64_t token =
        cfg.token ? cfg.token : (static_cast<std::uint64_t>(cfg.device) + 1) * 0x9E3779B97F4A7C15ull ^ cfg.train.seed;
    std::optional<Bytes> upload;
    Millis wait = cfg.backoff;
    for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(wait);
            wait *= 2;
        }
        ++rep.attempts;
        try {
            auto conn = connect();
            conn->send(WireMessage(MsgType::Hello, encodeHello({cfg.device, token})));
            auto reply = awaitReply(*conn, cfg.reply_timeout, "REGION_ASSIGN");
            throwIfError(reply);
            if (!reply.is(MsgType::RegionAssign)) throw ServerRejected("expected REGION_ASSIGN");
            rep.region = decodeAssign(reply.payload).region;

            if (!upload) {
                if (!cfg.predictor) throw ContractError("device: no predictor configured");
                auto init  = initializeDevice(cfg.dataset.cameras, *cfg.predictor, cfg.init);
                rep.model  = trainDevice(std::move(init.model), cfg.dataset, cfg.train).model;
                upload     = encodeUpload(rep.model, cfg.dataset.cameras);
            }
            conn->send(WireMessage(MsgType::ModelUpload, *upload));
            reply = awaitReply(*conn, cfg.reply_timeout, "ACK");
            throwIfError(reply);
            if (!reply.is(MsgType::Ack)) throw ServerRejected("expected ACK");
            if (cfg.await_done) {
                reply = awaitReply(*conn, cfg.done_timeout, "AGGREGATE_DONE");
                throwIfError(reply);
                if (!reply.is(MsgType::AggregateDone)) throw ServerRejected("expected AGGREGATE_DONE");
                rep.done = decodeDone(reply.payload);
            }
            conn->close();
            rep.exit_code = 0;
            rep.error.clear();
            return rep;
        } catch (const TransportError &e) {
            rep.error = e.what();
        } catch (const FormatError &e) {
            rep.error = e.what(); // corrupted stream: reconnect
        } catch (const ServerRejected &e) {
            rep.exit_code = 3;
            rep.error     = e.what();
            return rep;
        } catch (const ContractError &e) {
            rep.exit_code = 3;
            rep.error     = e.what();
            return rep;
        }
    }
    rep.exit_code = 4;
    return rep;
}

// --- server -----------------------------------------------------------------

namespace {

struct ServerState {
    std::mutex m;
    std::map<int, std::uint64_t> tokens; // registered devices
    std::map<int, std::uint64_t> hashes; // uploaded devices
    std::map<int, DeviceUpload> uploads;
    std::vector<ServerEvent> events;
    std::atomic<bool> finished{false};
    bool aborted = false;
    DonePayload done;
};

class Session {
  public:
    Session(const ServerConfig &cfg, ServerState &st, std::unique_ptr<Connection> conn)
        : mCfg(cfg), mState(st), mConn(std::move(conn)) {}

    void
    run() {
        try {
            while (true) {
                std::optional<WireMessage> msg;
                try {
                    msg = mConn->receive(mCfg.poll);
                } catch (const FormatError &e) {
                    reply(WireError::BadPayload, e.what());
                    continue; // the next receive throws if the stream cannot recover
                }
                if (msg) {
                    handle(*msg);
                    continue;
                }
                if (mState.finished) {
                    finish();
                    return;
                }
            }
        } catch (const TransportError &) {
        } catch (const FormatError &) {
        }
        mConn->close();
    }

  private:
    void
    reply(WireError code, const std::string &text) {
        mConn->send(WireMessage(MsgType::Error, encodeError({code, text})));
    }

    void
    record(std::uint16_t type, bool duplicate = false) {
        std::lock_guard lk(mState.m);
        mState.events.push_back({mDevice, type, duplicate});
    }

    const Region *
    regionFor(int device) const {
        for (const auto &r : mCfg.regions)
            if (r.device == device) return &r;
        return nullptr;
    }

    void
    handle(const WireMessage &msg) {
        // Devices may only introduce themselves and upload models; nothing else
        // (in particular no image payloads) is accepted.
        if (!msg.is(MsgType::Hello) && !msg.is(MsgType::ModelUpload)) {
            record(msg.type);
            reply(WireError::UnexpectedMessage,
                  std::string(isKnownMsgType(msg.type) ? "unexpected " : "unknown message type ") +
                      (isKnownMsgType(msg.type) ? msgTypeName(msg.type) : std::to_string(msg.type)));
            return;
        }
        if (msg.is(MsgType::Hello)) return hello(msg);
        upload(msg);
    }

    void
    hello(const WireMessage &msg) {
        HelloPayload h;
        try {
            h = decodeHello(msg.payload);
        } catch (const FormatError &e) {
            record(msg.type);
            return reply(WireError::BadPayload, e.what());
        }
        const Region *region = regionFor(h.device);
        if (!region) {
            record(msg.type);
            return reply(WireError::UnknownDevice, "no region for device " + std::to_string(h.device));
        }
        {
            std::lock_guard lk(mState.m);
            mState.events.push_back({h.device, msg.type, false});
            if (mDevice >= 0 && mDevice != h.device) {
                mConn->send(WireMessage(MsgType::Error, encodeError({WireError::UnexpectedMessage,
                                                                     "connection already bound to device " +
                                                                         std::to_string(mDevice)})));
                return;
            }
            const auto it = mState.tokens.find(h.device);
            if (it != mState.tokens.end() && it->second != h.token) {
                mConn->send(WireMessage(MsgType::Error, encodeError({WireError::DuplicateDevice,
                                                                     "device " + std::to_string(h.device) +
                                                                         " is already registered"})));
                return;
            }
            mState.tokens[h.device] = h.token;
        }
        mDevice = h.device;
        mConn->send(WireMessage(MsgType::RegionAssign,
                                encodeAssign({h.device, static_cast<int>(mCfg.regions.size()), *region})));
    }

    void
    upload(const WireMessage &msg) {
        if (mDevice < 0) {
            record(msg.type);
            return reply(WireError::NotRegistered, "MODEL_UPLOAD before HELLO");
        }
        const std::uint64_t hash = contentHash(msg.payload);
        {
            std::lock_guard lk(mState.m);
            const auto it = mState.hashes.find(mDevice);
            if (it != mState.hashes.end()) {
                const bool same = it->second == hash;
                mState.events.push_back({mDevice, msg.type, same});
                if (same) {
                    mConn->send(WireMessage(MsgType::Ack));
                } else {
                    mConn->send(WireMessage(MsgType::Error, encodeError({WireError::ConflictingUpload,
                                                                         "device already uploaded a different model"})));
                }
                return;
            }
        }
        UploadPayload up;
        try {
            up = decodeUpload(msg.payload);
        } catch (const FormatError &e) {
            record(msg.type);
            return reply(WireError::BadPayload, e.what());
        }
        {
            std::lock_guard lk(mState.m);
            mState.events.push_back({mDevice, msg.type, false});
            mState.hashes[mDevice]  = hash;
            mState.uploads[mDevice] = DeviceUpload{mDevice, std::move(up.model), std::move(up.cameras)};
        }
        mConn->send(WireMessage(MsgType::Ack));
    }

    void
    finish() {
        if (mDevice >= 0) {
            try {
                if (mState.aborted) {
                    reply(WireError::Aborted, "server aborted waiting for stragglers");
                } else {
                    mConn->send(WireMessage(MsgType::AggregateDone, encodeDone(mState.done)));
                }
            } catch (const TransportError &) {
            }
        }
        mConn->close();
    }

    const ServerConfig &mCfg;
    ServerState &mState;
    std::unique_ptr<Connection> mConn;
    int mDevice = -1;
};

} // namespace

ServerReport
runServer(const ServerConfig &cfg, Listener &listener) {
    if (cfg.regions.empty()) throw ContractError("server: no regions configured");
    for (std::size_t i = 0; i < cfg.regions.size(); ++i) {
        for (std::size_t j = i + 1; j < cfg.regions.size(); ++j) {
            if (cfg.regions[i].device == cfg.regions[j].device) throw ContractError("server: duplicate region device id");
        }
    }
    cfg.distill.validate();
    const std::size_t m = cfg.regions.size();
    ServerState st;
    std::vector<std::thread> sessions;
    const auto start = std::chrono::steady_clock::now();
    ServerReport rep;

    while (true) {
        {
            std::lock_guard lk(st.m);
            if (st.uploads.size() == m) break;
        }
        if (cfg.straggler_timeout.count() > 0 && std::chrono::steady_clock::now() - start > cfg.straggler_timeout) {
            std::lock_guard lk(st.m);
            std::ostringstream os;
            os << "aborted after " << cfg.straggler_timeout.count() << " ms with " << st.uploads.size() << "/" << m
               << " uploads; missing devices:";
            for (const auto &r : cfg.regions)
                if (!st.uploads.count(r.device)) os << ' ' << r.device;
            rep.aborted = true;
            rep.report  = os.str();
            st.aborted  = true;
            break;
        }
        if (auto conn = listener.accept(cfg.poll)) {
            sessions.emplace_back([&cfg, &st, c = std::move(conn)]() mutable { Session(cfg, st, std::move(c)).run(); });
        }
    }

    if (!rep.aborted) {
        std::vector<DeviceUpload> uploads;
        {
            std::lock_guard lk(st.m);
            for (auto &[id, u] : st.uploads) uploads.push_back(u);
        }
        rep.aggregate = aggregate(uploads, cfg.regions, cfg.distill);
        rep.model     = rep.aggregate.model;
        rep.uploads   = std::move(uploads);
        if (!cfg.output.empty()) saveModel(cfg.output, rep.model);
        st.done = {rep.model.size(), contentHash(encodeModel(rep.model))};
    }
    st.finished = true;
    for (auto &t : sessions) t.join();
    listener.close();
    std::lock_guard lk(st.m);
    rep.events = st.events;
    return rep;
}

} // namespace dgtr
