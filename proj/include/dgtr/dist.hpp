// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Distributed harness: wire framing, transports (in-process loopback and TCP),
// the device worker and the central server.
//
// Frame layout, little-endian:
//   "DGTR" | version u16 | msg_type u16 | payload_len u64 | payload | crc32(payload) u32
//
#pragma once

#include <dgtr/aggregate.hpp>
#include <dgtr/core.hpp>
#include <dgtr/data.hpp>
#include <dgtr/init.hpp>
#include <dgtr/train.hpp>

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dgtr {

enum class MsgType : std::uint16_t {
    Hello         = 1,
    RegionAssign  = 2,
    ModelUpload   = 3,
    Ack           = 4,
    AggregateDone = 5,
    Error         = 6,
};

const char *msgTypeName(std::uint16_t type);
bool isKnownMsgType(std::uint16_t type);

inline constexpr std::uint16_t kProtocolVersion  = 1;
inline constexpr std::size_t kFrameHeaderBytes   = 16;
inline constexpr std::size_t kFrameTrailerBytes  = 4;
inline constexpr std::uint64_t kMaxPayloadBytes  = 256ull << 20;

// msg_type is kept raw so frames with unknown types still decode; the server
// answers them with ERROR.
struct WireMessage {
    std::uint16_t type = 0;
    Bytes payload;

    WireMessage() = default;
    WireMessage(MsgType t, Bytes p = {}) : type(static_cast<std::uint16_t>(t)), payload(std::move(p)) {}
    WireMessage(std::uint16_t t, Bytes p) : type(t), payload(std::move(p)) {}

    bool is(MsgType t) const { return type == static_cast<std::uint16_t>(t); }
    bool operator==(const WireMessage &) const = default;
};

Bytes encodeFrame(const WireMessage &msg);

// Decodes one frame from the front of bytes. Throws FormatError with BadMagic,
// BadVersion, TooLarge, Truncated or BadChecksum.
WireMessage decodeFrame(std::span<const std::uint8_t> bytes, std::size_t *consumed = nullptr);

// Incremental decoder for byte streams. next() returns nullopt until a full frame
// is buffered. BadChecksum and BadVersion consume the offending frame, so the
// stream stays usable; BadMagic and TooLarge leave the reader failed.
class FrameReader {
  public:
    void feed(std::span<const std::uint8_t> bytes);
    std::optional<WireMessage> next();
    bool failed() const { return mFailed; }
    std::size_t buffered() const { return mBuf.size() - mPos; }

  private:
    Bytes mBuf;
    std::size_t mPos = 0;
    bool mFailed     = false;
};

// --- payloads ---------------------------------------------------------------

struct HelloPayload {
    int device          = 0;
    std::uint64_t token = 0; // per-run session token; a reconnect repeats it
};

struct AssignPayload {
    int device  = 0;
    int devices = 0;
    Region region;
};

struct UploadPayload {
    GaussianModel model{1};
    std::vector<Camera> cameras;
};

enum class WireError : std::uint16_t {
    DuplicateDevice   = 1,
    UnknownDevice     = 2,
    UnexpectedMessage = 3,
    BadPayload        = 4,
    ConflictingUpload = 5,
    NotRegistered     = 6,
    Aborted           = 7,
};

struct ErrorPayload {
    WireError code = WireError::BadPayload;
    std::string message;
};

struct DonePayload {
    std::uint64_t primitives = 0;
    std::uint64_t model_hash = 0;
};

Bytes encodeHello(const HelloPayload &p);
HelloPayload decodeHello(std::span<const std::uint8_t> b);
Bytes encodeAssign(const AssignPayload &p);
AssignPayload decodeAssign(std::span<const std::uint8_t> b);
Bytes encodeUpload(const GaussianModel &model, std::span<const Camera> cameras);
UploadPayload decodeUpload(std::span<const std::uint8_t> b);
Bytes encodeError(const ErrorPayload &p);
ErrorPayload decodeError(std::span<const std::uint8_t> b);
Bytes encodeDone(const DonePayload &p);
DonePayload decodeDone(std::span<const std::uint8_t> b);

// 64-bit content hash used for upload idempotence.
std::uint64_t contentHash(std::span<const std::uint8_t> bytes);

// --- transports -------------------------------------------------------------

using Millis = std::chrono::milliseconds;

class Connection {
  public:
    virtual ~Connection() = default;
    // Throws TransportError when the peer is gone.
    virtual void send(const WireMessage &msg) = 0;
    // nullopt on timeout. Throws TransportError on close, FormatError on a bad frame.
    virtual std::optional<WireMessage> receive(Millis timeout) = 0;
    virtual void close() = 0;
};

class Listener {
  public:
    virtual ~Listener() = default;
    virtual std::unique_ptr<Connection> accept(Millis timeout) = 0;
    virtual void close() = 0;
};

using Connector = std::function<std::unique_ptr<Connection>()>;

// In-process transport. Connections carry encoded frame bytes, exactly as TCP does.
class LoopbackNetwork {
  public:
    LoopbackNetwork();
    ~LoopbackNetwork();
    LoopbackNetwork(const LoopbackNetwork &)            = delete;
    LoopbackNetwork &operator=(const LoopbackNetwork &) = delete;

    std::unique_ptr<Listener> listen();
    // Throws TransportError when nobody listens.
    std::unique_ptr<Connection> connect();
    Connector connector();

    struct State;

  private:
    std::shared_ptr<State> mState;
};

// "host:port"; port 0 picks an ephemeral port, reported by port().
class TcpListener : public Listener {
  public:
    explicit TcpListener(const std::string &address);
    ~TcpListener() override;
    std::unique_ptr<Connection> accept(Millis timeout) override;
    void close() override;
    int port() const { return mPort; }

  private:
    int mFd   = -1;
    int mPort = 0;
};

std::unique_ptr<Connection> tcpConnect(const std::string &address);

// --- device and server ------------------------------------------------------

struct DeviceConfig {
    int device          = 0;
    std::uint64_t token = 0; // 0 = derived from device id and seed
    DeviceDataset dataset;
    std::shared_ptr<Predictor> predictor;
    InitConfig init;
    TrainConfig train;
    int retries          = 3;
    Millis backoff       = Millis(50); // doubled after each failed attempt
    Millis reply_timeout = Millis(30000);
    bool await_done      = false; // wait for AGGREGATE_DONE after the ACK
    Millis done_timeout  = Millis(600000);
};

struct DeviceReport {
    int exit_code = 0; // 0 ok, 3 contract (server ERROR), 4 transport
    int attempts  = 0; // connection attempts made
    Region region;
    GaussianModel model{1};
    std::optional<DonePayload> done;
    std::string error;
};

// HELLO -> REGION_ASSIGN -> init -> train -> MODEL_UPLOAD -> ACK. Transport
// failures are retried with exponential backoff; the trained model is kept, so a
// retry re-sends the same bytes.
DeviceReport runDevice(const DeviceConfig &cfg, const Connector &connect);

struct ServerConfig {
    std::vector<Region> regions; // one per device; region.device is the device id
    DistillConfig distill;
    std::filesystem::path output; // global model path; empty = not written
    Millis straggler_timeout = Millis(0); // 0 = wait forever
    Millis poll              = Millis(20);
};

struct ServerEvent {
    int device = -1; // -1 before HELLO
    std::uint16_t type = 0;
    bool duplicate     = false; // retransmitted upload acknowledged without counting
};

struct ServerReport {
    bool aborted = false;
    std::string report; // partial-state summary when aborted
    GaussianModel model{1};
    AggregateResult aggregate;
    std::vector<DeviceUpload> uploads; // in device-id order
    std::vector<ServerEvent> events;   // received messages in processing order
};

// Serves until all devices have uploaded, aggregates, writes the global model and
// sends AGGREGATE_DONE on every connection that is still open.
ServerReport runServer(const ServerConfig &cfg, Listener &listener);

} // namespace dgtr
