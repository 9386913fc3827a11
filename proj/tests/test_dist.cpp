// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dgtr/data.hpp>
#include <dgtr/dist.hpp>

#include <gtest/gtest.h>

#include <future>
#include <limits>
#include <random>
#include <thread>

using namespace dgtr;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

WireMessage
randomMessage(std::mt19937_64 &rng) {
    std::uniform_int_distribution<int> len(0, 300), byte(0, 255), type(0, 65535);
    WireMessage m;
    m.type = static_cast<std::uint16_t>(type(rng));
    m.payload.resize(len(rng));
    for (auto &b : m.payload) b = static_cast<std::uint8_t>(byte(rng));
    return m;
}

FormatErrorCode
decodeCode(const Bytes &b) {
    try {
        decodeFrame(b);
    } catch (const FormatError &e) {
        return e.code();
    }
    ADD_FAILURE() << "decode succeeded";
    return FormatErrorCode::Io;
}

GaussianModel
smallModel(int n, double x0, double x1, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(x0, x1), uy(-1, 1);
    GaussianModel m(1);
    for (int i = 0; i < n; ++i) {
        GaussianPrimitive g;
        g.position  = Vec3(ux(rng), uy(rng), 0.0);
        g.log_scale = Vec3::Constant(-2.0);
        g.setBaseColor(Vec3(0.5, 0.4, 0.3));
        m.add(quantizeModel([&] {
            GaussianModel one(1);
            one.add(g);
            return one;
        }())[0]);
    }
    return m;
}

Camera
smallCamera(int id) {
    Camera c;
    c.id = id;
    c.fx = c.fy = 20;
    c.cx = c.cy = 8;
    c.width = c.height = 16;
    c.translation      = Vec3(0, 0, -5);
    return c;
}

// Manual client: sends one frame and returns the reply.
WireMessage
roundTrip(Connection &c, const WireMessage &m) {
    c.send(m);
    auto r = c.receive(Millis(5000));
    if (!r) throw TransportError("no reply");
    return *r;
}

WireError
errorCode(const WireMessage &m) {
    EXPECT_TRUE(m.is(MsgType::Error)) << msgTypeName(m.type);
    return decodeError(m.payload).code;
}

} // namespace

TEST(Frame, AckHasNoPayload) {
    const Bytes f = encodeFrame(WireMessage(MsgType::Ack));
    ASSERT_EQ(f.size(), kFrameHeaderBytes + kFrameTrailerBytes);
    EXPECT_EQ(std::string(f.begin(), f.begin() + 4), "DGTR");
    EXPECT_EQ(f[4], 1);
    EXPECT_EQ(f[6], 4);
    for (int i = 8; i < 16; ++i) EXPECT_EQ(f[i], 0);
    EXPECT_EQ(decodeFrame(f), WireMessage(MsgType::Ack));
}

TEST(Frame, RandomRoundTrips) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 10000; ++i) {
        const auto m  = randomMessage(rng);
        const Bytes f = encodeFrame(m);
        std::size_t used = 0;
        ASSERT_EQ(decodeFrame(f, &used), m);
        ASSERT_EQ(used, f.size());
    }
}

TEST(Frame, DistinctErrorCodes) {
    const Bytes good = encodeFrame(WireMessage(MsgType::Hello, {1, 2, 3, 4}));
    Bytes b          = good;
    b[0]             = 'X';
    EXPECT_EQ(decodeCode(b), FormatErrorCode::BadMagic);
    b    = good;
    b[4] = 9;
    EXPECT_EQ(decodeCode(b), FormatErrorCode::BadVersion);
    b = good;
    b.pop_back();
    EXPECT_EQ(decodeCode(b), FormatErrorCode::Truncated);
    b = good;
    b[17] ^= 0x10;
    EXPECT_EQ(decodeCode(b), FormatErrorCode::BadChecksum);
    b     = good;
    b[15] = 0x7f;
    EXPECT_EQ(decodeCode(b), FormatErrorCode::TooLarge);
    EXPECT_EQ(decodeCode(Bytes{'D', 'G'}), FormatErrorCode::Truncated);
    EXPECT_EQ(decodeCode(Bytes{}), FormatErrorCode::Truncated);
}

TEST(Frame, FuzzedPrefixesOnlyRaiseFormatErrors) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> byte(0, 255), coin(0, 3);
    for (int i = 0; i < 20000; ++i) {
        Bytes b;
        if (coin(rng) == 0) {
            b.resize(std::uniform_int_distribution<int>(0, 64)(rng));
            for (auto &x : b) x = static_cast<std::uint8_t>(byte(rng));
        } else {
            b = encodeFrame(randomMessage(rng));
            for (int k = coin(rng); k > 0; --k) b[std::uniform_int_distribution<std::size_t>(0, b.size() - 1)(rng)] ^= 1 << (k * 2);
            b.resize(std::uniform_int_distribution<std::size_t>(0, b.size())(rng));
        }
        try {
            decodeFrame(b);
        } catch (const FormatError &) {
        }
    }
}

TEST(FrameReader, ByteByByteAndRecovery) {
    std::mt19937_64 rng(3);
    std::vector<WireMessage> sent;
    Bytes stream;
    for (int i = 0; i < 20; ++i) {
        sent.push_back(randomMessage(rng));
        const Bytes f = encodeFrame(sent.back());
        stream.insert(stream.end(), f.begin(), f.end());
    }
    FrameReader r;
    std::vector<WireMessage> got;
    for (std::uint8_t b : stream) {
        r.feed({&b, 1});
        while (auto m = r.next()) got.push_back(*m);
    }
    EXPECT_EQ(got, sent);
    EXPECT_EQ(r.buffered(), 0u);

    // A corrupted payload costs one frame; the next one still decodes.
    Bytes bad = encodeFrame(sent[0]);
    bad[kFrameHeaderBytes] ^= 1;
    if (sent[0].payload.empty()) bad.back() ^= 1;
    const Bytes ok = encodeFrame(sent[1]);
    r.feed(bad);
    r.feed(ok);
    EXPECT_THROW(r.next(), FormatError);
    EXPECT_EQ(r.next(), sent[1]);

    FrameReader junk;
    const Bytes garbage{'X', 'Y', 'Z', 'W', 1, 2, 3};
    junk.feed(garbage);
    EXPECT_THROW(junk.next(), FormatError);
    EXPECT_TRUE(junk.failed());
    EXPECT_THROW(junk.next(), FormatError);
}

TEST(Payload, RoundTripsAndRejectsTrailingBytes) {
    const HelloPayload h{7, 0x1122334455667788ull};
    const auto h2 = decodeHello(encodeHello(h));
    EXPECT_EQ(h2.device, 7);
    EXPECT_EQ(h2.token, h.token);

    const AssignPayload a{2, 4, Region{-kInf, 1.5, 0.25, kInf, 2}};
    const auto a2 = decodeAssign(encodeAssign(a));
    EXPECT_EQ(a2.devices, 4);
    EXPECT_EQ(a2.region.min_x, -kInf);
    EXPECT_EQ(a2.region.max_x, 1.5);
    EXPECT_EQ(a2.region.device, 2);

    const auto model = smallModel(5, 0, 1, 1);
    const std::vector<Camera> cams{smallCamera(3), smallCamera(4)};
    Bytes up         = encodeUpload(model, cams);
    const auto u     = decodeUpload(up);
    EXPECT_TRUE(u.model.identical(model));
    ASSERT_EQ(u.cameras.size(), 2u);
    EXPECT_EQ(u.cameras[1].id, 4);
    up.push_back(0);
    EXPECT_THROW(decodeUpload(up), FormatError);

    const auto e = decodeError(encodeError({WireError::DuplicateDevice, "dup"}));
    EXPECT_EQ(e.code, WireError::DuplicateDevice);
    EXPECT_EQ(e.message, "dup");
    const auto d = decodeDone(encodeDone({12, 34}));
    EXPECT_EQ(d.primitives, 12u);
    EXPECT_EQ(d.model_hash, 34u);
    Bytes hb = encodeHello(h);
    hb.pop_back();
    EXPECT_THROW(decodeHello(hb), FormatError);
}

TEST(Loopback, CarriesFramesAndReportsClose) {
    LoopbackNetwork net;
    EXPECT_THROW(net.connect(), TransportError);
    auto listener = net.listen();
    auto client   = net.connect();
    auto server   = listener->accept(Millis(100));
    ASSERT_TRUE(server);
    EXPECT_FALSE(listener->accept(Millis(1)));
    client->send(WireMessage(MsgType::Hello, {9}));
    EXPECT_EQ(server->receive(Millis(100)), WireMessage(MsgType::Hello, {9}));
    EXPECT_FALSE(server->receive(Millis(1)));
    server->send(WireMessage(MsgType::Ack));
    client->close();
    EXPECT_THROW(server->receive(Millis(100)), TransportError);
    EXPECT_THROW(server->send(WireMessage(MsgType::Ack)), TransportError);
}

TEST(Tcp, CarriesFrames) {
    TcpListener listener("127.0.0.1:0");
    ASSERT_GT(listener.port(), 0);
    const std::string addr = "127.0.0.1:" + std::to_string(listener.port());
    auto fut               = std::async(std::launch::async, [&] { return tcpConnect(addr); });
    auto server            = listener.accept(Millis(2000));
    auto client            = fut.get();
    ASSERT_TRUE(server);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
        const auto m = randomMessage(rng);
        client->send(m);
        ASSERT_EQ(server->receive(Millis(2000)), m);
        server->send(m);
        ASSERT_EQ(client->receive(Millis(2000)), m);
    }
    client->close();
    EXPECT_THROW(server->receive(Millis(2000)), TransportError);
    listener.close();
    EXPECT_THROW(tcpConnect(addr), TransportError);
    EXPECT_THROW(tcpConnect("nonsense"), ContractError);
}

// --- server protocol, driven by hand-written clients --------------------------

class ServerFixture : public ::testing::Test {
  protected:
    void
    start(int devices, Millis straggler = Millis(0)) {
        cfg.distill.epochs = 0;
        cfg.straggler_timeout = straggler;
        const double w     = 2.0 / devices;
        for (int d = 0; d < devices; ++d) {
            cfg.regions.push_back(Region{d == 0 ? -kInf : -1 + d * w, d + 1 == devices ? kInf : -1 + (d + 1) * w, -kInf,
                                         kInf, d});
        }
        listener = net.listen();
        server   = std::async(std::launch::async, [this] { return runServer(cfg, *listener); });
    }

    Bytes
    uploadFor(int d, std::uint64_t seed = 1) {
        const double w = 2.0 / static_cast<double>(cfg.regions.size());
        return encodeUpload(smallModel(20, -1.2 + d * w, -1 + (d + 1) * w + 0.2, seed + d), std::vector{smallCamera(d)});
    }

    ServerConfig cfg;
    LoopbackNetwork net;
    std::unique_ptr<Listener> listener;
    std::future<ServerReport> server;
};

TEST_F(ServerFixture, FullExchangeWithRetransmissionAndStrayMessages) {
    start(2);
    auto c0 = net.connect();
    auto c1 = net.connect();
    // Unknown and non-whitelisted types are answered with ERROR; the connection stays usable.
    EXPECT_EQ(errorCode(roundTrip(*c0, WireMessage(std::uint16_t(77), {1, 2}))), WireError::UnexpectedMessage);
    EXPECT_EQ(errorCode(roundTrip(*c0, WireMessage(MsgType::Ack))), WireError::UnexpectedMessage);
    EXPECT_EQ(errorCode(roundTrip(*c0, WireMessage(MsgType::ModelUpload, uploadFor(0)))), WireError::NotRegistered);
    EXPECT_EQ(errorCode(roundTrip(*c0, WireMessage(MsgType::Hello, {1}))), WireError::BadPayload);
    EXPECT_EQ(errorCode(roundTrip(*c0, WireMessage(MsgType::Hello, encodeHello({5, 1})))), WireError::UnknownDevice);

    auto r = roundTrip(*c0, WireMessage(MsgType::Hello, encodeHello({0, 100})));
    ASSERT_TRUE(r.is(MsgType::RegionAssign));
    EXPECT_EQ(decodeAssign(r.payload).devices, 2);
    EXPECT_EQ(decodeAssign(r.payload).region.max_x, 0.0);
    // Same id, other session: rejected.
    EXPECT_EQ(errorCode(roundTrip(*c1, WireMessage(MsgType::Hello, encodeHello({0, 200})))), WireError::DuplicateDevice);

    const Bytes up0 = uploadFor(0);
    EXPECT_TRUE(roundTrip(*c0, WireMessage(MsgType::ModelUpload, up0)).is(MsgType::Ack));
    EXPECT_TRUE(roundTrip(*c0, WireMessage(MsgType::ModelUpload, up0)).is(MsgType::Ack));
    EXPECT_EQ(errorCode(roundTrip(*c0, WireMessage(MsgType::ModelUpload, uploadFor(0, 9)))), WireError::ConflictingUpload);
    // A reconnect with the same session token gets the same region back.
    auto c0b = net.connect();
    EXPECT_TRUE(roundTrip(*c0b, WireMessage(MsgType::Hello, encodeHello({0, 100}))).is(MsgType::RegionAssign));
    EXPECT_TRUE(roundTrip(*c0b, WireMessage(MsgType::ModelUpload, up0)).is(MsgType::Ack));
    c0b->close();

    ASSERT_TRUE(roundTrip(*c1, WireMessage(MsgType::Hello, encodeHello({1, 300}))).is(MsgType::RegionAssign));
    EXPECT_TRUE(roundTrip(*c1, WireMessage(MsgType::ModelUpload, uploadFor(1))).is(MsgType::Ack));

    const auto rep = server.get();
    ASSERT_FALSE(rep.aborted);
    ASSERT_EQ(rep.uploads.size(), 2u);
    std::size_t filtered = 0;
    for (auto n : rep.aggregate.filtered_counts) filtered += n;
    EXPECT_EQ(rep.model.size(), filtered);
    EXPECT_LT(filtered, 40u); // the models overlap their neighbor's region
    for (auto *c : {c0.get(), c1.get()}) {
        const auto done = c->receive(Millis(5000));
        ASSERT_TRUE(done && done->is(MsgType::AggregateDone));
        EXPECT_EQ(decodeDone(done->payload).primitives, rep.model.size());
        EXPECT_EQ(decodeDone(done->payload).model_hash, contentHash(encodeModel(rep.model)));
    }
    int uploads = 0, duplicates = 0;
    for (const auto &e : rep.events) {
        if (e.type == static_cast<std::uint16_t>(MsgType::ModelUpload) && e.device >= 0) {
            ++uploads;
            duplicates += e.duplicate;
        }
    }
    EXPECT_EQ(uploads, 5); // 2 accepted, 2 retransmissions, 1 conflict
    EXPECT_EQ(duplicates, 2);
}

TEST_F(ServerFixture, StragglerTimeoutAbortsWithReport) {
    start(2, Millis(300));
    auto c0 = net.connect();
    ASSERT_TRUE(roundTrip(*c0, WireMessage(MsgType::Hello, encodeHello({0, 1}))).is(MsgType::RegionAssign));
    ASSERT_TRUE(roundTrip(*c0, WireMessage(MsgType::ModelUpload, uploadFor(0))).is(MsgType::Ack));
    const auto rep = server.get();
    EXPECT_TRUE(rep.aborted);
    EXPECT_NE(rep.report.find("1/2"), std::string::npos);
    EXPECT_NE(rep.report.find("missing devices: 1"), std::string::npos);
    const auto msg = c0->receive(Millis(2000));
    ASSERT_TRUE(msg);
    EXPECT_EQ(errorCode(*msg), WireError::Aborted);
}

TEST(Server, RejectsBadConfig) {
    LoopbackNetwork net;
    auto l = net.listen();
    ServerConfig cfg;
    EXPECT_THROW(runServer(cfg, *l), ContractError);
    cfg.regions = {Region{-kInf, kInf, -kInf, kInf, 0}, Region{-kInf, kInf, -kInf, kInf, 0}};
    EXPECT_THROW(runServer(cfg, *l), ContractError);
}

// --- device worker --------------------------------------------------------------

namespace {

struct Fleet {
    SyntheticScene scene;
    std::vector<Region> regions;
};

Fleet
tinyFleet(int devices) {
    SynthParams p;
    p.n_gaussians = 512;
    p.width       = 24;
    p.height      = 16;
    Fleet f{synthScene(8, p), {}};
    f.regions = partitionScene(f.scene.cameras, devices);
    return f;
}

DeviceConfig
deviceConfig(const Fleet &f, int device) {
    DeviceConfig cfg;
    cfg.device = device;
    for (std::size_t i = 0; i < f.scene.cameras.size(); ++i) {
        if (regionOf(f.scene.cameras[i].translation, f.regions) != device) continue;
        cfg.dataset.cameras.push_back(f.scene.cameras[i]);
        cfg.dataset.images.push_back(f.scene.images[i]);
        cfg.dataset.depths.push_back(estimateDepth(f.scene.depths[i], i));
    }
    SyntheticPredictorParams pp;
    pp.extent         = f.scene.extent();
    cfg.predictor     = std::make_shared<SyntheticPredictor>(f.scene.gt, cfg.dataset.cameras, cfg.dataset.images, pp);
    cfg.init.align.steps = 20;
    cfg.train.steps      = 20;
    cfg.await_done       = true;
    return cfg;
}

} // namespace

TEST(Device, UnreachableServerFailsAfterRetries) {
    LoopbackNetwork net;
    DeviceConfig cfg;
    cfg.backoff   = Millis(1);
    const auto r  = runDevice(cfg, net.connector());
    EXPECT_EQ(r.exit_code, 4);
    EXPECT_EQ(r.attempts, 4);
    EXPECT_FALSE(r.error.empty());
}

TEST(Device, SingleDeviceLoopback) {
    const auto f = tinyFleet(1);
    LoopbackNetwork net;
    auto listener = net.listen();
    ServerConfig scfg;
    scfg.regions        = f.regions;
    scfg.distill.epochs = 1;
    auto server         = std::async(std::launch::async, [&] { return runServer(scfg, *listener); });
    const auto dev      = runDevice(deviceConfig(f, 0), net.connector());
    const auto rep      = server.get();
    ASSERT_EQ(dev.exit_code, 0) << dev.error;
    EXPECT_EQ(dev.attempts, 1);
    ASSERT_TRUE(dev.done);
    EXPECT_EQ(dev.done->primitives, rep.model.size());
    int uploads = 0;
    for (const auto &e : rep.events) uploads += e.type == static_cast<std::uint16_t>(MsgType::ModelUpload);
    EXPECT_EQ(uploads, 1);
    ASSERT_EQ(rep.uploads.size(), 1u);
    EXPECT_TRUE(rep.uploads[0].model.identical(quantizeModel(dev.model)));
    // The only message types the server ever saw.
    for (const auto &e : rep.events) {
        EXPECT_TRUE(e.type == static_cast<std::uint16_t>(MsgType::Hello) ||
                    e.type == static_cast<std::uint16_t>(MsgType::ModelUpload));
    }
}

TEST(Device, DuplicateIdIsAContractFailure) {
    const auto f = tinyFleet(2);
    LoopbackNetwork net;
    auto listener = net.listen();
    ServerConfig scfg;
    scfg.regions           = f.regions;
    scfg.distill.epochs    = 0;
    scfg.straggler_timeout = Millis(3000);
    auto server = std::async(std::launch::async, [&] { return runServer(scfg, *listener); });
    auto squatter = net.connect();
    ASSERT_TRUE(roundTrip(*squatter, WireMessage(MsgType::Hello, encodeHello({1, 42}))).is(MsgType::RegionAssign));
    auto cfg       = deviceConfig(f, 1);
    const auto dev = runDevice(cfg, net.connector());
    EXPECT_EQ(dev.exit_code, 3);
    EXPECT_NE(dev.error.find("already registered"), std::string::npos);
    EXPECT_TRUE(server.get().aborted);
}

TEST(Device, FourDevicesOverTcp) {
    const auto f = tinyFleet(4);
    TcpListener listener("127.0.0.1:0");
    const std::string addr = "127.0.0.1:" + std::to_string(listener.port());
    ServerConfig scfg;
    scfg.regions        = f.regions;
    scfg.distill.epochs = 0;
    auto server         = std::async(std::launch::async, [&] { return runServer(scfg, listener); });
    std::vector<std::future<DeviceReport>> devices;
    for (int d = 0; d < 4; ++d) {
        devices.push_back(std::async(std::launch::async, [&, d] {
            return runDevice(deviceConfig(f, d), [&] { return tcpConnect(addr); });
        }));
    }
    for (int d = 0; d < 4; ++d) {
        const auto r = devices[d].get();
        ASSERT_EQ(r.exit_code, 0) << r.error;
        EXPECT_EQ(r.region.device, d);
        // Device models live mostly in their own region before filtering.
        std::size_t inside = 0;
        for (const auto &g : r.model.primitives()) inside += regionOf(g.position, f.regions) == d;
        EXPECT_GT(static_cast<double>(inside) / r.model.size(), 0.5);
    }
    const auto rep = server.get();
    ASSERT_FALSE(rep.aborted);
    EXPECT_EQ(rep.uploads.size(), 4u);
    std::size_t filtered = 0;
    for (auto n : rep.aggregate.filtered_counts) filtered += n;
    EXPECT_EQ(rep.model.size(), filtered);
}
