// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/data.hpp>
#include <dgtr/raster.hpp>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace dgtr {

static_assert(std::endian::native == std::endian::little, "formats assume a little-endian host");

namespace fs = std::filesystem;

std::uint32_t
crc32(std::span<const std::uint8_t> bytes) {
    uLong c = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        c                   = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(c);
}

void
ByteReader::need(std::size_t n) const {
    if (n > mBytes.size() - mPos) {
        throw FormatError(FormatErrorCode::Truncated, "unexpected end of data");
    }
}

void
ByteReader::expectMagic(const char (&m)[5], const char *what) {
    need(4);
    if (std::memcmp(mBytes.data() + mPos, m, 4) != 0) {
        throw FormatError(FormatErrorCode::BadMagic, std::string(what) + ": bad magic");
    }
    mPos += 4;
}

std::span<const std::uint8_t>
ByteReader::getBytes(std::size_t n) {
    need(n);
    auto s = mBytes.subspan(mPos, n);
    mPos += n;
    return s;
}

void
ByteReader::expectCrc(const char *what) {
    const std::uint32_t computed = crc32(mBytes.first(mPos));
    const auto stored            = get<std::uint32_t>();
    if (stored != computed) {
        throw FormatError(FormatErrorCode::BadChecksum, std::string(what) + ": checksum mismatch");
    }
}

Bytes
readFileBytes(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(FormatErrorCode::Io, "cannot open " + path.string());
    }
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void
writeFileBytes(const fs::path &path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError(FormatErrorCode::Io, "cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError(FormatErrorCode::Io, "short write to " + path.string());
    }
}

namespace {

void
putF(ByteWriter &w, double v) {
    w.put<float>(static_cast<float>(v));
}

double
getF(ByteReader &r) {
    return static_cast<double>(r.get<float>());
}

void
putPrimitiveAttributes(ByteWriter &w, const GaussianPrimitive &g) {
    for (int a = 0; a < 4; ++a) putF(w, g.rotation[a]);
    for (int a = 0; a < 3; ++a) putF(w, g.log_scale[a]);
    putF(w, g.opacity_logit);
}

void
getPrimitiveAttributes(ByteReader &r, GaussianPrimitive &g) {
    for (int a = 0; a < 4; ++a) g.rotation[a] = getF(r);
    for (int a = 0; a < 3; ++a) g.log_scale[a] = getF(r);
    g.opacity_logit = getF(r);
}

void
putSh(ByteWriter &w, const GaussianPrimitive &g, int k) {
    for (int c = 0; c < k; ++c)
        for (int ch = 0; ch < 3; ++ch) putF(w, g.sh[c][ch]);
}

void
getSh(ByteReader &r, GaussianPrimitive &g, int k) {
    for (int c = 0; c < k; ++c)
        for (int ch = 0; ch < 3; ++ch) g.sh[c][ch] = getF(r);
}

int
checkedShDegree(std::uint8_t d, const char *what) {
    if (d > kMaxShDegree) {
        throw FormatError(FormatErrorCode::Malformed, std::string(what) + ": sh degree out of range");
    }
    return d;
}

} // namespace

Bytes
encodeModel(const GaussianModel &model) {
    const int k = shCoeffCount(model.shDegree());
    ByteWriter w;
    w.bytes().reserve(17 + model.size() * 4 * (12 + 3 * k) + 4);
    w.putMagic("DGS1");
    w.put<std::uint8_t>(static_cast<std::uint8_t>(model.shDegree()));
    w.put<std::uint64_t>(model.size());
    for (const auto &g : model.primitives()) {
        for (int a = 0; a < 3; ++a) putF(w, g.position[a]);
        putPrimitiveAttributes(w, g);
        putF(w, g.confidence);
        putSh(w, g, k);
    }
    w.putCrc();
    return w.take();
}

GaussianModel
decodeModel(std::span<const std::uint8_t> bytes, std::size_t *consumed) {
    ByteReader r(bytes);
    r.expectMagic("DGS1", "model");
    const int degree    = checkedShDegree(r.get<std::uint8_t>(), "model");
    const auto count    = r.get<std::uint64_t>();
    const int k         = shCoeffCount(degree);
    const std::size_t rec = 4 * (12 + 3 * static_cast<std::size_t>(k));
    if (count > r.remaining() / rec) {
        throw FormatError(FormatErrorCode::Truncated, "model: body shorter than primitive count");
    }
    GaussianModel model(degree);
    model.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        GaussianPrimitive g;
        for (int a = 0; a < 3; ++a) g.position[a] = getF(r);
        getPrimitiveAttributes(r, g);
        g.confidence = getF(r);
        getSh(r, g, k);
        model.add(g);
    }
    r.expectCrc("model");
    if (consumed) {
        *consumed = r.position();
    } else if (r.remaining() != 0) {
        throw FormatError(FormatErrorCode::Malformed, "model: trailing bytes");
    }
    return model;
}

void
saveModel(const fs::path &path, const GaussianModel &model) {
    writeFileBytes(path, encodeModel(model));
}

GaussianModel
loadModel(const fs::path &path) {
    return decodeModel(readFileBytes(path));
}

GaussianModel
quantizeModel(GaussianModel model) {
    auto q = [](double &v) { v = static_cast<double>(static_cast<float>(v)); };
    const int k = shCoeffCount(model.shDegree());
    for (auto &g : model.primitives()) {
        for (int a = 0; a < 3; ++a) q(g.position[a]);
        for (int a = 0; a < 4; ++a) q(g.rotation[a]);
        for (int a = 0; a < 3; ++a) q(g.log_scale[a]);
        q(g.opacity_logit);
        q(g.confidence);
        for (int c = 0; c < kMaxShCoeffs; ++c) {
            for (int ch = 0; ch < 3; ++ch) {
                if (c < k) {
                    q(g.sh[c][ch]);
                } else {
                    g.sh[c][ch] = 0.0;
                }
            }
        }
    }
    return model;
}

Bytes
encodeCameras(std::span<const Camera> cams) {
    ByteWriter w;
    w.putMagic("DGC1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cams.size()));
    for (const auto &c : cams) {
        w.put<std::int32_t>(c.id);
        w.put(c.fx);
        w.put(c.fy);
        w.put(c.cx);
        w.put(c.cy);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(c.width));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(c.height));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) w.put(c.rotation(i, j));
        for (int i = 0; i < 3; ++i) w.put(c.translation[i]);
        w.put(c.near);
        w.put(c.far);
    }
    w.putCrc();
    return w.take();
}

std::vector<Camera>
decodeCameras(std::span<const std::uint8_t> bytes, std::size_t *consumed) {
    ByteReader r(bytes);
    r.expectMagic("DGC1", "camera list");
    const auto count = r.get<std::uint32_t>();
    constexpr std::size_t kRec = 4 + 8 * 4 + 4 * 2 + 8 * 9 + 8 * 3 + 8 * 2;
    if (count > r.remaining() / kRec) {
        throw FormatError(FormatErrorCode::Truncated, "camera list: body shorter than count");
    }
    std::vector<Camera> cams(count);
    for (auto &c : cams) {
        c.id     = r.get<std::int32_t>();
        c.fx     = r.get<double>();
        c.fy     = r.get<double>();
        c.cx     = r.get<double>();
        c.cy     = r.get<double>();
        c.width  = static_cast<int>(r.get<std::uint32_t>());
        c.height = static_cast<int>(r.get<std::uint32_t>());
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) c.rotation(i, j) = r.get<double>();
        for (int i = 0; i < 3; ++i) c.translation[i] = r.get<double>();
        c.near = r.get<double>();
        c.far  = r.get<double>();
    }
    r.expectCrc("camera list");
    if (consumed) {
        *consumed = r.position();
    } else if (r.remaining() != 0) {
        throw FormatError(FormatErrorCode::Malformed, "camera list: trailing bytes");
    }
    return cams;
}

void
PairPrediction::validate() const {
    const std::size_t n = pixelCount();
    if (width <= 0 || height <= 0) {
        throw FormatError(FormatErrorCode::ShapeMismatch, "pair prediction: empty pointmap");
    }
    for (int v = 0; v < 2; ++v) {
        if (points[v].size() != n || confidence[v].size() != n) {
            throw FormatError(FormatErrorCode::ShapeMismatch, "pair prediction: pointmap size mismatch");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (!points[v][i].allFinite() || !std::isfinite(confidence[v][i]) || confidence[v][i] < 0) {
                throw NumericError("pair prediction: non-finite point or invalid confidence");
            }
        }
    }
    if (gaussians.size() != 2 * n) {
        throw FormatError(FormatErrorCode::ShapeMismatch, "pair prediction: expected 2*H*W Gaussians");
    }
}

Bytes
encodePairPrediction(const PairPrediction &pred) {
    pred.validate();
    const int k         = shCoeffCount(pred.gaussians.shDegree());
    const std::size_t n = pred.pixelCount();
    ByteWriter w;
    w.bytes().reserve(21 + 2 * n * 4 * (12 + 3 * k) + 4);
    w.putMagic("DGP1");
    w.put<std::int32_t>(pred.p);
    w.put<std::int32_t>(pred.q);
    w.put<std::int32_t>(pred.width);
    w.put<std::int32_t>(pred.height);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(pred.gaussians.shDegree()));
    for (int v = 0; v < 2; ++v) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto &g = pred.gaussians[v * n + i];
            for (int a = 0; a < 3; ++a) putF(w, pred.points[v][i][a]);
            putF(w, pred.confidence[v][i]);
            putPrimitiveAttributes(w, g);
            putSh(w, g, k);
        }
    }
    w.putCrc();
    return w.take();
}

PairPrediction
decodePairPrediction(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expectMagic("DGP1", "pair prediction");
    PairPrediction pred;
    pred.p            = r.get<std::int32_t>();
    pred.q            = r.get<std::int32_t>();
    pred.width        = r.get<std::int32_t>();
    pred.height       = r.get<std::int32_t>();
    const int degree  = checkedShDegree(r.get<std::uint8_t>(), "pair prediction");
    if (pred.width <= 0 || pred.height <= 0) {
        throw FormatError(FormatErrorCode::ShapeMismatch, "pair prediction: non-positive dimensions");
    }
    const int k           = shCoeffCount(degree);
    const std::size_t n   = pred.pixelCount();
    const std::size_t rec = 4 * (12 + 3 * static_cast<std::size_t>(k));
    if (2 * n > r.remaining() / rec) {
        throw FormatError(FormatErrorCode::Truncated, "pair prediction: body shorter than 2*H*W records");
    }
    pred.gaussians = GaussianModel(degree);
    pred.gaussians.reserve(2 * n);
    for (int v = 0; v < 2; ++v) {
        pred.points[v].resize(n);
        pred.confidence[v].resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            GaussianPrimitive g;
            for (int a = 0; a < 3; ++a) pred.points[v][i][a] = getF(r);
            pred.confidence[v][i] = getF(r);
            g.position            = pred.points[v][i];
            g.confidence          = pred.confidence[v][i];
            getPrimitiveAttributes(r, g);
            getSh(r, g, k);
            pred.gaussians.add(g);
        }
    }
    r.expectCrc("pair prediction");
    if (r.remaining() != 0) {
        throw FormatError(FormatErrorCode::Malformed, "pair prediction: trailing bytes");
    }
    pred.validate();
    return pred;
}

void
savePairPrediction(const fs::path &path, const PairPrediction &pred) {
    writeFileBytes(path, encodePairPrediction(pred));
}

PairPrediction
loadPairPrediction(const fs::path &path) {
    return decodePairPrediction(readFileBytes(path));
}

// ---------------------------------------------------------------------------
// PPM / PFM

namespace {

// Reads whitespace-separated header tokens; '#' comments are allowed in PPM headers.
struct HeaderParser {
    const Bytes &b;
    std::size_t pos = 0;

    std::string
    token() {
        for (;;) {
            while (pos < b.size() && std::isspace(b[pos])) ++pos;
            if (pos < b.size() && b[pos] == '#') {
                while (pos < b.size() && b[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::string t;
        while (pos < b.size() && !std::isspace(b[pos])) t.push_back(static_cast<char>(b[pos++]));
        if (t.empty()) throw FormatError(FormatErrorCode::Truncated, "image header truncated");
        return t;
    }

    long
    integer() {
        const std::string t = token();
        char *end           = nullptr;
        const long v        = std::strtol(t.c_str(), &end, 10);
        if (*end != '\0' || v <= 0 || v > (1 << 16)) {
            throw FormatError(FormatErrorCode::Malformed, "bad image dimension '" + t + "'");
        }
        return v;
    }

    // Exactly one whitespace byte separates the header from the raster.
    void
    endHeader() {
        if (pos >= b.size() || !std::isspace(b[pos])) {
            throw FormatError(FormatErrorCode::Malformed, "image header not terminated");
        }
        ++pos;
    }
};

template <int C>
void
savePfm(const fs::path &path, const Plane<C> &p) {
    static_assert(C == 1 || C == 3);
    std::ostringstream hdr;
    hdr << (C == 3 ? "PF" : "Pf") << "\n" << p.width << " " << p.height << "\n-1.0\n";
    const std::string h = hdr.str();
    ByteWriter w;
    w.bytes().assign(h.begin(), h.end());
    for (int row = p.height - 1; row >= 0; --row)
        for (int col = 0; col < p.width; ++col)
            for (int ch = 0; ch < C; ++ch) w.put<float>(static_cast<float>(p.at(row, col, ch)));
    writeFileBytes(path, w.bytes());
}

template <int C>
Plane<C>
loadPfm(const fs::path &path) {
    const Bytes b = readFileBytes(path);
    HeaderParser hp{b};
    const std::string magic = hp.token();
    if (magic != (C == 3 ? "PF" : "Pf")) {
        throw FormatError(FormatErrorCode::BadMagic, path.string() + ": not a " + (C == 3 ? "color" : "grey") +
                                                         " PFM file");
    }
    const int w = static_cast<int>(hp.integer());
    const int h = static_cast<int>(hp.integer());
    const std::string scaleTok = hp.token();
    char *end          = nullptr;
    const double scale = std::strtod(scaleTok.c_str(), &end);
    if (*end != '\0' || scale == 0.0 || !std::isfinite(scale)) {
        throw FormatError(FormatErrorCode::Malformed, path.string() + ": bad PFM scale");
    }
    hp.endHeader();
    const bool little    = scale < 0;
    const std::size_t n  = static_cast<std::size_t>(w) * h * C;
    if (b.size() - hp.pos < n * 4) {
        throw FormatError(FormatErrorCode::Truncated, path.string() + ": PFM raster truncated");
    }
    if (b.size() - hp.pos > n * 4) {
        throw FormatError(FormatErrorCode::Malformed, path.string() + ": trailing bytes after PFM raster");
    }
    Plane<C> p(w, h);
    ByteReader r(std::span<const std::uint8_t>(b).subspan(hp.pos));
    for (int row = h - 1; row >= 0; --row) {
        for (int col = 0; col < w; ++col) {
            for (int ch = 0; ch < C; ++ch) {
                auto raw = r.get<std::uint32_t>();
                if (!little) raw = __builtin_bswap32(raw);
                p.at(row, col, ch) = static_cast<double>(std::bit_cast<float>(raw));
            }
        }
    }
    return p;
}

} // namespace

void
saveImagePpm(const fs::path &path, const ImageBuffer &img) {
    std::ostringstream hdr;
    hdr << "P6\n" << img.width << " " << img.height << "\n255\n";
    const std::string h = hdr.str();
    Bytes b(h.begin(), h.end());
    b.reserve(b.size() + img.data.size());
    for (double v : img.data) {
        const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
        b.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0)));
    }
    writeFileBytes(path, b);
}

ImageBuffer
loadImagePpm(const fs::path &path) {
    const Bytes b = readFileBytes(path);
    HeaderParser hp{b};
    if (hp.token() != "P6") {
        throw FormatError(FormatErrorCode::BadMagic, path.string() + ": not a binary PPM file");
    }
    const int w      = static_cast<int>(hp.integer());
    const int h      = static_cast<int>(hp.integer());
    const long maxv  = hp.integer();
    if (maxv != 255) {
        throw FormatError(FormatErrorCode::Malformed, path.string() + ": only 8-bit PPM is supported");
    }
    hp.endHeader();
    const std::size_t n = static_cast<std::size_t>(w) * h * 3;
    if (b.size() - hp.pos < n) {
        throw FormatError(FormatErrorCode::Truncated, path.string() + ": PPM raster truncated");
    }
    ImageBuffer img(w, h);
    for (std::size_t i = 0; i < n; ++i) img.data[i] = b[hp.pos + i] / 255.0;
    return img;
}

void
saveImagePfm(const fs::path &path, const ImageBuffer &img) {
    savePfm(path, img);
}

ImageBuffer
loadImagePfm(const fs::path &path) {
    return loadPfm<3>(path);
}

void
saveDepthPfm(const fs::path &path, const DepthMap &depth) {
    savePfm(path, depth);
}

DepthMap
loadDepthPfm(const fs::path &path) {
    return loadPfm<1>(path);
}

// ---------------------------------------------------------------------------
// Text formats

namespace {

std::vector<std::string>
dataLines(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrorCode::Io, "cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        lines.push_back(line);
    }
    return lines;
}

std::vector<double>
numbers(const std::string &line, std::size_t expected, const fs::path &path) {
    std::istringstream ss(line);
    std::vector<double> v;
    std::string tok;
    while (ss >> tok) {
        char *end      = nullptr;
        const double d = std::strtod(tok.c_str(), &end);
        if (*end != '\0') {
            throw FormatError(FormatErrorCode::Malformed, path.string() + ": bad number '" + tok + "'");
        }
        v.push_back(d);
    }
    if (v.size() != expected) {
        throw FormatError(FormatErrorCode::ShapeMismatch, path.string() + ": expected " +
                                                              std::to_string(expected) + " fields, got " +
                                                              std::to_string(v.size()));
    }
    return v;
}

void
writeText(const fs::path &path, const std::string &text) {
    writeFileBytes(path, std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

} // namespace

void
writeCamerasTxt(const fs::path &path, std::span<const Camera> cams) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "# id fx fy cx cy W H r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 near far\n";
    for (const auto &c : cams) {
        os << c.id << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.width << ' '
           << c.height;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) os << ' ' << c.rotation(i, j);
            os << ' ' << c.translation[i];
        }
        os << ' ' << c.near << ' ' << c.far << '\n';
    }
    writeText(path, os.str());
}

std::vector<Camera>
readCamerasTxt(const fs::path &path) {
    std::vector<Camera> cams;
    for (const auto &line : dataLines(path)) {
        const auto v = numbers(line, 21, path);
        Camera c;
        c.id     = static_cast<int>(v[0]);
        c.fx     = v[1];
        c.fy     = v[2];
        c.cx     = v[3];
        c.cy     = v[4];
        c.width  = static_cast<int>(v[5]);
        c.height = static_cast<int>(v[6]);
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) c.rotation(i, j) = v[7 + 4 * i + j];
            c.translation[i] = v[7 + 4 * i + 3];
        }
        c.near = v[19];
        c.far  = v[20];
        c.validate();
        cams.push_back(c);
    }
    return cams;
}

void
writeRegionsTxt(const fs::path &path, std::span<const Region> regions) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "# device min_x max_x min_y max_y\n";
    for (const auto &r : regions) {
        os << r.device << ' ' << r.min_x << ' ' << r.max_x << ' ' << r.min_y << ' ' << r.max_y << '\n';
    }
    writeText(path, os.str());
}

std::vector<Region>
readRegionsTxt(const fs::path &path) {
    std::vector<Region> regions;
    for (const auto &line : dataLines(path)) {
        const auto v = numbers(line, 5, path);
        Region r{v[1], v[2], v[3], v[4], static_cast<int>(v[0])};
        r.validate();
        regions.push_back(r);
    }
    return regions;
}

// ---------------------------------------------------------------------------
// Synthetic scene

void
SynthParams::validate() const {
    if (n_gaussians < 1) throw ContractError("synth: need at least one Gaussian");
    if (n_cameras < 2) throw ContractError("synth: need at least two cameras");
    if (!(extent > 0)) throw ContractError("synth: extent must be positive");
    if (width < 1 || height < 1) throw ContractError("synth: image size must be positive");
    if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ContractError("synth: sh degree must be 0..3");
    if (!(tilt_deg >= 0 && tilt_deg < 60)) throw ContractError("synth: tilt must be in [0, 60) degrees");
}

namespace {

struct Building {
    double x0, x1, y0, y1, h;
    Vec3 roof;
};

// Looking down, tilted towards +y by tiltDeg; image right is world +x.
Mat3
downwardRotation(double tiltDeg) {
    const double t = tiltDeg * M_PI / 180.0;
    const double s = std::sin(t), c = std::cos(t);
    Mat3 r;
    r.col(0) = Vec3(1, 0, 0);
    r.col(1) = Vec3(0, -c, -s);
    r.col(2) = Vec3(0, s, -c);
    return r;
}

std::vector<Camera>
cameraGrid(int n, const SynthParams &p, double offsetFrac, double heightFrac, double tiltDeg, int firstId) {
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = (n + cols - 1) / cols;
    const double span = 0.4 * p.extent;
    const double dx   = cols > 1 ? span / (cols - 1) : 0.0;
    const double dy   = rows > 1 ? span / (rows - 1) : 0.0;
    std::vector<Camera> cams;
    for (int i = 0; i < n; ++i) {
        const int cx = i % cols, cy = i / cols;
        Camera c;
        c.id     = firstId + i;
        c.width  = p.width;
        c.height = p.height;
        c.fx = c.fy = 0.9 * p.width;
        c.cx        = p.width / 2.0;
        c.cy        = p.height / 2.0;
        c.rotation  = downwardRotation(tiltDeg);
        c.translation = Vec3((cols > 1 ? -span / 2 + dx * cx : 0.0) + offsetFrac * std::max(dx, 0.1 * span),
                             (rows > 1 ? -span / 2 + dy * cy : 0.0) + offsetFrac * std::max(dy, 0.1 * span),
                             heightFrac * p.extent);
        c.near = 0.01 * p.extent;
        c.far  = 10.0 * p.extent;
        cams.push_back(c);
    }
    return cams;
}

} // namespace

SyntheticScene
synthScene(std::uint64_t seed, const SynthParams &params) {
    params.validate();
    SyntheticScene scene;
    scene.seed   = seed;
    scene.params = params;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> nrm(0.0, 1.0);
    const double e = params.extent;

    std::vector<Building> buildings;
    for (int b = 0; b < 8; ++b) {
        const double w = e * (0.05 + 0.06 * u(rng)), d = e * (0.05 + 0.06 * u(rng));
        const double x = e * (u(rng) - 0.5) * 0.8, y = e * (u(rng) - 0.5) * 0.8;
        buildings.push_back({x - w / 2, x + w / 2, y - d / 2, y + d / 2, e * (0.02 + 0.05 * u(rng)),
                             Vec3(0.2 + 0.7 * u(rng), 0.2 + 0.7 * u(rng), 0.2 + 0.7 * u(rng))});
    }
    const double ph1 = 2 * M_PI * u(rng), ph2 = 2 * M_PI * u(rng);
    auto ground = [&](double x, double y) {
        return 0.025 * e * std::sin(8.0 * x / e + ph1) * std::cos(6.0 * y / e + ph2);
    };

    const int n    = params.n_gaussians;
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = (n + cols - 1) / cols;
    const double sx = e / cols, sy = e / rows;
    GaussianModel gt(params.sh_degree);
    gt.reserve(n);
    for (int i = 0; i < n; ++i) {
        const int ix = i % cols, iy = i / cols;
        const double x = -e / 2 + sx * (ix + 0.5 + 0.6 * (u(rng) - 0.5));
        const double y = -e / 2 + sy * (iy + 0.5 + 0.6 * (u(rng) - 0.5));
        double z       = ground(x, y);
        Vec3 color(0.35 + 0.25 * std::sin(3.1 * x / e * 2 * M_PI / 3 + ph2),
                   0.45 + 0.2 * std::cos(2.3 * y / e * 2 * M_PI / 3 + ph1), 0.3 + 0.15 * std::sin((x + y) / e * 5));
        for (const auto &b : buildings) {
            if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) {
                z     = std::max(z, b.h);
                color = b.roof;
            }
        }
        color += Vec3(0.12 * nrm(rng), 0.12 * nrm(rng), 0.12 * nrm(rng));
        GaussianPrimitive g;
        g.position         = Vec3(x, y, z);
        const double yaw   = M_PI * u(rng);
        g.rotation         = Vec4(std::cos(yaw / 2), 0, 0, std::sin(yaw / 2));
        const double base  = std::min(sx, sy);
        const double lo = 0.005 * e, hi = 0.02 * e;
        g.log_scale = Vec3(std::log(std::clamp(base * (0.6 + 0.35 * u(rng)), lo, hi)),
                           std::log(std::clamp(base * (0.6 + 0.35 * u(rng)), lo, hi)), std::log(lo));
        g.opacity_logit = logit(0.9 + 0.08 * u(rng));
        g.confidence    = 1.0;
        g.setBaseColor(color.cwiseMax(0.02).cwiseMin(0.98));
        for (int k = 1; k < shCoeffCount(params.sh_degree); ++k) {
            g.sh[k] = 0.04 * Vec3(nrm(rng), nrm(rng), nrm(rng));
        }
        gt.add(g);
    }
    scene.gt = quantizeModel(std::move(gt));
    scene.gt.sanitize();
    scene.gt = quantizeModel(std::move(scene.gt));

    scene.cameras      = cameraGrid(params.n_cameras, params, 0.0, 0.35, params.tilt_deg, 0);
    scene.test_cameras = cameraGrid(params.n_cameras, params, 0.37, 0.33, params.tilt_deg + 3.0, 0);
    for (const auto &c : scene.cameras) {
        const auto out = render(scene.gt, c);
        scene.images.push_back(quantizeToFloat(out.color));
        scene.depths.push_back(quantizeToFloat(out.depth));
    }
    for (const auto &c : scene.test_cameras) {
        scene.test_images.push_back(quantizeToFloat(render(scene.gt, c).color));
    }
    return scene;
}

std::vector<Region>
partitionScene(std::span<const Camera> cams, int m) {
    if (m < 1) throw ContractError("partition: need at least one device");
    if (cams.empty()) throw ContractError("partition: no cameras");
    int r = static_cast<int>(std::floor(std::sqrt(static_cast<double>(m))));
    while (m % r != 0) --r;
    const int c = m / r;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto &cam : cams) {
        x0 = std::min(x0, cam.translation.x());
        x1 = std::max(x1, cam.translation.x());
        y0 = std::min(y0, cam.translation.y());
        y1 = std::max(y1, cam.translation.y());
    }
    if ((c > 1 && !(x1 > x0)) || (r > 1 && !(y1 > y0))) {
        throw ContractError("partition: camera footprint is degenerate for a " + std::to_string(r) + "x" +
                            std::to_string(c) + " grid");
    }
    const double inf = std::numeric_limits<double>::infinity();
    auto edge = [&](double lo, double hi, int k, int count) {
        if (k == 0) return -inf;
        if (k == count) return inf;
        return lo + (hi - lo) * k / count;
    };
    std::vector<Region> regions;
    for (int row = 0; row < r; ++row) {
        for (int col = 0; col < c; ++col) {
            Region reg{edge(x0, x1, col, c), edge(x0, x1, col + 1, c), edge(y0, y1, row, r),
                       edge(y0, y1, row + 1, r), row * c + col};
            regions.push_back(reg);
        }
    }
    return regions;
}

int
regionOf(const Vec3 &p, std::span<const Region> regions) {
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (pointInRegion(p, regions[i])) return static_cast<int>(i);
    }
    throw ContractError("point lies outside every region");
}

std::uint64_t
depthSeed(std::uint64_t sceneSeed, int id) {
    return sceneSeed * 1000003ull + static_cast<std::uint64_t>(id);
}

DepthMap
estimateDepth(const DepthMap &gt, std::uint64_t seed, const DepthProviderParams &params) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    const double a = params.scale_min + (params.scale_max - params.scale_min) * u(rng);
    const double b = params.offset_min + (params.offset_max - params.offset_min) * u(rng);
    DepthMap out   = gt;
    for (double &d : out.data) {
        d = a * d * (1.0 + params.noise * n(rng)) + b;
    }
    return quantizeToFloat(out);
}

namespace {

fs::path
numbered(const fs::path &dir, const char *sub, int id) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04d.pfm", id);
    return dir / sub / name;
}

} // namespace

fs::path
imagePath(const fs::path &dir, int id) {
    return numbered(dir, "images", id);
}

fs::path
depthPath(const fs::path &dir, int id) {
    return numbered(dir, "depths", id);
}

fs::path
testImagePath(const fs::path &dir, int id) {
    return numbered(dir, "test_images", id);
}

fs::path
deviceDir(const fs::path &dir, int device) {
    return dir / ("device_" + std::to_string(device));
}

void
writeScene(const fs::path &dir, const SyntheticScene &scene) {
    fs::create_directories(dir);
    writeCamerasTxt(dir / "cameras.txt", scene.cameras);
    writeCamerasTxt(dir / "test_cameras.txt", scene.test_cameras);
    saveModel(dir / "gt.dgs", scene.gt);
    for (std::size_t i = 0; i < scene.cameras.size(); ++i) {
        const int id = scene.cameras[i].id;
        saveImagePfm(imagePath(dir, id), scene.images[i]);
        saveDepthPfm(depthPath(dir, id), estimateDepth(scene.depths[i], depthSeed(scene.seed, id)));
    }
    for (std::size_t i = 0; i < scene.test_cameras.size(); ++i) {
        saveImagePfm(testImagePath(dir, scene.test_cameras[i].id), scene.test_images[i]);
    }
    const auto &p = scene.params;
    nlohmann::json j = {{"seed", scene.seed},
                        {"gaussians", p.n_gaussians},
                        {"cameras", p.n_cameras},
                        {"extent", p.extent},
                        {"width", p.width},
                        {"height", p.height},
                        {"sh_degree", p.sh_degree},
                        {"tilt_deg", p.tilt_deg}};
    writeText(dir / "scene.json", j.dump(2) + "\n");
}

SyntheticScene
loadScene(const fs::path &dir) {
    SyntheticScene sc;
    const Bytes raw        = readFileBytes(dir / "scene.json");
    const std::string text(raw.begin(), raw.end());
    nlohmann::json j;
    try {
        j                    = nlohmann::json::parse(text);
        sc.seed              = j.at("seed").get<std::uint64_t>();
        sc.params.n_gaussians = j.at("gaussians").get<int>();
        sc.params.n_cameras  = j.at("cameras").get<int>();
        sc.params.extent     = j.at("extent").get<double>();
        sc.params.width      = j.at("width").get<int>();
        sc.params.height     = j.at("height").get<int>();
        sc.params.sh_degree  = j.at("sh_degree").get<int>();
        sc.params.tilt_deg   = j.at("tilt_deg").get<double>();
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(FormatErrorCode::Malformed, (dir / "scene.json").string() + ": " + e.what());
    }
    sc.gt           = loadModel(dir / "gt.dgs");
    sc.cameras      = readCamerasTxt(dir / "cameras.txt");
    sc.test_cameras = readCamerasTxt(dir / "test_cameras.txt");
    for (const auto &c : sc.cameras) {
        sc.images.push_back(loadImagePfm(imagePath(dir, c.id)));
        sc.depths.push_back(loadDepthPfm(depthPath(dir, c.id)));
    }
    for (const auto &c : sc.test_cameras) sc.test_images.push_back(loadImagePfm(testImagePath(dir, c.id)));
    return sc;
}

void
writePartition(const fs::path &dir, std::span<const Camera> cams, std::span<const Region> regions) {
    writeRegionsTxt(dir / "regions.txt", regions);
    for (const auto &r : regions) {
        std::vector<Camera> mine;
        for (const auto &c : cams) {
            if (pointInRegion(c.translation, r)) mine.push_back(c);
        }
        writeCamerasTxt(deviceDir(dir, r.device) / "cameras.txt", mine);
    }
}

} // namespace dgtr
