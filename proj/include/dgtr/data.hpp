// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Binary and text formats, the synthetic aerial scene generator, region
// partitioning and the on-disk dataset layout.
//
// All binary formats are little-endian and end with a CRC-32 of every byte
// that precedes it.
//
//   .dgs   "DGS1" | sh_degree u8 | count u64 | count * record | crc u32
//          record = position 3, quaternion 4, log_scale 3, opacity_logit 1,
//                   confidence 1, sh 3 * (degree + 1)^2, all float32
//   camera list   "DGC1" | count u32 | count * (id i32, fx fy cx cy f64,
//          width height u32, rotation 9 f64 row-major, translation 3 f64,
//          near far f64) | crc u32
//   .dgp   "DGP1" | p q width height i32 | sh_degree u8 |
//          2 * H * W * (point 3, confidence 1, quaternion 4, log_scale 3,
//          opacity_logit 1, sh 3 * (degree + 1)^2) float32 | crc u32
//
#pragma once

#include <dgtr/core.hpp>
#include <dgtr/prediction.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace dgtr {

using Bytes = std::vector<std::uint8_t>;

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Little-endian append-only writer.
class ByteWriter {
  public:
    template <class T>
    void
    put(T v) {
        static_assert(std::is_arithmetic_v<T>);
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        mBytes.insert(mBytes.end(), raw, raw + sizeof(T));
    }
    void putBytes(std::span<const std::uint8_t> b) { mBytes.insert(mBytes.end(), b.begin(), b.end()); }
    void putMagic(const char (&m)[5]) { mBytes.insert(mBytes.end(), m, m + 4); }
    // Appends the CRC-32 of everything written so far.
    void putCrc() { put<std::uint32_t>(crc32(mBytes)); }

    Bytes &bytes() { return mBytes; }
    Bytes take() { return std::move(mBytes); }

  private:
    Bytes mBytes;
};

// Bounds-checked little-endian reader; every underflow is FormatError(Truncated).
class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> b) : mBytes(b) {}

    template <class T>
    T
    get() {
        static_assert(std::is_arithmetic_v<T>);
        need(sizeof(T));
        T v;
        std::memcpy(&v, mBytes.data() + mPos, sizeof(T));
        mPos += sizeof(T);
        return v;
    }
    void expectMagic(const char (&m)[5], const char *what);
    std::span<const std::uint8_t> getBytes(std::size_t n);
    // Checks the trailing CRC over [0, pos) and consumes it.
    void expectCrc(const char *what);

    std::size_t position() const { return mPos; }
    std::size_t remaining() const { return mBytes.size() - mPos; }
    void need(std::size_t n) const;

  private:
    std::span<const std::uint8_t> mBytes;
    std::size_t mPos = 0;
};

Bytes readFileBytes(const std::filesystem::path &path);
void writeFileBytes(const std::filesystem::path &path, std::span<const std::uint8_t> bytes);

// Models (.dgs). Values are stored as float32; decode(encode(m)) equals m bit-exactly
// whenever every field of m is float-representable.
Bytes encodeModel(const GaussianModel &model);
GaussianModel decodeModel(std::span<const std::uint8_t> bytes, std::size_t *consumed = nullptr);
void saveModel(const std::filesystem::path &path, const GaussianModel &model);
GaussianModel loadModel(const std::filesystem::path &path);
// Rounds every stored field to float32, the precision the file keeps.
GaussianModel quantizeModel(GaussianModel model);

// Camera lists in full double precision, used in upload payloads.
Bytes encodeCameras(std::span<const Camera> cams);
std::vector<Camera> decodeCameras(std::span<const std::uint8_t> bytes, std::size_t *consumed = nullptr);

// Pair predictions (.dgp).
Bytes encodePairPrediction(const PairPrediction &pred);
PairPrediction decodePairPrediction(std::span<const std::uint8_t> bytes);
void savePairPrediction(const std::filesystem::path &path, const PairPrediction &pred);
PairPrediction loadPairPrediction(const std::filesystem::path &path);

// Images: binary PPM (P6, 8 bit, values clamped to [0,1]) and PFM (float32,
// "PF" color or "Pf" grey, little-endian, rows stored bottom to top).
void saveImagePpm(const std::filesystem::path &path, const ImageBuffer &img);
ImageBuffer loadImagePpm(const std::filesystem::path &path);
void saveImagePfm(const std::filesystem::path &path, const ImageBuffer &img);
ImageBuffer loadImagePfm(const std::filesystem::path &path);
void saveDepthPfm(const std::filesystem::path &path, const DepthMap &depth);
DepthMap loadDepthPfm(const std::filesystem::path &path);

// cameras.txt: one camera per line,
//   id fx fy cx cy W H r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 near far
// Lines starting with '#' are comments.
void writeCamerasTxt(const std::filesystem::path &path, std::span<const Camera> cams);
std::vector<Camera> readCamerasTxt(const std::filesystem::path &path);

// regions.txt: "device min_x max_x min_y max_y" per line; unbounded sides are inf.
void writeRegionsTxt(const std::filesystem::path &path, std::span<const Region> regions);
std::vector<Region> readRegionsTxt(const std::filesystem::path &path);

struct SynthParams {
    int n_gaussians  = 4096;
    int n_cameras    = 16;
    double extent    = 10.0; // side of the square ground patch
    int width        = 64;
    int height       = 48;
    int sh_degree    = 1;
    double tilt_deg  = 15.0;

    void validate() const;
};

struct SyntheticScene {
    std::uint64_t seed = 0;
    SynthParams params;
    GaussianModel gt{1};
    std::vector<Camera> cameras;      // training rig
    std::vector<Camera> test_cameras; // held-out rig, offset from the training grid
    std::vector<ImageBuffer> images;
    std::vector<DepthMap> depths; // ground-truth raw depth
    std::vector<ImageBuffer> test_images;

    double
    extent() const {
        return params.extent;
    }
};

// Terrain-like ground of flat Gaussians seen by a downward-tilted camera grid.
// Everything stored is float-representable, so the scene survives a disk round trip unchanged.
SyntheticScene synthScene(std::uint64_t seed, const SynthParams &params);

// r x c grid over the bounding rectangle of camera ground positions, r = floor(sqrt(M))
// lowered until it divides M. Outer cells extend to infinity so every ground point
// belongs to exactly one region. Device ids are assigned row-major.
std::vector<Region> partitionScene(std::span<const Camera> cams, int m);

// Index of the region containing p; throws ContractError if none does.
int regionOf(const Vec3 &p, std::span<const Region> regions);

// Stand-in monocular depth estimate: multiplicative noise followed by an unknown
// positive affine map, deterministic in the seed.
struct DepthProviderParams {
    double noise        = 0.02;
    double scale_min    = 0.5, scale_max = 2.0;
    double offset_min   = 0.0, offset_max = 1.0;
};
DepthMap estimateDepth(const DepthMap &gt, std::uint64_t seed, const DepthProviderParams &params = {});
// Seed of the estimate stored for camera id of a scene.
std::uint64_t depthSeed(std::uint64_t sceneSeed, int id);

// Dataset directory layout:
//   cameras.txt, test_cameras.txt, gt.dgs, scene.json
//   images/<id>.pfm, depths/<id>.pfm (estimated), test_images/<id>.pfm
//   regions.txt and device_<m>/cameras.txt once partitioned
void writeScene(const std::filesystem::path &dir, const SyntheticScene &scene);

// Reads a scene written by writeScene. depths holds the stored estimates, not
// ground truth.
SyntheticScene loadScene(const std::filesystem::path &dir);

// Writes regions.txt and one device_<m>/cameras.txt per region.
void writePartition(const std::filesystem::path &dir, std::span<const Camera> cams,
                    std::span<const Region> regions);

std::filesystem::path imagePath(const std::filesystem::path &dir, int id);
std::filesystem::path depthPath(const std::filesystem::path &dir, int id);
std::filesystem::path testImagePath(const std::filesystem::path &dir, int id);
std::filesystem::path deviceDir(const std::filesystem::path &dir, int device);

} // namespace dgtr
