// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Feed-forward style initialization of a device model: image pairing,
// per-pair prediction, global alignment of the pointmaps against known poses,
// global (ICP) and local (neighbor spacing) scale calibration, and assembly.
//
// Image indices are zero-based positions in the device's camera list.
//
#pragma once

#include <dgtr/core.hpp>
#include <dgtr/prediction.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

namespace dgtr {

struct ImagePair {
    int p = 0, q = 0;
    bool operator==(const ImagePair &) const = default;
};

// Sliding window: (i, i+1) for i = 0, stride, 2 * stride, ... while i + 1 < n.
std::vector<ImagePair> pairImages(int nImages, int stride);

class Predictor {
  public:
    virtual ~Predictor() = default;
    virtual PairPrediction predict(int p, int q) = 0;
};

// Loads pair_<p>_<q>.dgp records produced by an external predictor.
class FilePredictor final : public Predictor {
  public:
    explicit FilePredictor(std::filesystem::path dir) : mDir(std::move(dir)) {}
    PairPrediction predict(int p, int q) override;
    static std::filesystem::path fileName(int p, int q);

  private:
    std::filesystem::path mDir;
};

struct SyntheticPredictorParams {
    std::uint64_t seed   = 1;
    double global_factor = 1.0;   // shared scale error of the predictor (1 = metric)
    double scale_min     = 0.5;   // per-pair scale drawn log-uniformly in [min, max]
    double scale_max     = 2.0;
    double noise         = 0.005; // point noise, fraction of extent
    double extent        = 1.0;
    double opacity       = 0.7;
    double scale_jitter  = 0.05;  // log-space noise on raw scales
    double flatness      = 0.2;   // normal-axis scale relative to the in-plane scale
    // Raw scales of a pair are off by a factor drawn log-uniformly from
    // [1/spread, spread], independently of the pointmap scale (1 = consistent).
    double raw_scale_spread = 1.0;
    // Explicit per-pair scales override the random draw.
    std::map<std::pair<int, int>, double> pair_scale;
};

// Oracle predictor for synthetic scenes: back-projects ground-truth depth,
// expresses both views in the reference camera frame, and applies a pair scale,
// the predictor's global factor and Gaussian noise. Confidence is the
// ground-truth coverage attenuated by the noise magnitude. Primitives are flat
// disks aligned with the local surface; their in-plane raw scale is the pair's
// median pixel footprint in predictor units, ignoring depth variation, times the
// pair's raw scale error.
class SyntheticPredictor final : public Predictor {
  public:
    SyntheticPredictor(GaussianModel gt, std::vector<Camera> cams, std::vector<ImageBuffer> images,
                       SyntheticPredictorParams params);
    PairPrediction predict(int p, int q) override;

    // True relative scale applied to pair (p, q), excluding the global factor.
    double pairScale(int p, int q) const;
    double rawScaleError(int p, int q) const;

  private:
    GaussianModel mGt;
    std::vector<Camera> mCams;
    std::vector<ImageBuffer> mImages;
    SyntheticPredictorParams mParams;
};

struct ConnectivityGraph {
    int n_images = 0;
    std::vector<ImagePair> pairs;       // one per edge, same order as edges
    std::vector<PairPrediction> edges;
    std::vector<ImagePair> bridges;     // edges added to restore connectivity

    bool connected() const;
};

// Predicts every pair. When the pairs leave the images disconnected, bridging
// pairs (i, i+1) are added between consecutive components and predicted too.
ConnectivityGraph buildGraph(int nImages, const std::vector<ImagePair> &pairs, Predictor &predictor);

struct AlignOptions {
    int steps          = 500;
    double lr_start    = 1e-2;
    double lr_end      = 1e-4;
    double smoothing   = 1e-3; // norm smoothing, in units of the scene scale
    int checkpoint_every = 25;
};

struct AlignmentResult {
    std::vector<std::vector<Vec3>> chi; // per image, row-major pixels, world frame
    std::vector<double> sigma;          // per edge, product 1
    double gamma = 1.0;                 // shared metric factor
    double scene_scale = 1.0;
    std::vector<double> objective;      // at step 0, every checkpoint, and the end
    std::vector<int> checkpoint_steps;
};

// Minimizes sum_e sum_{v in e} sum_i C_i |chi_i^v - P_e(gamma sigma_e X_i^{v,e})| over chi,
// log sigma (zero-mean gauge) and log gamma. poses[i] is the camera of image i.
AlignmentResult globalAlign(const ConnectivityGraph &graph, const std::vector<Camera> &poses,
                            const AlignOptions &opts = {});

// Evaluates the alignment objective (normalized by total confidence) for given parameters.
double alignmentObjective(const ConnectivityGraph &graph, const std::vector<Camera> &poses,
                          const AlignmentResult &params, double smoothing);

struct IcpOptions {
    int max_iterations   = 50;
    double tolerance     = 1e-6;
    std::size_t max_points = 4096;
};

// Scale s such that s * (source - centroid) best matches target after centroid
// alignment, with nearest-neighbor correspondences and identity rotation.
double icpGlobalScale(const std::vector<Vec3> &source, const std::vector<Vec3> &target,
                      const IcpOptions &opts = {});

struct LocalScale {
    std::vector<double> scale;
    std::vector<bool> keep;
};

inline constexpr double kLocalScaleOutlier = 5.0;

// Mean distance to 4-connected neighbors; keep is false where the scale exceeds tau * median.
LocalScale localScale(const std::vector<Vec3> &points, int width, int height,
                      double tau = kLocalScaleOutlier);

enum class ScaleMode { None, Global, GlobalLocal };
const char *toString(ScaleMode m);

struct AssembleInputs {
    double s_global = 1.0;
    // Per edge and view: local scale and keep mask (may be empty for ScaleMode::None / Global).
    std::vector<std::array<LocalScale, 2>> local;
    ScaleMode mode = ScaleMode::GlobalLocal;
};

// Positions from the aligned pointmaps; scales per mode:
//   None        raw predictor scale
//   Global      s_g * raw
//   GlobalLocal s_g * s_l * exp(raw - mean raw of the pair)
// Orientations are mapped from the reference camera frame to world with the pose
// rotation. Points with zero confidence or masked by the local-scale test are dropped.
GaussianModel assembleInit(const ConnectivityGraph &graph, const std::vector<Camera> &poses,
                           const AlignmentResult &align, const AssembleInputs &in);

struct InitConfig {
    int stride      = 2;
    AlignOptions align;
    ScaleMode mode  = ScaleMode::GlobalLocal;
    double tau      = kLocalScaleOutlier;
    int sh_degree   = 1;
};

struct InitReport {
    GaussianModel model{1};
    ConnectivityGraph graph;
    AlignmentResult align;
    double s_global = 1.0;
};

InitReport initializeDevice(const std::vector<Camera> &cams, Predictor &predictor, const InitConfig &cfg);

// Baseline: uniformly random Gaussians over the ground footprint of the cameras
// (image corners intersected with the plane z = 0), with random colors.
GaussianModel randomInit(const std::vector<Camera> &cams, std::size_t count, std::uint64_t seed,
                         int shDegree = 1);

} // namespace dgtr
