// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Per-device optimization: render, loss, backward, Adam update, with periodic
// densification and pruning and optional shape freezing.
//
#pragma once

#include <dgtr/core.hpp>
#include <dgtr/loss.hpp>
#include <dgtr/raster.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace dgtr {

struct LearningRates {
    double position_init  = 1.6e-4; // multiplied by the scene extent
    double position_final = 1.6e-6;
    double rotation       = 1e-3;
    double log_scale      = 5e-3;
    double opacity        = 5e-2;
    double sh             = 2.5e-3;

    LearningRates scaled(double factor) const;
};

// Adam over every primitive parameter. State follows primitives through
// densification: survivors keep their moments, new primitives start at zero.
class AdamOptimizer {
  public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps   = 1e-15;

    explicit AdamOptimizer(std::size_t n = 0) : mM(n), mV(n) {}

    std::size_t
    size() const {
        return mM.size();
    }
    int
    steps() const {
        return mStep;
    }

    // positionLr is the already-decayed and extent-scaled rate. When freezeShape is
    // set, rotation and log_scale are left untouched bit for bit.
    void step(GaussianModel &model, const ParamGradients &grads, const LearningRates &lr, double positionLr,
              bool freezeShape);

    void retain(const std::vector<bool> &keep);
    void append(std::size_t n);

  private:
    std::vector<PrimitiveGrad> mM, mV;
    int mStep = 0;
};

struct DensifyThresholds {
    double grad          = 2e-4;  // mean screen-space positional gradient
    double split_extent  = 0.01;  // clone below this fraction of the scene extent, split above
    double split_factor  = 1.6;
    double min_opacity   = 0.005;
    std::size_t max_primitives = 0; // 0 = unbounded
};

struct DensifyStats {
    std::size_t cloned = 0, split = 0, pruned = 0;
};

// Clones or splits primitives whose mean accumulated gradient exceeds the
// threshold, prunes nearly transparent ones, and resets bookkeeping. The
// optimizer, when given, is kept aligned with the primitive list.
DensifyStats densifyAndPrune(GaussianModel &model, const DensifyThresholds &th, double sceneExtent,
                             std::uint64_t seed, AdamOptimizer *opt = nullptr);

struct DeviceDataset {
    std::vector<Camera> cameras;
    std::vector<ImageBuffer> images;
    std::vector<DepthMap> depths; // estimated depth per view

    std::size_t
    size() const {
        return cameras.size();
    }
    void validate() const;
};

// Loads device_<m>/cameras.txt plus the referenced images and estimated depths.
DeviceDataset loadDeviceDataset(const std::filesystem::path &sceneDir, int device);

struct TrainConfig {
    int steps            = 10000;
    int densify_interval = 300;
    int densify_stop_step = -1; // -1 = steps / 2
    LearningRates lr;
    DensifyThresholds densify;
    bool shape_freeze = true;
    LossWeights weights;
    std::uint64_t seed   = 0;
    double scene_extent  = 0.0; // 0 = derived from the camera spread
    Vec3 background      = Vec3::Zero();

    int effectiveDensifyStop() const;
    void validate() const;
};

struct TraceEntry {
    int step = 0;
    int view = 0;
    double loss = 0, l1 = 0, dssim = 0, depth = 0;
    std::size_t primitives = 0;
};

struct TrainResult {
    GaussianModel model{1};
    std::vector<TraceEntry> trace;
    std::vector<DensifyStats> densify_events;
};

// Called after every step with the 1-based number of completed steps.
using StepCallback = std::function<void(int, const GaussianModel &)>;

TrainResult trainDevice(GaussianModel model, const DeviceDataset &ds, const TrainConfig &cfg,
                        const StepCallback &onStep = {});

// 1.1 x the largest camera distance from the mean camera center (1 when degenerate).
double cameraExtent(std::span<const Camera> cams);

void writeTrace(const std::filesystem::path &path, const std::vector<TraceEntry> &trace);

} // namespace dgtr
