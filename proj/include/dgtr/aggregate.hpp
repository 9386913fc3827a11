// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Server-side aggregation: region filtering, union merge, pseudo ground truth
// from the device (teacher) models and distillation of the merged student.
//
#pragma once

#include <dgtr/core.hpp>
#include <dgtr/loss.hpp>
#include <dgtr/train.hpp>

#include <span>
#include <vector>

namespace dgtr {

// Keeps primitives whose position lies in the region, in order.
GaussianModel filterByRegion(const GaussianModel &model, const Region &region);

// Concatenation in the given order. All models must share the SH degree.
GaussianModel merge(std::span<const GaussianModel> models);

// One color render per camera of the (unfiltered) teacher.
std::vector<ImageBuffer> renderPseudoGt(const GaussianModel &teacher, std::span<const Camera> cameras,
                                        const Vec3 &background = Vec3::Zero());

struct DistillView {
    Camera camera;
    ImageBuffer pseudo;
};

struct DistillConfig {
    int epochs = 5;
    double lr_factor = 0.1; // relative to the device-training rates
    LearningRates lr;
    LossWeights weights;
    double scene_extent = 0.0; // 0 = derived from the view cameras
    Vec3 background     = Vec3::Zero();

    void validate() const;
};

struct DistillResult {
    GaussianModel model{1};
    std::vector<double> epoch_loss; // mean per-view distillation loss during each epoch
};

// One pass over the views per epoch in the given order, Adam on the
// photometric loss, no densification. epochs = 0 returns the student unchanged.
DistillResult distill(GaussianModel student, std::span<const DistillView> views, const DistillConfig &cfg);

struct DeviceUpload {
    int device = 0;
    GaussianModel model{1};
    std::vector<Camera> cameras;
};

struct AggregateResult {
    GaussianModel model{1};
    std::vector<std::size_t> filtered_counts; // per device, in device order
    std::vector<double> epoch_loss;
};

// Filters each upload by its device's region, merges in device-id order, renders
// pseudo views from each unfiltered teacher and distills the merged model over
// all views (device order, then camera order).
AggregateResult aggregate(std::vector<DeviceUpload> uploads, std::span<const Region> regions,
                          const DistillConfig &cfg);

} // namespace dgtr
