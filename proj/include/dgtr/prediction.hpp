// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Output of a pairwise feed-forward predictor: two pixel-aligned pointmaps in
// the frame of the reference image, their confidences, and one raw Gaussian
// per pixel of each image.
//
#pragma once

#include <dgtr/core.hpp>

namespace dgtr {

struct PairPrediction {
    int p = 0; // reference image index
    int q = 0;
    int width  = 0;
    int height = 0;
    // views[0] belongs to image p, views[1] to image q; both in p's camera frame.
    std::array<std::vector<Vec3>, 2> points;
    std::array<std::vector<double>, 2> confidence;
    // 2 * width * height raw Gaussians, view p first then view q, row-major.
    // Positions mirror the pointmaps; log_scale is in the predictor's own units.
    GaussianModel gaussians{1};

    std::size_t
    pixelCount() const {
        return static_cast<std::size_t>(width) * height;
    }

    // Throws FormatError(ShapeMismatch) or NumericError when the record is inconsistent.
    void validate() const;
};

} // namespace dgtr
