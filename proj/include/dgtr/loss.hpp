// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Photometric, depth-correlation and distillation losses with analytic
// gradients with respect to the rendered buffers, plus image metrics.
//
#pragma once

#include <dgtr/core.hpp>

#include <limits>

namespace dgtr {

struct LossWeights {
    double lambda1 = 0.8;  // L1
    double lambda2 = 0.2;  // 1 - SSIM
    double lambda3 = 0.05; // depth correlation

    void validate() const;
};

struct ImageLoss {
    double value = 0.0;
    ImageBuffer grad; // d value / d predicted image
};

struct DepthLoss {
    double value = 0.0;
    DepthMap grad; // d value / d rendered depth
};

// Mean absolute error; the gradient at exact ties is zero.
ImageLoss l1Loss(const ImageBuffer &target, const ImageBuffer &pred);

inline constexpr int kSsimWindow    = 11;
inline constexpr double kSsimSigma  = 1.5;
inline constexpr double kSsimC1     = 0.01 * 0.01;
inline constexpr double kSsimC2     = 0.03 * 0.03;

// Mean SSIM over pixels and channels, Gaussian window, zero padding.
double ssim(const ImageBuffer &a, const ImageBuffer &b);

// value = 1 - ssim(target, pred), gradient with respect to pred.
ImageLoss ssimLoss(const ImageBuffer &target, const ImageBuffer &pred);

inline constexpr double kPearsonMinVariance = 1e-12;
inline constexpr double kPearsonAlphaMask   = 0.5;

// 1 - Pearson correlation between rendered and estimated depth. When alpha is
// given, pixels whose accumulated opacity is below 0.5 are excluded. Constant
// depth on either side yields zero loss and zero gradient.
DepthLoss pearsonDepthLoss(const DepthMap &rendered, const DepthMap &estimated,
                           const AlphaMap *alpha = nullptr);

struct TotalLoss {
    double value = 0.0;
    double l1 = 0.0, dssim = 0.0, depth = 0.0; // unweighted terms
    ImageBuffer grad_color;
    DepthMap grad_depth;
};

TotalLoss totalLoss(const ImageBuffer &target, const ImageBuffer &pred, const DepthMap &rendered,
                    const DepthMap &estimated, const LossWeights &w, const AlphaMap *alpha = nullptr);

// Photometric part only, against a pseudo ground truth.
ImageLoss distillLoss(const ImageBuffer &pseudo, const ImageBuffer &pred, const LossWeights &w);

inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

// 10 log10(1 / MSE) on unit range; +inf when the images are identical.
double psnr(const ImageBuffer &a, const ImageBuffer &b);

} // namespace dgtr
