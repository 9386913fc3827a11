// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable splatting of a GaussianModel into color, depth and alpha
// buffers, plus the analytic backward pass over every primitive parameter.
//
// Blending semantics (shared with the reference renderer used in tests):
//   * splats are composited front-to-back by camera-space depth, ties broken by
//     primitive index;
//   * a splat touches a pixel only inside its 3-sigma ellipse
//     (Mahalanobis^2 <= 9 under cov2d) and when alpha >= 1/255;
//   * alpha = min(0.999, opacity * exp(-0.5 * d^T cov2d^-1 d));
//   * compositing stops before the splat that would drop transmittance below 1e-4;
//   * depth = sum_i w_i z_i with w_i = alpha_i * prod_{j<i} (1 - alpha_j), not
//     normalized by accumulated alpha.
//
#pragma once

#include <dgtr/core.hpp>

#include <cstdint>
#include <vector>

namespace dgtr {

inline constexpr double kCov2dFloor        = 0.3;
inline constexpr double kAlphaMax          = 0.999;
inline constexpr double kAlphaMin          = 1.0 / 255.0;
inline constexpr double kTransmittanceStop = 1e-4;
inline constexpr double kFootprintSigma    = 3.0;
inline constexpr int kTileSize             = 8;

struct Projected2D {
    std::uint32_t index = 0; // primitive index in the model
    Vec2 mean2d         = Vec2::Zero();
    Mat2 cov2d          = Mat2::Identity();
    double conic[3]     = {1, 0, 1}; // (a, b, c) of cov2d^-1
    double view_depth   = 0;
    double opacity      = 0;
    Vec3 color          = Vec3::Zero();
    bool color_clamped[3] = {false, false, false};
    Vec3 view_dir       = Vec3::UnitZ(); // unit vector camera center -> primitive
    // Inclusive pixel bounds of the 3-sigma footprint, clipped to the image.
    int col_min = 0, col_max = -1, row_min = 0, row_max = -1;
};

// Projects every primitive and returns the retained (unculled) splats in
// primitive order. Culls splats with depth outside (near, far) and splats whose
// footprint misses every pixel center.
std::vector<Projected2D> project(const GaussianModel &model, const Camera &cam);

struct RenderOptions {
    Vec3 background = Vec3::Zero();
    // When non-zero, the camera must have exactly these dimensions.
    int width  = 0;
    int height = 0;
};

// Replay state recorded by the forward pass.
struct RenderAux {
    int width = 0, height = 0;
    std::size_t primitive_count = 0;
    std::uint64_t fingerprint   = 0;
    Vec3 background             = Vec3::Zero();
    std::vector<Projected2D> splats;
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::uint32_t> tile_offsets; // tiles + 1
    std::vector<std::uint32_t> tile_entries; // splat indices, depth-sorted per tile
    std::vector<std::uint32_t> pixel_end;    // entries consumed per pixel (relative to tile start)
    std::vector<double> pixel_final_t;
};

struct RenderOutput {
    ImageBuffer color;
    DepthMap depth;
    AlphaMap alpha;
    RenderAux aux;
};

RenderOutput render(const GaussianModel &model, const Camera &cam, const RenderOptions &opts = {});

struct PrimitiveGrad {
    Vec3 position      = Vec3::Zero();
    Vec4 rotation      = Vec4::Zero();
    Vec3 log_scale     = Vec3::Zero();
    double opacity_logit = 0.0;
    ShCoeffs sh{};

    PrimitiveGrad() {
        for (auto &c : sh) {
            c.setZero();
        }
    }
};

struct ParamGradients {
    std::vector<PrimitiveGrad> grads;
    // |dL/d mean2d| in normalized device coordinates, zero for culled primitives.
    std::vector<double> screen_grad_norm;
    std::vector<std::uint8_t> visible;

    explicit ParamGradients(std::size_t n = 0) : grads(n), screen_grad_norm(n, 0.0), visible(n, 0) {}

    std::size_t
    size() const {
        return grads.size();
    }
    bool allFinite() const;
    void add(const ParamGradients &other);
};

// Gradients of a scalar loss with respect to every primitive parameter given
// dL/dcolor (H x W x 3) and dL/ddepth (H x W). aux must come from the forward
// pass over the same model and camera.
ParamGradients renderBackward(const GaussianModel &model, const Camera &cam,
                              const ImageBuffer &gradColor, const DepthMap &gradDepth,
                              const RenderAux &aux);

// Zeroes rotation and log_scale gradients.
ParamGradients freezeShape(ParamGradients grads);

// Hash of the model parameters and camera, used to match aux to its forward pass.
std::uint64_t renderFingerprint(const GaussianModel &model, const Camera &cam);

} // namespace dgtr
