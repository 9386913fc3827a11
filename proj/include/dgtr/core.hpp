// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Scene representation shared by every stage of the pipeline: Gaussian
// primitives, pinhole cameras, ground-plane regions and image planes.
//
#pragma once

#include <dgtr/errors.hpp>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace dgtr {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr int kMaxShDegree   = 3;
inline constexpr int kMaxShCoeffs   = (kMaxShDegree + 1) * (kMaxShDegree + 1);
inline constexpr double kShC0       = 0.28209479177387814;

constexpr int
shCoeffCount(int degree) {
    return (degree + 1) * (degree + 1);
}

// One RGB triple per SH basis function; only the first shCoeffCount(degree) are used.
using ShCoeffs = std::array<Vec3, kMaxShCoeffs>;

inline double
sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

inline double
logit(double p) {
    return std::log(p / (1.0 - p));
}

// Quaternions are stored (w, x, y, z).
Mat3 rotationFromQuaternion(const Vec4 &q);
Vec4 normalizedQuaternion(const Vec4 &q);
Vec4 quaternionProduct(const Vec4 &a, const Vec4 &b);
// Unit quaternion with non-negative w for a proper rotation matrix.
Vec4 quaternionFromRotation(const Mat3 &r);

struct GaussianPrimitive {
    Vec3 position      = Vec3::Zero();
    Vec4 rotation      = Vec4(1, 0, 0, 0);
    Vec3 log_scale     = Vec3::Zero();
    double opacity_logit = 0.0;
    double confidence  = 1.0;
    ShCoeffs sh{};

    GaussianPrimitive() {
        for (auto &c : sh) {
            c.setZero();
        }
    }

    double
    opacity() const {
        return sigmoid(opacity_logit);
    }

    Vec3
    scale() const {
        return log_scale.array().exp();
    }

    // Sets the DC coefficient so that the view-independent color equals rgb.
    void setBaseColor(const Vec3 &rgb);
    Vec3 baseColor() const;
};

class GaussianModel {
  public:
    explicit GaussianModel(int shDegree = 1);

    int
    shDegree() const {
        return mShDegree;
    }
    std::size_t
    size() const {
        return mPrimitives.size();
    }
    bool
    empty() const {
        return mPrimitives.empty();
    }

    std::span<const GaussianPrimitive>
    primitives() const {
        return mPrimitives;
    }
    std::span<GaussianPrimitive>
    primitives() {
        return mPrimitives;
    }
    const GaussianPrimitive &
    operator[](std::size_t i) const {
        return mPrimitives[i];
    }
    GaussianPrimitive &
    operator[](std::size_t i) {
        return mPrimitives[i];
    }

    void add(const GaussianPrimitive &g);
    void reserve(std::size_t n);
    void clear();
    // Keeps primitives whose mask entry is true, preserving order.
    void retain(const std::vector<bool> &keep);
    void append(const GaussianModel &other);

    // Densification bookkeeping: accumulated screen-space positional gradient
    // magnitude and number of views in which each primitive was visible.
    std::span<const double>
    gradAccum() const {
        return mGradAccum;
    }
    std::span<const int>
    gradCount() const {
        return mGradCount;
    }
    void accumulateGrad(std::size_t i, double magnitude);
    void resetBookkeeping();

    // Re-normalizes quaternions; throws NumericError on non-finite fields.
    void sanitize();

    // Bitwise equality of every stored field (bookkeeping excluded).
    bool identical(const GaussianModel &other) const;

    Vec3 boundsMin() const;
    Vec3 boundsMax() const;

  private:
    int mShDegree;
    std::vector<GaussianPrimitive> mPrimitives;
    std::vector<double> mGradAccum;
    std::vector<int> mGradCount;
};

// Pinhole camera with a world-from-camera pose. Camera axes follow the
// x-right, y-down, z-forward convention; pixel (col, row) has its center at
// (col + 0.5, row + 0.5).
struct Camera {
    int id = 0;
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 1, height = 1;
    Mat3 rotation    = Mat3::Identity(); // world-from-camera
    Vec3 translation = Vec3::Zero();     // camera center in world
    double near = 0.01, far = 100.0;

    Mat4 pose() const;
    void setPose(const Mat4 &worldFromCamera);

    Mat3
    worldToCameraRotation() const {
        return rotation.transpose();
    }
    Vec3
    toCamera(const Vec3 &world) const {
        return rotation.transpose() * (world - translation);
    }
    Vec3
    toWorld(const Vec3 &cam) const {
        return rotation * cam + translation;
    }
    Vec3
    center() const {
        return translation;
    }
    // Camera-frame ray direction (z = 1) through the center of pixel (col, row).
    Vec3 pixelRay(int col, int row) const;

    // Throws ContractError when intrinsics, pose or clip range are invalid.
    void validate() const;
};

// Axis-aligned rectangle in the world XY ground plane, half-open on both axes.
struct Region {
    double min_x = 0, max_x = 0, min_y = 0, max_y = 0;
    int device = 0;

    void validate() const;
};

bool pointInRegion(const Vec3 &p, const Region &r);
std::vector<bool> pointsInRegion(std::span<const Vec3> points, const Region &r);

// Row-major H x W x C plane of doubles.
template <int C>
struct Plane {
    static constexpr int kChannels = C;

    int width  = 0;
    int height = 0;
    std::vector<double> data;

    Plane() = default;
    Plane(int w, int h, double fill = 0.0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * C, fill) {}

    std::size_t
    pixelCount() const {
        return static_cast<std::size_t>(width) * height;
    }
    double &
    at(int row, int col, int ch = 0) {
        return data[(static_cast<std::size_t>(row) * width + col) * C + ch];
    }
    double
    at(int row, int col, int ch = 0) const {
        return data[(static_cast<std::size_t>(row) * width + col) * C + ch];
    }
    bool
    sameShape(const Plane &o) const {
        return width == o.width && height == o.height;
    }
    bool operator==(const Plane &) const = default;
};

using ImageBuffer = Plane<3>;
using DepthMap    = Plane<1>;
using AlphaMap    = Plane<1>;

// Rounds every value to float32 precision, the storage precision of all file formats.
template <int C>
Plane<C>
quantizeToFloat(Plane<C> p) {
    for (double &v : p.data) {
        v = static_cast<double>(static_cast<float>(v));
    }
    return p;
}

// Sigma = R S S^T R^T with S = diag(exp(log_scale)). The quaternion is normalized internally.
Mat3 covarianceFrom(const Vec4 &rotation, const Vec3 &logScale);

} // namespace dgtr
