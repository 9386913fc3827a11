// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dgtr/core.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <cstring>
#include <limits>
#include <string>

namespace dgtr {

const char *
toString(FormatErrorCode code) {
    switch (code) {
    case FormatErrorCode::BadMagic: return "bad magic";
    case FormatErrorCode::BadVersion: return "bad version";
    case FormatErrorCode::Truncated: return "truncated";
    case FormatErrorCode::BadChecksum: return "bad checksum";
    case FormatErrorCode::ShapeMismatch: return "shape mismatch";
    case FormatErrorCode::TooLarge: return "too large";
    case FormatErrorCode::Malformed: return "malformed";
    case FormatErrorCode::Io: return "io error";
    }
    return "unknown";
}

Vec4
normalizedQuaternion(const Vec4 &q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        return Vec4(1, 0, 0, 0);
    }
    return q / n;
}

Mat3
rotationFromQuaternion(const Vec4 &qIn) {
    const Vec4 q   = normalizedQuaternion(qIn);
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Vec4
quaternionProduct(const Vec4 &a, const Vec4 &b) {
    return Vec4(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

Vec4
quaternionFromRotation(const Mat3 &r) {
    const Eigen::Quaterniond q(r);
    Vec4 out(q.w(), q.x(), q.y(), q.z());
    if (out[0] < 0) out = -out;
    return normalizedQuaternion(out);
}

Mat3
covarianceFrom(const Vec4 &rotation, const Vec3 &logScale) {
    const Mat3 r = rotationFromQuaternion(rotation);
    const Mat3 m = r * logScale.array().exp().matrix().asDiagonal();
    Mat3 sigma   = m * m.transpose();
    // exact symmetry
    sigma(1, 0) = sigma(0, 1);
    sigma(2, 0) = sigma(0, 2);
    sigma(2, 1) = sigma(1, 2);
    return sigma;
}

void
GaussianPrimitive::setBaseColor(const Vec3 &rgb) {
    sh[0] = (rgb - Vec3::Constant(0.5)) / kShC0;
}

Vec3
GaussianPrimitive::baseColor() const {
    return sh[0] * kShC0 + Vec3::Constant(0.5);
}

GaussianModel::GaussianModel(int shDegree) : mShDegree(shDegree) {
    if (shDegree < 0 || shDegree > kMaxShDegree) {
        throw ContractError("sh_degree must be in [0, 3], got " + std::to_string(shDegree));
    }
}

void
GaussianModel::add(const GaussianPrimitive &g) {
    mPrimitives.push_back(g);
    mGradAccum.push_back(0.0);
    mGradCount.push_back(0);
}

void
GaussianModel::reserve(std::size_t n) {
    mPrimitives.reserve(n);
    mGradAccum.reserve(n);
    mGradCount.reserve(n);
}

void
GaussianModel::clear() {
    mPrimitives.clear();
    mGradAccum.clear();
    mGradCount.clear();
}

void
GaussianModel::retain(const std::vector<bool> &keep) {
    if (keep.size() != mPrimitives.size()) {
        throw ContractError("retain: mask length does not match model size");
    }
    std::size_t out = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) {
            mPrimitives[out] = mPrimitives[i];
            mGradAccum[out]  = mGradAccum[i];
            mGradCount[out]  = mGradCount[i];
            ++out;
        }
    }
    mPrimitives.resize(out);
    mGradAccum.resize(out);
    mGradCount.resize(out);
}

void
GaussianModel::append(const GaussianModel &other) {
    if (other.mShDegree != mShDegree) {
        throw ContractError("append: sh_degree mismatch");
    }
    mPrimitives.insert(mPrimitives.end(), other.mPrimitives.begin(), other.mPrimitives.end());
    mGradAccum.insert(mGradAccum.end(), other.mGradAccum.begin(), other.mGradAccum.end());
    mGradCount.insert(mGradCount.end(), other.mGradCount.begin(), other.mGradCount.end());
}

void
GaussianModel::accumulateGrad(std::size_t i, double magnitude) {
    mGradAccum[i] += magnitude;
    mGradCount[i] += 1;
}

void
GaussianModel::resetBookkeeping() {
    std::fill(mGradAccum.begin(), mGradAccum.end(), 0.0);
    std::fill(mGradCount.begin(), mGradCount.end(), 0);
}

void
GaussianModel::sanitize() {
    const int k = shCoeffCount(mShDegree);
    for (std::size_t i = 0; i < mPrimitives.size(); ++i) {
        auto &g = mPrimitives[i];
        bool ok = g.position.allFinite() && g.rotation.allFinite() && g.log_scale.allFinite() &&
                  std::isfinite(g.opacity_logit) && g.log_scale.maxCoeff() < 700.0;
        for (int c = 0; c < k && ok; ++c) {
            ok = g.sh[c].allFinite();
        }
        if (!ok) {
            throw NumericError("non-finite parameter on primitive " + std::to_string(i));
        }
        g.rotation = normalizedQuaternion(g.rotation);
    }
}

bool
GaussianModel::identical(const GaussianModel &other) const {
    if (mShDegree != other.mShDegree || size() != other.size()) {
        return false;
    }
    const int k = shCoeffCount(mShDegree);
    auto same   = [](const auto &a, const auto &b) {
        return std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
    };
    for (std::size_t i = 0; i < size(); ++i) {
        const auto &a = mPrimitives[i];
        const auto &b = other.mPrimitives[i];
        if (!same(a.position, b.position) || !same(a.rotation, b.rotation) ||
            !same(a.log_scale, b.log_scale) ||
            std::memcmp(&a.opacity_logit, &b.opacity_logit, sizeof(double)) != 0 ||
            std::memcmp(&a.confidence, &b.confidence, sizeof(double)) != 0) {
            return false;
        }
        for (int c = 0; c < k; ++c) {
            if (!same(a.sh[c], b.sh[c])) {
                return false;
            }
        }
    }
    return true;
}

Vec3
GaussianModel::boundsMin() const {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    for (const auto &g : mPrimitives) {
        lo = lo.cwiseMin(g.position);
    }
    return lo;
}

Vec3
GaussianModel::boundsMax() const {
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());
    for (const auto &g : mPrimitives) {
        hi = hi.cwiseMax(g.position);
    }
    return hi;
}

Mat4
Camera::pose() const {
    Mat4 p                 = Mat4::Identity();
    p.topLeftCorner<3, 3>() = rotation;
    p.topRightCorner<3, 1>() = translation;
    return p;
}

void
Camera::setPose(const Mat4 &worldFromCamera) {
    rotation    = worldFromCamera.topLeftCorner<3, 3>();
    translation = worldFromCamera.topRightCorner<3, 1>();
}

Vec3
Camera::pixelRay(int col, int row) const {
    return Vec3((col + 0.5 - cx) / fx, (row + 0.5 - cy) / fy, 1.0);
}

void
Camera::validate() const {
    if (!(fx > 0) || !(fy > 0) || !std::isfinite(cx) || !std::isfinite(cy)) {
        throw ContractError("camera: invalid intrinsics");
    }
    if (width <= 0 || height <= 0) {
        throw ContractError("camera: non-positive image size");
    }
    if (!(near > 0) || !(near < far)) {
        throw ContractError("camera: require 0 < near < far");
    }
    if (!rotation.allFinite() || !translation.allFinite()) {
        throw ContractError("camera: non-finite pose");
    }
    const double orth = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (orth > 1e-6 || std::abs(rotation.determinant() - 1.0) > 1e-6) {
        throw ContractError("camera: pose rotation is not a proper rotation");
    }
}

void
Region::validate() const {
    if (!(min_x < max_x) || !(min_y < max_y)) {
        throw ContractError("region: require min < max on both axes");
    }
}

bool
pointInRegion(const Vec3 &p, const Region &r) {
    return p.x() >= r.min_x && p.x() < r.max_x && p.y() >= r.min_y && p.y() < r.max_y;
}

std::vector<bool>
pointsInRegion(std::span<const Vec3> points, const Region &r) {
    std::vector<bool> inside(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        inside[i] = pointInRegion(points[i], r);
    }
    return inside;
}

} // namespace dgtr
