// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dgtr/sh.hpp>

namespace dgtr::sh {

namespace {

// Value plus gradient with respect to (x, y, z).
struct Dual {
    double v = 0;
    Vec3 d   = Vec3::Zero();

    Dual() = default;
    Dual(double value) : v(value) {}
    Dual(double value, const Vec3 &grad) : v(value), d(grad) {}
};

inline Dual
operator+(const Dual &a, const Dual &b) {
    return {a.v + b.v, a.d + b.d};
}
inline Dual
operator-(const Dual &a, const Dual &b) {
    return {a.v - b.v, a.d - b.d};
}
inline Dual
operator*(const Dual &a, const Dual &b) {
    return {a.v * b.v, a.d * b.v + b.d * a.v};
}
inline Dual
operator*(double s, const Dual &a) {
    return {s * a.v, s * a.d};
}

constexpr double kC1    = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                           -1.0925484305920792, 0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                           0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                           -0.5900435899266435};

template <typename T>
void
basis(int degree, const T &x, const T &y, const T &z, T *out) {
    out[0] = T(kShC0);
    if (degree < 1) {
        return;
    }
    out[1] = -kC1 * y;
    out[2] = kC1 * z;
    out[3] = -kC1 * x;
    if (degree < 2) {
        return;
    }
    const T xx = x * x, yy = y * y, zz = z * z;
    const T xy = x * y, yz = y * z, xz = x * z;
    out[4] = kC2[0] * xy;
    out[5] = kC2[1] * yz;
    out[6] = kC2[2] * (2.0 * zz - xx - yy);
    out[7] = kC2[3] * xz;
    out[8] = kC2[4] * (xx - yy);
    if (degree < 3) {
        return;
    }
    out[9]  = kC3[0] * (y * (3.0 * xx - yy));
    out[10] = kC3[1] * (xy * z);
    out[11] = kC3[2] * (y * (4.0 * zz - xx - yy));
    out[12] = kC3[3] * (z * (2.0 * zz - 3.0 * xx - 3.0 * yy));
    out[13] = kC3[4] * (x * (4.0 * zz - xx - yy));
    out[14] = kC3[5] * (z * (xx - yy));
    out[15] = kC3[6] * (x * (xx - 3.0 * yy));
}

} // namespace

void
evalBasis(int degree, const Vec3 &dir, double *out) {
    basis<double>(degree, dir.x(), dir.y(), dir.z(), out);
}

void
evalBasisWithJacobian(int degree, const Vec3 &dir, double *out, Vec3 *jac) {
    Dual d[kMaxShCoeffs];
    basis<Dual>(degree, Dual(dir.x(), Vec3::UnitX()), Dual(dir.y(), Vec3::UnitY()),
                Dual(dir.z(), Vec3::UnitZ()), d);
    const int n = shCoeffCount(degree);
    for (int k = 0; k < n; ++k) {
        out[k] = d[k].v;
        jac[k] = d[k].d;
    }
}

Vec3
evalColor(int degree, const ShCoeffs &coeffs, const Vec3 &dir) {
    double y[kMaxShCoeffs];
    evalBasis(degree, dir, y);
    Vec3 c = Vec3::Zero();
    for (int k = 0; k < shCoeffCount(degree); ++k) {
        c += y[k] * coeffs[k];
    }
    return c;
}

} // namespace dgtr::sh
