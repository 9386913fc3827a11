// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Real spherical-harmonics basis up to degree 3 (3DGS constants).
//
#pragma once

#include <dgtr/core.hpp>

namespace dgtr::sh {

// Basis values Y_k(dir) for k < shCoeffCount(degree). dir must be unit length.
void evalBasis(int degree, const Vec3 &dir, double *out);

// Basis values and their partial derivatives with respect to the (unit) direction
// components, treating x, y, z as independent. jac[k] = dY_k/d(x,y,z).
void evalBasisWithJacobian(int degree, const Vec3 &dir, double *out, Vec3 *jac);

// View-dependent color before the 0.5 offset and clamp.
Vec3 evalColor(int degree, const ShCoeffs &coeffs, const Vec3 &dir);

} // namespace dgtr::sh
