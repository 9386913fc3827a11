// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dgtr/parallel.hpp>
#include <dgtr/raster.hpp>
#include <dgtr/sh.hpp>

#include <algorithm>
#include <cstring>
#include <numeric>
#include <string>

namespace dgtr {

namespace {

constexpr double kFootprintQ = kFootprintSigma * kFootprintSigma;

// Word-wise multiplicative hash; collisions only weaken the aux consistency check.
struct Fnv {
    std::uint64_t h = 1469598103934665603ull;

    void
    word(std::uint64_t w) {
        h = (h ^ w) * 0x100000001b3ull;
        h ^= h >> 29;
    }
    void
    bytes(const void *p, std::size_t n) {
        const auto *b = static_cast<const unsigned char *>(p);
        std::size_t i = 0;
        for (; i + 8 <= n; i += 8) {
            std::uint64_t w;
            std::memcpy(&w, b + i, 8);
            word(w);
        }
        for (; i < n; ++i) word(b[i]);
    }
    template <typename T>
    void
    value(const T &v) {
        bytes(&v, sizeof(T));
    }
};

bool
projectOne(const GaussianPrimitive &g, int shDegree, const Camera &cam, Projected2D &out) {
    const Vec3 pc  = cam.toCamera(g.position);
    const double z = pc.z();
    if (!(z > cam.near && z < cam.far)) {
        return false;
    }
    const Mat3 w     = cam.worldToCameraRotation();
    const Mat3 sigma = covarianceFrom(g.rotation, g.log_scale);
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / z, 0, -cam.fx * pc.x() / (z * z), 0, cam.fy / z, -cam.fy * pc.y() / (z * z);
    const Eigen::Matrix<double, 2, 3> t = j * w;
    Mat2 cov                            = t * sigma * t.transpose();
    cov(1, 0)                           = cov(0, 1);
    cov(0, 0) += kCov2dFloor;
    cov(1, 1) += kCov2dFloor;

    const double u  = cam.fx * pc.x() / z + cam.cx;
    const double v  = cam.fy * pc.y() / z + cam.cy;
    const double rx = kFootprintSigma * std::sqrt(cov(0, 0));
    const double ry = kFootprintSigma * std::sqrt(cov(1, 1));
    if (!std::isfinite(u) || !std::isfinite(v) || !std::isfinite(rx) || !std::isfinite(ry)) {
        return false;
    }
    // Pixel centers sit at integer + 0.5.
    const double cmin = std::ceil(u - rx - 0.5), cmax = std::floor(u + rx - 0.5);
    const double rmin = std::ceil(v - ry - 0.5), rmax = std::floor(v + ry - 0.5);
    if (cmax < 0 || rmax < 0 || cmin > cam.width - 1 || rmin > cam.height - 1 || cmin > cmax ||
        rmin > rmax) {
        return false;
    }
    out.col_min = static_cast<int>(std::max(cmin, 0.0));
    out.col_max = static_cast<int>(std::min(cmax, double(cam.width - 1)));
    out.row_min = static_cast<int>(std::max(rmin, 0.0));
    out.row_max = static_cast<int>(std::min(rmax, double(cam.height - 1)));

    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
    out.mean2d       = Vec2(u, v);
    out.cov2d        = cov;
    out.conic[0]     = cov(1, 1) / det;
    out.conic[1]     = -cov(0, 1) / det;
    out.conic[2]     = cov(0, 0) / det;
    out.view_depth   = z;
    out.opacity      = g.opacity();

    const Vec3 offset = g.position - cam.center();
    out.view_dir      = offset / offset.norm();
    const Vec3 raw    = sh::evalColor(shDegree, g.sh, out.view_dir) + Vec3::Constant(0.5);
    for (int c = 0; c < 3; ++c) {
        out.color_clamped[c] = raw[c] < 0.0;
        out.color[c]         = std::max(raw[c], 0.0);
    }
    return true;
}

// Mahalanobis^2 of pixel center (px, py) under the splat's cov2d.
inline double
footprintQ(const Projected2D &s, double px, double py, double &dx, double &dy) {
    dx = s.mean2d.x() - px;
    dy = s.mean2d.y() - py;
    return s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
}

// Per-entry 2D gradient record: mean (2), conic (3), opacity, color (3), depth.
constexpr int kRec = 10;

} // namespace

std::uint64_t
renderFingerprint(const GaussianModel &model, const Camera &cam) {
    Fnv f;
    const int k = shCoeffCount(model.shDegree());
    for (const auto &g : model.primitives()) {
        f.bytes(g.position.data(), sizeof(double) * 3);
        f.bytes(g.rotation.data(), sizeof(double) * 4);
        f.bytes(g.log_scale.data(), sizeof(double) * 3);
        f.value(g.opacity_logit);
        for (int c = 0; c < k; ++c) {
            f.bytes(g.sh[c].data(), sizeof(double) * 3);
        }
    }
    f.value(cam.fx);
    f.value(cam.fy);
    f.value(cam.cx);
    f.value(cam.cy);
    f.value(cam.width);
    f.value(cam.height);
    f.bytes(cam.rotation.data(), sizeof(double) * 9);
    f.bytes(cam.translation.data(), sizeof(double) * 3);
    f.value(cam.near);
    f.value(cam.far);
    return f.h;
}

std::vector<Projected2D>
project(const GaussianModel &model, const Camera &cam) {
    cam.validate();
    std::vector<Projected2D> out;
    out.reserve(model.size());
    Projected2D p;
    for (std::size_t i = 0; i < model.size(); ++i) {
        if (projectOne(model[i], model.shDegree(), cam, p)) {
            p.index = static_cast<std::uint32_t>(i);
            out.push_back(p);
        }
    }
    return out;
}

RenderOutput
render(const GaussianModel &model, const Camera &cam, const RenderOptions &opts) {
    cam.validate();
    if ((opts.width != 0 && opts.width != cam.width) ||
        (opts.height != 0 && opts.height != cam.height)) {
        throw ContractError("render: camera is " + std::to_string(cam.width) + "x" +
                            std::to_string(cam.height) + " but buffers are " +
                            std::to_string(opts.width) + "x" + std::to_string(opts.height));
    }
    const int width = cam.width, height = cam.height;

    RenderOutput out;
    out.color = ImageBuffer(width, height);
    out.depth = DepthMap(width, height);
    out.alpha = AlphaMap(width, height);

    RenderAux &aux      = out.aux;
    aux.width           = width;
    aux.height          = height;
    aux.primitive_count = model.size();
    aux.fingerprint     = renderFingerprint(model, cam);
    aux.background      = opts.background;
    aux.splats          = project(model, cam);
    aux.tiles_x         = (width + kTileSize - 1) / kTileSize;
    aux.tiles_y         = (height + kTileSize - 1) / kTileSize;
    const std::size_t numTiles = static_cast<std::size_t>(aux.tiles_x) * aux.tiles_y;

    // Global front-to-back order, then stable bucketing into tiles.
    const auto &splats = aux.splats;
    std::vector<std::uint32_t> order(splats.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (splats[a].view_depth != splats[b].view_depth) {
            return splats[a].view_depth < splats[b].view_depth;
        }
        return splats[a].index < splats[b].index;
    });
    std::vector<std::uint32_t> counts(numTiles + 1, 0);
    auto forTiles = [&](const Projected2D &s, auto &&fn) {
        for (int ty = s.row_min / kTileSize; ty <= s.row_max / kTileSize; ++ty) {
            for (int tx = s.col_min / kTileSize; tx <= s.col_max / kTileSize; ++tx) {
                fn(static_cast<std::size_t>(ty) * aux.tiles_x + tx);
            }
        }
    };
    for (const auto &s : splats) {
        forTiles(s, [&](std::size_t t) { ++counts[t + 1]; });
    }
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    aux.tile_offsets = counts;
    aux.tile_entries.assign(counts.back(), 0);
    std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
    for (std::uint32_t si : order) {
        forTiles(splats[si], [&](std::size_t t) { aux.tile_entries[cursor[t]++] = si; });
    }

    aux.pixel_end.assign(static_cast<std::size_t>(width) * height, 0);
    aux.pixel_final_t.assign(static_cast<std::size_t>(width) * height, 1.0);

    parallelFor(numTiles, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % aux.tiles_x);
        const int ty = static_cast<int>(tile / aux.tiles_x);
        const std::uint32_t begin = aux.tile_offsets[tile];
        const std::uint32_t end   = aux.tile_offsets[tile + 1];
        for (int row = ty * kTileSize; row < std::min(height, (ty + 1) * kTileSize); ++row) {
            for (int col = tx * kTileSize; col < std::min(width, (tx + 1) * kTileSize); ++col) {
                const double px = col + 0.5, py = row + 0.5;
                double t        = 1.0;
                Vec3 c          = Vec3::Zero();
                double d        = 0.0;
                std::uint32_t e = begin;
                for (; e < end; ++e) {
                    const Projected2D &s = splats[aux.tile_entries[e]];
                    double dx, dy;
                    const double q = footprintQ(s, px, py, dx, dy);
                    if (q > kFootprintQ) {
                        continue;
                    }
                    const double alpha = std::min(kAlphaMax, s.opacity * std::exp(-0.5 * q));
                    if (alpha < kAlphaMin) {
                        continue;
                    }
                    const double nextT = t * (1.0 - alpha);
                    if (nextT < kTransmittanceStop) {
                        break;
                    }
                    const double w = alpha * t;
                    c += w * s.color;
                    d += w * s.view_depth;
                    t = nextT;
                }
                const std::size_t pix = static_cast<std::size_t>(row) * width + col;
                aux.pixel_end[pix]     = e - begin;
                aux.pixel_final_t[pix] = t;
                c += t * opts.background;
                for (int ch = 0; ch < 3; ++ch) {
                    out.color.at(row, col, ch) = c[ch];
                }
                out.depth.at(row, col) = d;
                out.alpha.at(row, col) = 1.0 - t;
            }
        }
    });
    return out;
}

bool
ParamGradients::allFinite() const {
    for (const auto &g : grads) {
        if (!g.position.allFinite() || !g.rotation.allFinite() || !g.log_scale.allFinite() ||
            !std::isfinite(g.opacity_logit)) {
            return false;
        }
        for (const auto &c : g.sh) {
            if (!c.allFinite()) {
                return false;
            }
        }
    }
    return true;
}

void
ParamGradients::add(const ParamGradients &other) {
    if (other.size() != size()) {
        throw ContractError("ParamGradients::add: size mismatch");
    }
    for (std::size_t i = 0; i < size(); ++i) {
        auto &a       = grads[i];
        const auto &b = other.grads[i];
        a.position += b.position;
        a.rotation += b.rotation;
        a.log_scale += b.log_scale;
        a.opacity_logit += b.opacity_logit;
        for (int c = 0; c < kMaxShCoeffs; ++c) {
            a.sh[c] += b.sh[c];
        }
        screen_grad_norm[i] += other.screen_grad_norm[i];
        visible[i] = visible[i] | other.visible[i];
    }
}

namespace {

// Chain rule from 2D splat gradients to the primitive's 3D parameters.
void
backwardPrimitive(const GaussianPrimitive &g, int shDegree, const Camera &cam,
                  const Projected2D &s, const double *rec, PrimitiveGrad &out) {
    const Vec2 dMean(rec[0], rec[1]);
    const double dConicA = rec[2], dConicB = rec[3], dConicC = rec[4];
    const double dOpacity = rec[5];
    const Vec3 dColor(rec[6], rec[7], rec[8]);
    const double dDepth = rec[9];

    // Opacity.
    out.opacity_logit += dOpacity * s.opacity * (1.0 - s.opacity);

    // SH color and the view direction it depends on.
    double basis[kMaxShCoeffs];
    Vec3 basisJac[kMaxShCoeffs];
    sh::evalBasisWithJacobian(shDegree, s.view_dir, basis, basisJac);
    const int k = shCoeffCount(shDegree);
    Vec3 dColorEff = dColor;
    for (int c = 0; c < 3; ++c) {
        if (s.color_clamped[c]) {
            dColorEff[c] = 0.0;
        }
    }
    Vec3 dDir = Vec3::Zero();
    for (int i = 0; i < k; ++i) {
        out.sh[i] += basis[i] * dColorEff;
        dDir += basisJac[i] * g.sh[i].dot(dColorEff);
    }
    const Vec3 offset  = g.position - cam.center();
    const double dist  = offset.norm();
    Vec3 dPosition     = (dDir - s.view_dir * s.view_dir.dot(dDir)) / dist;

    // conic = inverse(cov2d): dL/dcov2d = -K G K with G the symmetric gradient on K.
    Mat2 gK;
    gK << dConicA, 0.5 * dConicB, 0.5 * dConicB, dConicC;
    Mat2 kMat;
    kMat << s.conic[0], s.conic[1], s.conic[1], s.conic[2];
    const Mat2 gCov2d = -kMat * gK * kMat;

    // cov2d = T Sigma T^T + floor, T = J W.
    const Mat3 w     = cam.worldToCameraRotation();
    const Vec3 pc    = cam.toCamera(g.position);
    const double z   = pc.z();
    const double fx  = cam.fx, fy = cam.fy;
    Eigen::Matrix<double, 2, 3> j;
    j << fx / z, 0, -fx * pc.x() / (z * z), 0, fy / z, -fy * pc.y() / (z * z);
    const Eigen::Matrix<double, 2, 3> t = j * w;
    const Mat3 rot   = rotationFromQuaternion(g.rotation);
    const Vec3 scale = g.log_scale.array().exp();
    const Mat3 m     = rot * scale.asDiagonal();
    const Mat3 sigma = m * m.transpose();

    const Mat3 gSigma                    = t.transpose() * gCov2d * t;
    const Eigen::Matrix<double, 2, 3> gT = 2.0 * gCov2d * t * sigma;
    const Eigen::Matrix<double, 2, 3> gJ = gT * w.transpose();

    // J and the projected mean as functions of the camera-space point.
    Vec3 dPc = Vec3::Zero();
    const double z2 = z * z, z3 = z2 * z;
    dPc.x() += gJ(0, 2) * (-fx / z2);
    dPc.y() += gJ(1, 2) * (-fy / z2);
    dPc.z() += gJ(0, 0) * (-fx / z2) + gJ(0, 2) * (2.0 * fx * pc.x() / z3) +
               gJ(1, 1) * (-fy / z2) + gJ(1, 2) * (2.0 * fy * pc.y() / z3);
    dPc.x() += dMean.x() * fx / z;
    dPc.y() += dMean.y() * fy / z;
    dPc.z() += dMean.x() * (-fx * pc.x() / z2) + dMean.y() * (-fy * pc.y() / z2);
    dPc.z() += dDepth;
    dPosition += w.transpose() * dPc;
    out.position += dPosition;

    // Sigma = M M^T, M = R diag(s).
    const Mat3 gM = 2.0 * gSigma * m;
    Vec3 dScale;
    for (int c = 0; c < 3; ++c) {
        dScale[c] = gM.col(c).dot(rot.col(c));
    }
    out.log_scale += dScale.cwiseProduct(scale);
    const Mat3 gR = gM * scale.asDiagonal();

    const Vec4 q   = normalizedQuaternion(g.rotation);
    const double qw = q[0], qx = q[1], qy = q[2], qz = q[3];
    Vec4 dq;
    dq[0] = -2 * qz * gR(0, 1) + 2 * qy * gR(0, 2) + 2 * qz * gR(1, 0) - 2 * qx * gR(1, 2) -
            2 * qy * gR(2, 0) + 2 * qx * gR(2, 1);
    dq[1] = 2 * qy * gR(0, 1) + 2 * qz * gR(0, 2) + 2 * qy * gR(1, 0) - 4 * qx * gR(1, 1) -
            2 * qw * gR(1, 2) + 2 * qz * gR(2, 0) + 2 * qw * gR(2, 1) - 4 * qx * gR(2, 2);
    dq[2] = -4 * qy * gR(0, 0) + 2 * qx * gR(0, 1) + 2 * qw * gR(0, 2) + 2 * qx * gR(1, 0) +
            2 * qz * gR(1, 2) - 2 * qw * gR(2, 0) + 2 * qz * gR(2, 1) - 4 * qy * gR(2, 2);
    dq[3] = -4 * qz * gR(0, 0) - 2 * qw * gR(0, 1) + 2 * qx * gR(0, 2) + 2 * qw * gR(1, 0) -
            4 * qz * gR(1, 1) + 2 * qy * gR(1, 2) + 2 * qx * gR(2, 0) + 2 * qy * gR(2, 1);
    const double qn = g.rotation.norm();
    out.rotation += (dq - q * q.dot(dq)) / qn;
}

} // namespace

ParamGradients
renderBackward(const GaussianModel &model, const Camera &cam, const ImageBuffer &gradColor,
               const DepthMap &gradDepth, const RenderAux &aux) {
    if (aux.primitive_count != model.size() || aux.width != cam.width ||
        aux.height != cam.height || aux.fingerprint != renderFingerprint(model, cam)) {
        throw ContractError("renderBackward: aux does not match this model and camera");
    }
    if (gradColor.width != cam.width || gradColor.height != cam.height ||
        gradDepth.width != cam.width || gradDepth.height != cam.height) {
        throw ContractError("renderBackward: upstream gradient dimensions mismatch");
    }
    const int width   = aux.width;
    const int height  = aux.height;
    const auto &splats = aux.splats;
    const std::size_t numTiles = static_cast<std::size_t>(aux.tiles_x) * aux.tiles_y;

    std::vector<double> records(aux.tile_entries.size() * kRec, 0.0);

    parallelFor(numTiles, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % aux.tiles_x);
        const int ty = static_cast<int>(tile / aux.tiles_x);
        const std::uint32_t begin = aux.tile_offsets[tile];
        for (int row = ty * kTileSize; row < std::min(height, (ty + 1) * kTileSize); ++row) {
            for (int col = tx * kTileSize; col < std::min(width, (tx + 1) * kTileSize); ++col) {
                const std::size_t pix = static_cast<std::size_t>(row) * width + col;
                const Vec3 dC(gradColor.at(row, col, 0), gradColor.at(row, col, 1),
                              gradColor.at(row, col, 2));
                const double dD = gradDepth.at(row, col);
                if (dC.isZero(0.0) && dD == 0.0) {
                    continue;
                }
                const double px = col + 0.5, py = row + 0.5;
                const double finalT = aux.pixel_final_t[pix];
                const double bgTerm = aux.background.dot(dC);
                double t            = finalT;
                Vec3 behindColor    = Vec3::Zero();
                double behindDepth  = 0.0;
                double lastAlpha    = 0.0;
                Vec3 lastColor      = Vec3::Zero();
                double lastDepth    = 0.0;
                for (std::uint32_t e = begin + aux.pixel_end[pix]; e-- > begin;) {
                    const Projected2D &s = splats[aux.tile_entries[e]];
                    double dx, dy;
                    const double q = footprintQ(s, px, py, dx, dy);
                    if (q > kFootprintQ) {
                        continue;
                    }
                    const double gauss   = std::exp(-0.5 * q);
                    const double rawA    = s.opacity * gauss;
                    const double alpha   = std::min(kAlphaMax, rawA);
                    if (alpha < kAlphaMin) {
                        continue;
                    }
                    t              = t / (1.0 - alpha);
                    const double w = alpha * t;
                    double *r      = &records[e * kRec];
                    r[6] += w * dC[0];
                    r[7] += w * dC[1];
                    r[8] += w * dC[2];
                    r[9] += w * dD;

                    behindColor = lastAlpha * lastColor + (1.0 - lastAlpha) * behindColor;
                    behindDepth = lastAlpha * lastDepth + (1.0 - lastAlpha) * behindDepth;
                    const double dAlpha = t * ((s.color - behindColor).dot(dC) +
                                               (s.view_depth - behindDepth) * dD) -
                                          finalT / (1.0 - alpha) * bgTerm;
                    lastAlpha = alpha;
                    lastColor = s.color;
                    lastDepth = s.view_depth;

                    if (rawA >= kAlphaMax) {
                        continue;
                    }
                    const double dPower = dAlpha * alpha;
                    r[5] += dAlpha * gauss;
                    r[0] += dPower * -(s.conic[0] * dx + s.conic[1] * dy);
                    r[1] += dPower * -(s.conic[1] * dx + s.conic[2] * dy);
                    r[2] += dPower * -0.5 * dx * dx;
                    r[3] += dPower * -dx * dy;
                    r[4] += dPower * -0.5 * dy * dy;
                }
            }
        }
    });

    // Fixed-order reduction (tile order) keeps results independent of scheduling.
    std::vector<double> perSplat(splats.size() * kRec, 0.0);
    for (std::size_t e = 0; e < aux.tile_entries.size(); ++e) {
        double *dst       = &perSplat[aux.tile_entries[e] * kRec];
        const double *src = &records[e * kRec];
        for (int k = 0; k < kRec; ++k) {
            dst[k] += src[k];
        }
    }

    ParamGradients grads(model.size());
    parallelFor(splats.size(), [&](std::size_t si) {
        const Projected2D &s = splats[si];
        const double *rec    = &perSplat[si * kRec];
        backwardPrimitive(model[s.index], model.shDegree(), cam, s, rec, grads.grads[s.index]);
        const double ndcX = rec[0] * 0.5 * width;
        const double ndcY = rec[1] * 0.5 * height;
        grads.screen_grad_norm[s.index] = std::sqrt(ndcX * ndcX + ndcY * ndcY);
        grads.visible[s.index]          = 1;
    });
    return grads;
}

ParamGradients
freezeShape(ParamGradients grads) {
    for (auto &g : grads.grads) {
        g.rotation.setZero();
        g.log_scale.setZero();
    }
    return grads;
}

} // namespace dgtr
