// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/loss.hpp>

#include <array>
#include <string>

namespace dgtr {

namespace {

template <int C>
void
requireSameShape(const Plane<C> &a, const Plane<C> &b, const char *what) {
    if (!a.sameShape(b) || a.data.size() != b.data.size()) {
        throw ContractError(std::string(what) + ": buffer dimensions differ (" + std::to_string(a.width) +
                            "x" + std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                            std::to_string(b.height) + ")");
    }
}

using Kernel = std::array<double, kSsimWindow>;

const Kernel &
gaussianKernel() {
    static const Kernel k = [] {
        Kernel out{};
        double sum = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            out[i]         = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
            sum += out[i];
        }
        for (double &v : out) v /= sum;
        return out;
    }();
    return k;
}

// Separable "same" filtering of a single-channel W x H field with zero padding.
// The kernel is symmetric, so this operator is its own adjoint.
std::vector<double>
filter(const std::vector<double> &src, int w, int h) {
    const Kernel &k = gaussianKernel();
    const int r     = kSsimWindow / 2;
    std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int t = -r; t <= r; ++t) {
                const int xx = x + t;
                if (xx >= 0 && xx < w) s += k[t + r] * src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int t = -r; t <= r; ++t) {
                const int yy = y + t;
                if (yy >= 0 && yy < h) s += k[t + r] * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    return out;
}

// Mean SSIM of x (target) and y (pred); fills d mean / d y when grad is non-null.
double
ssimImpl(const ImageBuffer &x, const ImageBuffer &y, ImageBuffer *grad) {
    const int w = x.width, h = x.height;
    if (w < kSsimWindow || h < kSsimWindow) {
        throw ContractError("ssim: images must be at least 11x11");
    }
    const std::size_t n = static_cast<std::size_t>(w) * h;
    const double norm   = 1.0 / static_cast<double>(n * 3);
    double total        = 0.0;
    std::vector<double> cx(n), cy(n), cxx(n), cyy(n), cxy(n);
    for (int ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            const double a = x.data[i * 3 + ch], b = y.data[i * 3 + ch];
            cx[i]  = a;
            cy[i]  = b;
            cxx[i] = a * a;
            cyy[i] = b * b;
            cxy[i] = a * b;
        }
        const auto mx = filter(cx, w, h), my = filter(cy, w, h);
        const auto mxx = filter(cxx, w, h), myy = filter(cyy, w, h), mxy = filter(cxy, w, h);
        std::vector<double> dMy, dMyy, dMxy;
        if (grad) {
            dMy.resize(n);
            dMyy.resize(n);
            dMxy.resize(n);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double ux = mx[i], uy = my[i];
            const double vx = mxx[i] - ux * ux, vy = myy[i] - uy * uy, cov = mxy[i] - ux * uy;
            const double a1 = 2 * ux * uy + kSsimC1, a2 = 2 * cov + kSsimC2;
            const double b1 = ux * ux + uy * uy + kSsimC1, b2 = vx + vy + kSsimC2;
            const double s  = (a1 * a2) / (b1 * b2);
            total += s;
            if (grad) {
                dMy[i]  = norm * s * (2 * ux / a1 - 2 * ux / a2 - 2 * uy / b1 + 2 * uy / b2);
                dMyy[i] = -norm * s / b2;
                dMxy[i] = norm * 2 * s / a2;
            }
        }
        if (grad) {
            const auto gMy = filter(dMy, w, h), gMyy = filter(dMyy, w, h), gMxy = filter(dMxy, w, h);
            for (std::size_t i = 0; i < n; ++i) {
                grad->data[i * 3 + ch] = gMy[i] + 2 * cy[i] * gMyy[i] + cx[i] * gMxy[i];
            }
        }
    }
    return total * norm;
}

} // namespace

void
LossWeights::validate() const {
    if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0)) {
        throw ContractError("loss weights must be non-negative");
    }
}

ImageLoss
l1Loss(const ImageBuffer &target, const ImageBuffer &pred) {
    requireSameShape(target, pred, "l1_loss");
    ImageLoss out{0.0, ImageBuffer(pred.width, pred.height)};
    if (pred.data.empty()) return out;
    const double inv = 1.0 / static_cast<double>(pred.data.size());
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - target.data[i];
        out.value += std::abs(d);
        out.grad.data[i] = d > 0 ? inv : (d < 0 ? -inv : 0.0);
    }
    out.value *= inv;
    return out;
}

double
ssim(const ImageBuffer &a, const ImageBuffer &b) {
    requireSameShape(a, b, "ssim");
    return ssimImpl(a, b, nullptr);
}

ImageLoss
ssimLoss(const ImageBuffer &target, const ImageBuffer &pred) {
    requireSameShape(target, pred, "ssim");
    ImageLoss out{0.0, ImageBuffer(pred.width, pred.height)};
    out.value = 1.0 - ssimImpl(target, pred, &out.grad);
    for (double &g : out.grad.data) g = -g;
    return out;
}

DepthLoss
pearsonDepthLoss(const DepthMap &rendered, const DepthMap &estimated, const AlphaMap *alpha) {
    requireSameShape(rendered, estimated, "pearson_depth_loss");
    if (alpha) requireSameShape(rendered, *alpha, "pearson_depth_loss mask");
    DepthLoss out{0.0, DepthMap(rendered.width, rendered.height)};
    const std::size_t n = rendered.data.size();
    auto used = [&](std::size_t i) { return !alpha || alpha->data[i] >= kPearsonAlphaMask; };

    double count = 0, sx = 0, sy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!used(i)) continue;
        count += 1;
        sx += rendered.data[i];
        sy += estimated.data[i];
    }
    if (count < 2) return out;
    const double mx = sx / count, my = sy / count;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!used(i)) continue;
        const double dx = rendered.data[i] - mx, dy = estimated.data[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx / count <= kPearsonMinVariance || syy / count <= kPearsonMinVariance) return out;
    const double denom = std::sqrt(sxx * syy);
    const double rho   = sxy / denom;
    out.value          = 1.0 - rho;
    for (std::size_t i = 0; i < n; ++i) {
        if (!used(i)) continue;
        const double dx = rendered.data[i] - mx, dy = estimated.data[i] - my;
        // Centering terms vanish because the deviations sum to zero.
        out.grad.data[i] = -(dy / denom - rho * dx / sxx);
    }
    return out;
}

TotalLoss
totalLoss(const ImageBuffer &target, const ImageBuffer &pred, const DepthMap &rendered,
          const DepthMap &estimated, const LossWeights &w, const AlphaMap *alpha) {
    w.validate();
    const ImageLoss l1 = l1Loss(target, pred);
    const ImageLoss ds = ssimLoss(target, pred);
    TotalLoss out;
    out.l1         = l1.value;
    out.dssim      = ds.value;
    out.grad_color = ImageBuffer(pred.width, pred.height);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        out.grad_color.data[i] = w.lambda1 * l1.grad.data[i] + w.lambda2 * ds.grad.data[i];
    }
    out.grad_depth = DepthMap(rendered.width, rendered.height);
    if (w.lambda3 > 0) {
        const DepthLoss dl = pearsonDepthLoss(rendered, estimated, alpha);
        out.depth          = dl.value;
        for (std::size_t i = 0; i < dl.grad.data.size(); ++i) {
            out.grad_depth.data[i] = w.lambda3 * dl.grad.data[i];
        }
    } else {
        requireSameShape(rendered, estimated, "pearson_depth_loss");
    }
    out.value = w.lambda1 * out.l1 + w.lambda2 * out.dssim + w.lambda3 * out.depth;
    return out;
}

ImageLoss
distillLoss(const ImageBuffer &pseudo, const ImageBuffer &pred, const LossWeights &w) {
    LossWeights photo = w;
    photo.lambda3     = 0.0;
    photo.validate();
    const ImageLoss l1 = l1Loss(pseudo, pred);
    const ImageLoss ds = ssimLoss(pseudo, pred);
    ImageLoss out{photo.lambda1 * l1.value + photo.lambda2 * ds.value, ImageBuffer(pred.width, pred.height)};
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        out.grad.data[i] = photo.lambda1 * l1.grad.data[i] + photo.lambda2 * ds.grad.data[i];
    }
    return out;
}

double
psnr(const ImageBuffer &a, const ImageBuffer &b) {
    requireSameShape(a, b, "psnr");
    if (a.data.empty()) throw ContractError("psnr: empty images");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return kPsnrInfinity;
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace dgtr
