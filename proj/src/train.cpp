// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/data.hpp>
#include <dgtr/train.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <string>

namespace dgtr {

LearningRates
LearningRates::scaled(double factor) const {
    LearningRates r = *this;
    r.position_init *= factor;
    r.position_final *= factor;
    r.rotation *= factor;
    r.log_scale *= factor;
    r.opacity *= factor;
    r.sh *= factor;
    return r;
}

namespace {

template <typename T>
void
adamUpdate(T &param, const T &grad, T &m, T &v, double lr, double bc1, double bc2) {
    using B  = AdamOptimizer;
    m        = B::kBeta1 * m + (1.0 - B::kBeta1) * grad;
    v        = B::kBeta2 * v + (1.0 - B::kBeta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + B::kEps);
}

void
adamUpdate(double &param, double grad, double &m, double &v, double lr, double bc1, double bc2) {
    using B = AdamOptimizer;
    m       = B::kBeta1 * m + (1.0 - B::kBeta1) * grad;
    v       = B::kBeta2 * v + (1.0 - B::kBeta2) * grad * grad;
    param -= lr * (m / bc1) / (std::sqrt(v / bc2) + B::kEps);
}

} // namespace

void
AdamOptimizer::step(GaussianModel &model, const ParamGradients &grads, const LearningRates &lr, double positionLr,
                    bool freezeShape) {
    if (model.size() != mM.size() || grads.size() != mM.size()) {
        throw ContractError("adam: optimizer, model and gradients disagree on primitive count");
    }
    ++mStep;
    const double bc1 = 1.0 - std::pow(kBeta1, mStep);
    const double bc2 = 1.0 - std::pow(kBeta2, mStep);
    const int nsh    = shCoeffCount(model.shDegree());
    for (std::size_t i = 0; i < model.size(); ++i) {
        auto &g        = model[i];
        const auto &dg = grads.grads[i];
        auto &m = mM[i], &v = mV[i];
        adamUpdate(g.position, dg.position, m.position, v.position, positionLr, bc1, bc2);
        adamUpdate(g.opacity_logit, dg.opacity_logit, m.opacity_logit, v.opacity_logit, lr.opacity, bc1, bc2);
        for (int c = 0; c < nsh; ++c) adamUpdate(g.sh[c], dg.sh[c], m.sh[c], v.sh[c], lr.sh, bc1, bc2);
        if (!freezeShape) {
            adamUpdate(g.rotation, dg.rotation, m.rotation, v.rotation, lr.rotation, bc1, bc2);
            adamUpdate(g.log_scale, dg.log_scale, m.log_scale, v.log_scale, lr.log_scale, bc1, bc2);
            g.rotation = normalizedQuaternion(g.rotation);
        }
        if (!g.position.allFinite() || !g.rotation.allFinite() || !g.log_scale.allFinite() ||
            !std::isfinite(g.opacity_logit)) {
            throw NumericError("adam: non-finite parameter on primitive " + std::to_string(i));
        }
    }
}

void
AdamOptimizer::retain(const std::vector<bool> &keep) {
    if (keep.size() != mM.size()) throw ContractError("adam: mask size mismatch");
    std::size_t w = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) continue;
        mM[w] = mM[i];
        mV[w] = mV[i];
        ++w;
    }
    mM.resize(w);
    mV.resize(w);
}

void
AdamOptimizer::append(std::size_t n) {
    mM.resize(mM.size() + n);
    mV.resize(mV.size() + n);
}

// ---------------------------------------------------------------------------

DensifyStats
densifyAndPrune(GaussianModel &model, const DensifyThresholds &th, double sceneExtent, std::uint64_t seed,
                AdamOptimizer *opt) {
    if (opt && opt->size() != model.size()) throw ContractError("densify: optimizer does not match model");
    DensifyStats stats;
    const std::size_t n = model.size();
    const auto accum    = model.gradAccum();
    const auto count    = model.gradCount();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nrm(0.0, 1.0);
    const double logSplitDiv = std::log(th.split_factor);

    std::vector<bool> keep(n, true);
    GaussianModel born(model.shDegree());
    for (std::size_t i = 0; i < n; ++i) {
        if (count[i] == 0) continue;
        if (accum[i] / count[i] <= th.grad) continue;
        if (th.max_primitives && n + born.size() >= th.max_primitives) break;
        const GaussianPrimitive &g = model[i];
        if (std::exp(g.log_scale.maxCoeff()) <= th.split_extent * sceneExtent) {
            born.add(g);
            ++stats.cloned;
        } else {
            const Mat3 R     = rotationFromQuaternion(g.rotation);
            const Vec3 scale = g.scale();
            // Antithetic pair: the children straddle the parent mean.
            const Vec3 offset = R * scale.cwiseProduct(Vec3(nrm(rng), nrm(rng), nrm(rng)));
            for (int k = 0; k < 2; ++k) {
                GaussianPrimitive child = g;
                child.position += k == 0 ? offset : Vec3(-offset);
                child.log_scale.array() -= logSplitDiv;
                born.add(child);
            }
            keep[i] = false;
            ++stats.split;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i] && model[i].opacity() < th.min_opacity) {
            keep[i] = false;
            ++stats.pruned;
        }
    }
    std::vector<bool> keepBorn(born.size());
    for (std::size_t k = 0; k < born.size(); ++k) keepBorn[k] = born[k].opacity() >= th.min_opacity;
    born.retain(keepBorn);

    model.retain(keep);
    model.append(born);
    model.resetBookkeeping();
    if (opt) {
        opt->retain(keep);
        opt->append(born.size());
    }
    return stats;
}

// ---------------------------------------------------------------------------

void
DeviceDataset::validate() const {
    if (cameras.empty()) throw ContractError("device dataset is empty");
    if (images.size() != cameras.size() || depths.size() != cameras.size()) {
        throw ContractError("device dataset: camera, image and depth counts differ");
    }
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        cameras[i].validate();
        const auto &c = cameras[i];
        if (images[i].width != c.width || images[i].height != c.height || depths[i].width != c.width ||
            depths[i].height != c.height) {
            throw ContractError("device dataset: view " + std::to_string(c.id) + " does not match its camera");
        }
    }
}

DeviceDataset
loadDeviceDataset(const std::filesystem::path &sceneDir, int device) {
    DeviceDataset ds;
    ds.cameras = readCamerasTxt(deviceDir(sceneDir, device) / "cameras.txt");
    for (const auto &c : ds.cameras) {
        ds.images.push_back(loadImagePfm(imagePath(sceneDir, c.id)));
        ds.depths.push_back(loadDepthPfm(depthPath(sceneDir, c.id)));
    }
    ds.validate();
    return ds;
}

int
TrainConfig::effectiveDensifyStop() const {
    return densify_stop_step < 0 ? steps / 2 : densify_stop_step;
}

void
TrainConfig::validate() const {
    if (steps < 1) throw ContractError("train: steps must be >= 1");
    if (densify_interval < 1) throw ContractError("train: densify interval must be >= 1");
    if (scene_extent < 0) throw ContractError("train: scene extent must be non-negative");
    weights.validate();
}

double
cameraExtent(std::span<const Camera> cams) {
    if (cams.empty()) return 1.0;
    Vec3 mean = Vec3::Zero();
    for (const auto &c : cams) mean += c.translation;
    mean /= static_cast<double>(cams.size());
    double r = 0;
    for (const auto &c : cams) r = std::max(r, (c.translation - mean).norm());
    return r > 1e-9 ? 1.1 * r : 1.0;
}

TrainResult
trainDevice(GaussianModel model, const DeviceDataset &ds, const TrainConfig &cfg, const StepCallback &onStep) {
    cfg.validate();
    ds.validate();
    const double extent   = cfg.scene_extent > 0 ? cfg.scene_extent : cameraExtent(ds.cameras);
    const int densifyStop = cfg.effectiveDensifyStop();
    const double logP0    = std::log(cfg.lr.position_init * extent);
    const double logP1    = std::log(cfg.lr.position_final * extent);

    TrainResult res;
    res.trace.reserve(cfg.steps);
    AdamOptimizer opt(model.size());
    RenderOptions ro;
    ro.background = cfg.background;
    model.resetBookkeeping();

    for (int step = 0; step < cfg.steps; ++step) {
        const int view    = step % static_cast<int>(ds.size());
        const Camera &cam = ds.cameras[view];
        const auto out    = render(model, cam, ro);
        const auto loss   = totalLoss(ds.images[view], out.color, out.depth, ds.depths[view], cfg.weights, &out.alpha);
        if (!std::isfinite(loss.value)) {
            throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (camera " +
                               std::to_string(cam.id) + ")");
        }
        auto grads = renderBackward(model, cam, loss.grad_color, loss.grad_depth, out.aux);
        if (cfg.shape_freeze) grads = freezeShape(std::move(grads));
        for (std::size_t i = 0; i < model.size(); ++i) {
            if (grads.visible[i]) model.accumulateGrad(i, grads.screen_grad_norm[i]);
        }
        const double f = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 0.0;
        opt.step(model, grads, cfg.lr, std::exp((1.0 - f) * logP0 + f * logP1), cfg.shape_freeze);

        const int done = step + 1;
        if (done % cfg.densify_interval == 0 && done <= densifyStop) {
            res.densify_events.push_back(
                densifyAndPrune(model, cfg.densify, extent, cfg.seed * 0x9E3779B97F4A7C15ull + done, &opt));
        }
        res.trace.push_back({done, cam.id, loss.value, loss.l1, loss.dssim, loss.depth, model.size()});
        if (onStep) onStep(done, model);
    }
    res.model = std::move(model);
    return res;
}

void
writeTrace(const std::filesystem::path &path, const std::vector<TraceEntry> &trace) {
    std::ofstream out(path);
    if (!out) throw FormatError(FormatErrorCode::Io, "cannot write " + path.string());
    out << "step\tcamera\tloss\tl1\tdssim\tdepth\tprimitives\n" << std::setprecision(9);
    for (const auto &e : trace) {
        out << e.step << '\t' << e.view << '\t' << e.loss << '\t' << e.l1 << '\t' << e.dssim << '\t' << e.depth
            << '\t' << e.primitives << '\n';
    }
    if (!out) throw FormatError(FormatErrorCode::Io, "failed writing " + path.string());
}

} // namespace dgtr
