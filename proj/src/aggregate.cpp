// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/aggregate.hpp>
#include <dgtr/parallel.hpp>
#include <dgtr/raster.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace dgtr {

GaussianModel
filterByRegion(const GaussianModel &model, const Region &region) {
    std::vector<bool> keep(model.size());
    for (std::size_t i = 0; i < model.size(); ++i) keep[i] = pointInRegion(model[i].position, region);
    GaussianModel out = model;
    out.retain(keep);
    out.resetBookkeeping();
    return out;
}

GaussianModel
merge(std::span<const GaussianModel> models) {
    if (models.empty()) throw ContractError("merge: no models");
    GaussianModel out(models.front().shDegree());
    std::size_t total = 0;
    for (const auto &m : models) {
        if (m.shDegree() != out.shDegree()) throw ContractError("merge: models differ in SH degree");
        total += m.size();
    }
    out.reserve(total);
    for (const auto &m : models) out.append(m);
    return out;
}

std::vector<ImageBuffer>
renderPseudoGt(const GaussianModel &teacher, std::span<const Camera> cameras, const Vec3 &background) {
    std::vector<ImageBuffer> views(cameras.size());
    RenderOptions ro;
    ro.background = background;
    parallelFor(cameras.size(), [&](std::size_t i) { views[i] = render(teacher, cameras[i], ro).color; });
    return views;
}

void
DistillConfig::validate() const {
    if (epochs < 0) throw ContractError("distill: epochs must be >= 0");
    if (!(lr_factor > 0)) throw ContractError("distill: learning-rate factor must be positive");
    weights.validate();
}

DistillResult
distill(GaussianModel student, std::span<const DistillView> views, const DistillConfig &cfg) {
    cfg.validate();
    DistillResult res;
    if (cfg.epochs == 0) {
        res.model = std::move(student);
        return res;
    }
    if (views.empty()) throw ContractError("distill: no pseudo views");
    std::vector<Camera> cams;
    for (const auto &v : views) {
        v.camera.validate();
        if (v.pseudo.width != v.camera.width || v.pseudo.height != v.camera.height) {
            throw ContractError("distill: pseudo view does not match camera " + std::to_string(v.camera.id));
        }
        cams.push_back(v.camera);
    }
    const double extent   = cfg.scene_extent > 0 ? cfg.scene_extent : cameraExtent(cams);
    const LearningRates lr = cfg.lr.scaled(cfg.lr_factor);
    const double logP0    = std::log(lr.position_init * extent);
    const double logP1    = std::log(lr.position_final * extent);
    const int total       = cfg.epochs * static_cast<int>(views.size());

    AdamOptimizer opt(student.size());
    RenderOptions ro;
    ro.background = cfg.background;
    int step      = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sum = 0;
        for (const auto &v : views) {
            const auto out  = render(student, v.camera, ro);
            const auto loss = distillLoss(v.pseudo, out.color, cfg.weights);
            if (!std::isfinite(loss.value)) throw NumericError("distill: non-finite loss");
            sum += loss.value;
            const DepthMap noDepth(v.camera.width, v.camera.height);
            const auto grads = renderBackward(student, v.camera, loss.grad, noDepth, out.aux);
            const double f   = total > 1 ? static_cast<double>(step) / (total - 1) : 0.0;
            opt.step(student, grads, lr, std::exp((1.0 - f) * logP0 + f * logP1), false);
            ++step;
        }
        res.epoch_loss.push_back(sum / static_cast<double>(views.size()));
    }
    res.model = std::move(student);
    return res;
}

AggregateResult
aggregate(std::vector<DeviceUpload> uploads, std::span<const Region> regions, const DistillConfig &cfg) {
    if (uploads.empty()) throw ContractError("aggregate: no uploads");
    std::sort(uploads.begin(), uploads.end(), [](const auto &a, const auto &b) { return a.device < b.device; });
    for (std::size_t k = 1; k < uploads.size(); ++k) {
        if (uploads[k].device == uploads[k - 1].device) {
            throw ContractError("aggregate: duplicate device " + std::to_string(uploads[k].device));
        }
    }
    auto regionFor = [&](int device) -> const Region & {
        for (const auto &r : regions)
            if (r.device == device) return r;
        throw ContractError("aggregate: no region for device " + std::to_string(device));
    };

    AggregateResult res;
    std::vector<GaussianModel> filtered;
    for (const auto &u : uploads) {
        filtered.push_back(filterByRegion(u.model, regionFor(u.device)));
        res.filtered_counts.push_back(filtered.back().size());
    }
    GaussianModel merged = merge(filtered);
    if (cfg.epochs == 0) {
        res.model = std::move(merged);
        return res;
    }
    std::vector<DistillView> views;
    for (const auto &u : uploads) {
        const auto pseudo = renderPseudoGt(u.model, u.cameras, cfg.background);
        for (std::size_t i = 0; i < u.cameras.size(); ++i) views.push_back({u.cameras[i], pseudo[i]});
    }
    auto d         = distill(std::move(merged), views, cfg);
    res.model      = std::move(d.model);
    res.epoch_loss = std::move(d.epoch_loss);
    return res;
}

} // namespace dgtr
