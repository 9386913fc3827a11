// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dgtr/data.hpp>
#include <dgtr/init.hpp>
#include <dgtr/kdtree.hpp>
#include <dgtr/raster.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

using namespace dgtr;

namespace {

SyntheticScene
smallRig(int nCams) {
    SynthParams p;
    p.n_cameras   = nCams;
    p.n_gaussians = 2048;
    return synthScene(7, p);
}

// Returns world points of every covered pixel, NaN elsewhere.
std::vector<Vec3>
groundTruthPoints(const SyntheticScene &scene, int v) {
    const Camera &cam = scene.cameras[v];
    const auto out    = render(scene.gt, cam);
    std::vector<Vec3> pts(out.depth.data.size(), Vec3::Constant(std::nan("")));
    for (int r = 0; r < cam.height; ++r) {
        for (int c = 0; c < cam.width; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * cam.width + c;
            const double a      = out.alpha.data[i];
            if (a < 0.5) continue;
            pts[i] = cam.toWorld(cam.pixelRay(c, r) * (out.depth.data[i] / a));
        }
    }
    return pts;
}

class CountingPredictor final : public Predictor {
  public:
    explicit CountingPredictor(Predictor &inner) : mInner(inner) {}
    PairPrediction
    predict(int p, int q) override {
        calls.push_back({p, q});
        return mInner.predict(p, q);
    }
    std::vector<ImagePair> calls;

  private:
    Predictor &mInner;
};

} // namespace

TEST(PairImages, SlidingWindowExamples) {
    EXPECT_EQ(pairImages(5, 1), (std::vector<ImagePair>{{0, 1}, {1, 2}, {2, 3}, {3, 4}}));
    EXPECT_EQ(pairImages(6, 2), (std::vector<ImagePair>{{0, 1}, {2, 3}, {4, 5}}));
    EXPECT_EQ(pairImages(2, 3), (std::vector<ImagePair>{{0, 1}}));
    EXPECT_THROW(pairImages(1, 1), ContractError);
    EXPECT_THROW(pairImages(4, 0), ContractError);
}

TEST(BuildGraph, BridgesDisconnectedComponents) {
    const auto scene = smallRig(6);
    SyntheticPredictorParams pp;
    pp.extent = scene.extent();
    SyntheticPredictor inner(scene.gt, scene.cameras, scene.images, pp);
    CountingPredictor pred(inner);
    const auto g = buildGraph(6, pairImages(6, 2), pred);
    EXPECT_TRUE(g.connected());
    EXPECT_EQ(g.bridges, (std::vector<ImagePair>{{1, 2}, {3, 4}}));
    EXPECT_EQ(g.pairs.size(), 5u);
    EXPECT_EQ(g.edges.size(), 5u);
    EXPECT_EQ(pred.calls, g.pairs);
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        EXPECT_EQ(g.edges[e].p, g.pairs[e].p);
        EXPECT_EQ(g.edges[e].q, g.pairs[e].q);
    }
}

TEST(SyntheticPredictor, NoiselessPointsAreScaledReferenceFramePoints) {
    const auto scene = smallRig(4);
    SyntheticPredictorParams pp;
    pp.noise         = 0.0;
    pp.extent        = scene.extent();
    pp.global_factor = 1.5;
    pp.pair_scale[{0, 1}] = 0.8;
    SyntheticPredictor pred(scene.gt, scene.cameras, scene.images, pp);
    const auto pr = pred.predict(0, 1);
    const auto truth0 = groundTruthPoints(scene, 0);
    const auto truth1 = groundTruthPoints(scene, 1);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < pr.pixelCount(); ++i) {
        if (truth0[i].allFinite()) {
            EXPECT_GT(pr.confidence[0][i], 0.0);
            const Vec3 expect = 1.2 * scene.cameras[0].toCamera(truth0[i]);
            EXPECT_LT((pr.points[0][i] - expect).norm(), 1e-9 * expect.norm());
            ++checked;
        } else {
            EXPECT_EQ(pr.confidence[0][i], 0.0);
        }
        if (truth1[i].allFinite()) {
            const Vec3 expect = 1.2 * scene.cameras[0].toCamera(truth1[i]);
            EXPECT_LT((pr.points[1][i] - expect).norm(), 1e-9 * expect.norm());
        }
    }
    EXPECT_GT(checked, pr.pixelCount() / 2);
    EXPECT_EQ(pr.gaussians.size(), 2 * pr.pixelCount());
    EXPECT_NO_THROW(pr.validate());
}

TEST(SyntheticPredictor, Deterministic) {
    const auto scene = smallRig(4);
    SyntheticPredictorParams pp;
    pp.extent = scene.extent();
    SyntheticPredictor a(scene.gt, scene.cameras, scene.images, pp);
    SyntheticPredictor b(scene.gt, scene.cameras, scene.images, pp);
    const auto x = a.predict(1, 2), y = b.predict(1, 2);
    EXPECT_EQ(x.points[1], y.points[1]);
    EXPECT_EQ(x.confidence[0], y.confidence[0]);
    EXPECT_TRUE(x.gaussians.identical(y.gaussians));
    const double k = a.pairScale(1, 2);
    EXPECT_GE(k, 0.5);
    EXPECT_LE(k, 2.0);
}

namespace {

struct AlignCase {
    SyntheticScene scene;
    ConnectivityGraph graph;
    std::vector<double> truthSigma;
};

AlignCase
alignCase(const std::vector<double> &scales, double noise) {
    AlignCase ac{smallRig(static_cast<int>(scales.size()) + 1), {}, {}};
    SyntheticPredictorParams pp;
    pp.noise  = noise;
    pp.extent = ac.scene.extent();
    for (std::size_t e = 0; e < scales.size(); ++e) {
        pp.pair_scale[{static_cast<int>(e), static_cast<int>(e) + 1}] = scales[e];
    }
    SyntheticPredictor pred(ac.scene.gt, ac.scene.cameras, ac.scene.images, pp);
    const int n  = static_cast<int>(ac.scene.cameras.size());
    ac.graph     = buildGraph(n, pairImages(n, 1), pred);
    double logMean = 0;
    for (double k : scales) logMean += std::log(k);
    logMean /= static_cast<double>(scales.size());
    // Alignment recovers sigma_e ~ 1 / k_e; normalize to the product-one gauge.
    for (double k : scales) ac.truthSigma.push_back(std::exp(logMean) / k);
    return ac;
}

double
alignedRmse(const AlignCase &ac, const AlignmentResult &r) {
    double ss     = 0;
    std::size_t n = 0;
    for (int v = 0; v < ac.graph.n_images; ++v) {
        const auto truth = groundTruthPoints(ac.scene, v);
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (!truth[i].allFinite()) continue;
            ss += (r.chi[v][i] - truth[i]).squaredNorm();
            ++n;
        }
    }
    return std::sqrt(ss / static_cast<double>(n));
}

} // namespace

TEST(GlobalAlign, NoiselessEqualScalesRecoverGeometry) {
    const auto ac = alignCase({1.0, 1.0, 1.0}, 0.0);
    AlignOptions opts;
    opts.steps  = 50;
    const auto r = globalAlign(ac.graph, ac.scene.cameras, opts);
    EXPECT_LT(alignedRmse(ac, r), 1e-3 * ac.scene.extent());
    for (double s : r.sigma) EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_NEAR(r.gamma, 1.0, 1e-4);
}

TEST(GlobalAlign, TwoEdgesWithReciprocalScales) {
    const auto ac = alignCase({0.5, 2.0}, 0.0);
    const auto r  = globalAlign(ac.graph, ac.scene.cameras);
    ASSERT_EQ(r.sigma.size(), 2u);
    EXPECT_NEAR(r.sigma[0], 2.0, 0.02 * 2.0);
    EXPECT_NEAR(r.sigma[1], 0.5, 0.02 * 0.5);
    EXPECT_NEAR(r.sigma[0] * r.sigma[1], 1.0, 1e-9);
}

TEST(GlobalAlign, NoisyRigObjectiveMonotoneAndGaugeHeld) {
    const auto ac = alignCase({0.7, 1.6, 1.1, 0.6, 1.0 / (0.7 * 1.6 * 1.1 * 0.6)}, 0.005);
    AlignOptions opts;
    opts.steps = 200;
    const auto r = globalAlign(ac.graph, ac.scene.cameras, opts);
    ASSERT_EQ(r.objective.size(), r.checkpoint_steps.size());
    EXPECT_EQ(r.checkpoint_steps.front(), 0);
    EXPECT_EQ(r.checkpoint_steps.back(), 200);
    for (std::size_t k = 1; k < r.objective.size(); ++k) EXPECT_LE(r.objective[k], r.objective[k - 1] * (1 + 1e-12));
    double logSum = 0;
    for (double s : r.sigma) logSum += std::log(s);
    EXPECT_NEAR(logSum, 0.0, 1e-9);
    EXPECT_NEAR(alignmentObjective(ac.graph, ac.scene.cameras, r, opts.smoothing), r.objective.back(), 1e-12);
    EXPECT_LT(alignedRmse(ac, r), 0.05 * ac.scene.extent());
    for (std::size_t e = 0; e < r.sigma.size(); ++e) EXPECT_NEAR(r.sigma[e], ac.truthSigma[e], 0.02 * ac.truthSigma[e]);
}

TEST(GlobalAlign, RejectsBadInputs) {
    const auto ac = alignCase({1.0}, 0.0);
    AlignOptions opts;
    opts.steps = 0;
    EXPECT_THROW(globalAlign(ac.graph, ac.scene.cameras, opts), ContractError);
    auto broken = ac.graph;
    broken.n_images = 3;
    EXPECT_THROW(globalAlign(broken, {ac.scene.cameras[0], ac.scene.cameras[1], ac.scene.cameras[1]}), ContractError);
}

TEST(KdTree, MatchesBruteForce) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<Vec3> pts(2000);
    for (auto &p : pts) p = Vec3(u(rng), u(rng), 0.1 * u(rng));
    pts[10] = pts[20]; // duplicate: lowest index wins
    const KdTree3 tree(pts);
    for (int k = 0; k < 500; ++k) {
        const Vec3 q = k == 0 ? pts[20] : Vec3(u(rng), u(rng), u(rng));
        std::size_t best = 0;
        for (std::size_t i = 1; i < pts.size(); ++i)
            if ((pts[i] - q).squaredNorm() < (pts[best] - q).squaredNorm()) best = i;
        EXPECT_EQ(tree.nearest(q), best);
    }
    EXPECT_THROW(KdTree3({}).nearest(Vec3::Zero()), ContractError);
}

namespace {

std::vector<Vec3>
randomCloud(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<Vec3> pts(n);
    for (auto &p : pts) p = Vec3(u(rng), u(rng), u(rng));
    return pts;
}

} // namespace

TEST(Icp, ExactScale) {
    const auto src = randomCloud(1000, 1);
    std::vector<Vec3> tgt;
    for (const auto &p : src) tgt.push_back(2.0 * p + Vec3(3, -1, 0.5));
    EXPECT_NEAR(icpGlobalScale(src, tgt), 2.0, 1e-6);
    EXPECT_NEAR(icpGlobalScale(src, src), 1.0, 1e-12);
}

TEST(Icp, NoisyScale) {
    const auto src = randomCloud(3000, 2);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0, 0.01);
    std::vector<Vec3> tgt;
    for (const auto &p : src) tgt.push_back(1.7 * p + Vec3(n(rng), n(rng), n(rng)));
    EXPECT_NEAR(icpGlobalScale(src, tgt), 1.7, 0.017);
}

TEST(Icp, DegenerateSourceFails) {
    const std::vector<Vec3> same(10, Vec3(1, 2, 3));
    EXPECT_THROW(icpGlobalScale(same, randomCloud(10, 1)), ContractError);
    EXPECT_THROW(icpGlobalScale(randomCloud(2, 1), randomCloud(10, 1)), ContractError);
}

TEST(LocalScale, UniformGrid) {
    const int w = 7, h = 5;
    std::vector<Vec3> pts;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) pts.push_back(Vec3(0.25 * c, 0.25 * r, 2.0));
    const auto ls = localScale(pts, w, h);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_NEAR(ls.scale[i], 0.25, 1e-12);
        EXPECT_TRUE(ls.keep[i]);
    }
}

TEST(LocalScale, OutlierMaskedAndOracle) {
    const int w = 6, h = 6;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 0.05);
    std::vector<Vec3> pts;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) pts.push_back(Vec3(0.1 * c + u(rng), 0.1 * r + u(rng), u(rng)));
    pts[14].z() += 50.0;
    const auto ls = localScale(pts, w, h);
    EXPECT_FALSE(ls.keep[14]);
    // Independent per-pixel oracle.
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double sum = 0;
            int n      = 0;
            for (auto [dr, dc] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
                const int rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                sum += (pts[r * w + c] - pts[rr * w + cc]).norm();
                ++n;
            }
            EXPECT_NEAR(ls.scale[r * w + c], sum / n, 1e-12);
        }
    }
    // Scaling the map scales every local scale and leaves the mask unchanged.
    std::vector<Vec3> scaled;
    for (const auto &p : pts) scaled.push_back(3.0 * p);
    const auto ls3 = localScale(scaled, w, h);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_NEAR(ls3.scale[i], 3.0 * ls.scale[i], 1e-12);
        EXPECT_EQ(ls3.keep[i], ls.keep[i]);
    }
    EXPECT_THROW(localScale(pts, 5, 6), ContractError);
}

TEST(AssembleInit, ModesAndMasking) {
    const auto ac = alignCase({1.3, 0.9}, 0.005);
    AlignOptions opts;
    opts.steps   = 20;
    const auto r = globalAlign(ac.graph, ac.scene.cameras, opts);
    std::size_t confident = 0;
    for (const auto &e : ac.graph.edges)
        for (int j = 0; j < 2; ++j)
            for (double c : e.confidence[j]) confident += c > 0;

    AssembleInputs in;
    in.s_global = 2.0;
    in.mode     = ScaleMode::None;
    const auto none = assembleInit(ac.graph, ac.scene.cameras, r, in);
    EXPECT_EQ(none.size(), confident);
    in.mode           = ScaleMode::Global;
    const auto global = assembleInit(ac.graph, ac.scene.cameras, r, in);
    ASSERT_EQ(global.size(), none.size());
    for (std::size_t k = 0; k < none.size(); ++k) {
        EXPECT_TRUE(global[k].log_scale.isApprox(none[k].log_scale + Vec3::Constant(std::log(2.0)), 1e-12));
        EXPECT_EQ(global[k].position, none[k].position);
    }

    in.mode = ScaleMode::GlobalLocal;
    std::size_t expected = 0;
    for (std::size_t e = 0; e < ac.graph.edges.size(); ++e) {
        std::array<LocalScale, 2> ls;
        for (int j = 0; j < 2; ++j) {
            ls[j] = localScale(ac.graph.edges[e].points[j], ac.graph.edges[e].width, ac.graph.edges[e].height);
            ls[j].keep[0] = false;
            for (std::size_t i = 0; i < ls[j].keep.size(); ++i)
                expected += ls[j].keep[i] && ac.graph.edges[e].confidence[j][i] > 0;
        }
        in.local.push_back(ls);
    }
    const auto local = assembleInit(ac.graph, ac.scene.cameras, r, in);
    EXPECT_EQ(local.size(), expected);
    EXPECT_LT(local.size(), none.size());

    in.local.clear();
    EXPECT_THROW(assembleInit(ac.graph, ac.scene.cameras, r, in), ContractError);
}

TEST(InitializeDevice, EndToEndProducesSceneScaledModel) {
    const auto scene = smallRig(4);
    SyntheticPredictorParams pp;
    pp.extent        = scene.extent();
    pp.global_factor = 0.4;
    SyntheticPredictor pred(scene.gt, scene.cameras, scene.images, pp);
    InitConfig cfg;
    cfg.stride      = 1;
    cfg.align.steps = 100;
    const auto rep  = initializeDevice(scene.cameras, pred, cfg);
    EXPECT_GT(rep.model.size(), 1000u);
    // gamma absorbs the predictor factor and the mean pair scale; ICP finds the same factor.
    double logK = 0;
    for (const auto &e : rep.graph.pairs) logK += std::log(pred.pairScale(e.p, e.q));
    const double expect = 1.0 / (0.4 * std::exp(logK / static_cast<double>(rep.graph.pairs.size())));
    EXPECT_NEAR(rep.align.gamma, expect, 0.02 * expect);
    EXPECT_NEAR(rep.s_global, rep.align.gamma, 0.02 * rep.align.gamma);
    for (std::size_t k = 0; k < rep.model.size(); ++k) ASSERT_TRUE(rep.model[k].position.allFinite());
}

TEST(RandomInit, CoversFootprint) {
    const auto scene = smallRig(4);
    const auto m     = randomInit(scene.cameras, 500, 11);
    EXPECT_EQ(m.size(), 500u);
    EXPECT_TRUE(m.identical(randomInit(scene.cameras, 500, 11)));
    const Vec3 lo = m.boundsMin(), hi = m.boundsMax();
    EXPECT_GT(hi.x() - lo.x(), 0.2 * scene.extent());
    EXPECT_THROW(randomInit({}, 10, 1), ContractError);
}
