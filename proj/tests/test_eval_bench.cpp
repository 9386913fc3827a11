// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#include <dgtr/data.hpp>
#include <dgtr/eval_bench.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace dgtr;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

BenchmarkSpec
tinySpec() {
    BenchmarkSpec s;
    s.n_gaussians = 512;
    s.width       = 16;
    s.height      = 12;
    return s;
}

AblationOptions
quickOptions() {
    AblationOptions o;
    o.steps       = 20;
    o.align_steps = 20;
    o.devices     = {0, 1};
    return o;
}

} // namespace

TEST(EvalTable, SelfComparisonPrintsInf) {
    const Benchmark b = makeBenchmark(tinySpec());
    const auto rows   = evaluateViews(b.scene.gt, b.scene.test_cameras, b.scene.test_images);
    ASSERT_EQ(rows.size(), b.scene.test_cameras.size());
    for (const auto &r : rows) {
        EXPECT_EQ(r.psnr, kInf);
        EXPECT_DOUBLE_EQ(r.ssim, 1.0);
    }
    const std::string table = formatEvalTable(rows);
    EXPECT_EQ(table.rfind("camera\tpsnr\tssim\n", 0), 0u);
    EXPECT_NE(table.find("mean\tinf\t1.0000\n"), std::string::npos);
}

TEST(EvalTable, MeanRowAndFiniteValues) {
    const std::vector<EvalRow> rows{{3, 20.0, 0.5}, {7, 30.0, 0.7}};
    EXPECT_DOUBLE_EQ(meanPsnr(rows), 25.0);
    EXPECT_EQ(formatEvalTable(rows), "camera\tpsnr\tssim\n3\t20.0000\t0.5000\n7\t30.0000\t0.7000\nmean\t25.0000\t0.6000\n");
    EXPECT_THROW(meanPsnr(std::vector<EvalRow>{}), ContractError);
}

TEST(Benchmark, DevicesSplitTheRig) {
    const Benchmark b = makeBenchmark(tinySpec());
    ASSERT_EQ(b.deviceCount(), 4);
    std::size_t views = 0, held = 0;
    for (int m = 0; m < b.deviceCount(); ++m) {
        const auto d = b.device(m);
        views += d.data.cameras.size();
        held += d.test_cameras.size();
        d.data.validate();
    }
    EXPECT_EQ(views, b.scene.cameras.size());
    EXPECT_EQ(held, b.scene.test_cameras.size());
    EXPECT_THROW(b.device(9), ContractError);
}

TEST(Benchmark, LoadedSceneMatchesGenerated) {
    const auto dir = std::filesystem::temp_directory_path() / "dgtr_bench_load";
    std::filesystem::remove_all(dir);
    const BenchmarkSpec spec = tinySpec();
    const Benchmark made     = makeBenchmark(spec);
    SynthParams p;
    p.n_gaussians = spec.n_gaussians;
    p.n_cameras   = spec.n_cameras;
    p.width       = spec.width;
    p.height      = spec.height;
    const SyntheticScene sc = synthScene(spec.seed, p);
    writeScene(dir, sc);
    writePartition(dir, sc.cameras, partitionScene(sc.cameras, spec.devices));
    const Benchmark loaded = loadBenchmark(dir);
    EXPECT_EQ(encodeModel(loaded.scene.gt), encodeModel(made.scene.gt));
    ASSERT_EQ(loaded.scene.depths.size(), made.scene.depths.size());
    for (std::size_t i = 0; i < made.scene.depths.size(); ++i) EXPECT_TRUE(loaded.scene.depths[i] == made.scene.depths[i]);
    EXPECT_EQ(loaded.regions.size(), made.regions.size());
    std::filesystem::remove_all(dir);
}

TEST(AblationScale, Deterministic) {
    const Benchmark b = makeBenchmark(tinySpec());
    const auto a1     = runAblationScale(b, quickOptions());
    const auto a2     = runAblationScale(b, quickOptions());
    ASSERT_EQ(a1.size(), 3u);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(a1[k].psnr, a2[k].psnr);
    EXPECT_EQ(a1[0].label, "none");
    EXPECT_TRUE(a1[2].first && a1[2].second);
}

TEST(AblationScale, UnitGlobalScaleWithMetricPredictorLeavesRawScales) {
    // Metric-true predictor: no shared factor, no per-pair scale, no raw-scale error.
    const Benchmark b = makeBenchmark(tinySpec());
    const auto d      = b.device(0);
    SyntheticPredictorParams pp = b.predictor;
    pp.global_factor    = 1.0;
    pp.raw_scale_spread = 1.0;
    for (std::size_t p = 0; p + 1 < d.data.cameras.size(); ++p) pp.pair_scale[{int(p), int(p) + 1}] = 1.0;
    SyntheticPredictor pred(b.scene.gt, d.data.cameras, d.data.images, pp);
    const auto graph = buildGraph(static_cast<int>(d.data.cameras.size()), pairImages(static_cast<int>(d.data.cameras.size()), 2), pred);
    const auto align = globalAlign(graph, d.data.cameras, AlignOptions{20});
    AssembleInputs in;
    in.s_global = 1.0;
    in.mode     = ScaleMode::None;
    const auto none = assembleInit(graph, d.data.cameras, align, in);
    in.mode         = ScaleMode::Global;
    const auto glob = assembleInit(graph, d.data.cameras, align, in);
    EXPECT_EQ(encodeModel(none), encodeModel(glob));
    EXPECT_EQ(meanPsnr(evaluateViews(none, d.test_cameras, d.test_images)),
              meanPsnr(evaluateViews(glob, d.test_cameras, d.test_images)));
}

TEST(AblationDepth, DeterministicAndLabelled) {
    const Benchmark b = makeBenchmark(tinySpec());
    const auto r1     = runAblationDepth(b, quickOptions());
    const auto r2     = runAblationDepth(b, quickOptions());
    ASSERT_EQ(r1.size(), 3u);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(r1[k].psnr, r2[k].psnr);
    EXPECT_FALSE(r1[0].first || r1[0].second);
    EXPECT_TRUE(r1[1].first && !r1[1].second);
    EXPECT_TRUE(r1[2].first && r1[2].second);
    const std::string t = formatAblationTable(r1, "depth_loss", "shape_freeze");
    EXPECT_EQ(t.rfind("variant\tdepth_loss\tshape_freeze\tpsnr\n", 0), 0u);
    EXPECT_NE(t.find("depth+freeze\tyes\tyes\t"), std::string::npos);
}

TEST(AblationDepth, ZeroDepthWeightMakesFirstRowsEqual) {
    const Benchmark b = makeBenchmark(tinySpec());
    AblationOptions o = quickOptions();
    o.lambda3         = 0.0;
    const auto rows   = runAblationDepth(b, o);
    EXPECT_EQ(rows[0].psnr, rows[1].psnr);
}

TEST(AblationOptions, RejectsUnusableDevices) {
    const Benchmark b = makeBenchmark(tinySpec());
    AblationOptions o = quickOptions();
    o.devices.clear();
    EXPECT_THROW(runAblationScale(b, o), ContractError);
    o.devices = {42};
    EXPECT_THROW(runAblationScale(b, o), ContractError);
}

TEST(CompareInit, CurvesShareTheEvaluationSchedule) {
    const Benchmark b = makeBenchmark(tinySpec());
    AblationOptions o = quickOptions();
    o.devices         = {0};
    const auto c      = compareInitializations(b, 30, 10, o);
    const std::vector<int> expected{0, 10, 20, 30};
    EXPECT_EQ(c.feed_forward.steps, expected);
    EXPECT_EQ(c.random.steps, expected);
    EXPECT_EQ(c.feed_forward.psnr.size(), 4u);
    EXPECT_EQ(c.feed_forward.firstStepReaching(-kInf), 0);
    EXPECT_EQ(c.feed_forward.firstStepReaching(kInf), -1);
    EXPECT_THROW(compareInitializations(b, 30, 0, o), ContractError);
}
