// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/data.hpp>
#include <dgtr/init.hpp>
#include <dgtr/kdtree.hpp>
#include <dgtr/raster.hpp>

#include <algorithm>
#include <numeric>
#include <queue>
#include <random>
#include <string>

namespace dgtr {

namespace fs = std::filesystem;

std::vector<ImagePair>
pairImages(int nImages, int stride) {
    if (nImages < 2) throw ContractError("pair_images: need at least two images");
    if (stride < 1) throw ContractError("pair_images: stride must be >= 1");
    std::vector<ImagePair> pairs;
    for (int i = 0; i + 1 < nImages; i += stride) pairs.push_back({i, i + 1});
    return pairs;
}

fs::path
FilePredictor::fileName(int p, int q) {
    return "pair_" + std::to_string(p) + "_" + std::to_string(q) + ".dgp";
}

PairPrediction
FilePredictor::predict(int p, int q) {
    PairPrediction pred = loadPairPrediction(mDir / fileName(p, q));
    if (pred.p != p || pred.q != q) {
        throw FormatError(FormatErrorCode::Malformed, "pair prediction file holds pair (" +
                                                          std::to_string(pred.p) + "," + std::to_string(pred.q) +
                                                          "), expected (" + std::to_string(p) + "," +
                                                          std::to_string(q) + ")");
    }
    return pred;
}

// ---------------------------------------------------------------------------

SyntheticPredictor::SyntheticPredictor(GaussianModel gt, std::vector<Camera> cams, std::vector<ImageBuffer> images,
                                       SyntheticPredictorParams params)
    : mGt(std::move(gt)), mCams(std::move(cams)), mImages(std::move(images)), mParams(std::move(params)) {
    if (mCams.size() != mImages.size()) throw ContractError("synthetic predictor: camera/image count mismatch");
    if (!(mParams.global_factor > 0) || !(mParams.scale_min > 0) || !(mParams.scale_max >= mParams.scale_min) ||
        !(mParams.flatness > 0) || !(mParams.raw_scale_spread >= 1)) {
        throw ContractError("synthetic predictor: scales must be positive");
    }
    for (std::size_t i = 0; i < mCams.size(); ++i) {
        if (mImages[i].width != mCams[i].width || mImages[i].height != mCams[i].height) {
            throw ContractError("synthetic predictor: image does not match its camera");
        }
    }
}

double
SyntheticPredictor::pairScale(int p, int q) const {
    if (auto it = mParams.pair_scale.find({p, q}); it != mParams.pair_scale.end()) return it->second;
    std::mt19937_64 rng(mParams.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(p) * 7919u +
                        static_cast<std::uint64_t>(q));
    std::uniform_real_distribution<double> u(std::log(mParams.scale_min), std::log(mParams.scale_max));
    return std::exp(u(rng));
}

double
SyntheticPredictor::rawScaleError(int p, int q) const {
    if (mParams.raw_scale_spread == 1.0) return 1.0;
    std::mt19937_64 rng(mParams.seed * 0xC2B2AE3D27D4EB4Full + static_cast<std::uint64_t>(p) * 104729u +
                        static_cast<std::uint64_t>(q));
    const double l = std::log(mParams.raw_scale_spread);
    return std::exp(std::uniform_real_distribution<double>(-l, l)(rng));
}

PairPrediction
SyntheticPredictor::predict(int p, int q) {
    const int n = static_cast<int>(mCams.size());
    if (p < 0 || q < 0 || p >= n || q >= n || p == q) throw ContractError("synthetic predictor: bad pair");
    const Camera &ref = mCams[p];
    if (mCams[q].width != ref.width || mCams[q].height != ref.height) {
        throw ContractError("synthetic predictor: pair images differ in size");
    }
    const double factor = mParams.global_factor * pairScale(p, q);
    const double sigmaN = mParams.noise * mParams.extent;
    std::mt19937_64 rng(mParams.seed ^ (static_cast<std::uint64_t>(p) << 32 | static_cast<std::uint32_t>(q)));
    std::normal_distribution<double> nrm(0.0, 1.0);

    PairPrediction pred;
    pred.p      = p;
    pred.q      = q;
    pred.width  = ref.width;
    pred.height = ref.height;
    const std::size_t hw = pred.pixelCount();

    // Back-projected depth along each pixel ray, with coverage.
    std::array<std::vector<double>, 2> z;
    std::array<std::vector<double>, 2> cover;
    std::vector<double> footprints;
    const int views[2] = {p, q};
    for (int j = 0; j < 2; ++j) {
        const auto out = render(mGt, mCams[views[j]]);
        z[j].resize(hw);
        cover[j].resize(hw);
        for (std::size_t i = 0; i < hw; ++i) {
            const double a = out.alpha.data[i];
            cover[j][i]    = a;
            z[j][i]        = a > 1e-3 ? out.depth.data[i] / a : 0.0;
            if (a >= 0.5) footprints.push_back(z[j][i] / mCams[views[j]].fx);
        }
    }
    if (footprints.empty()) throw NumericError("synthetic predictor: pair sees no geometry");
    std::nth_element(footprints.begin(), footprints.begin() + footprints.size() / 2, footprints.end());
    const double medianFootprint = footprints[footprints.size() / 2];
    const double medianDepth     = medianFootprint * ref.fx;

    pred.gaussians = GaussianModel(mGt.shDegree());
    pred.gaussians.reserve(2 * hw);
    const double base = std::log(factor * medianFootprint * rawScaleError(p, q));
    for (int j = 0; j < 2; ++j) {
        const Camera &cam = mCams[views[j]];
        const int w = cam.width, h = cam.height;
        std::vector<Vec3> local(hw);
        for (int row = 0; row < h; ++row) {
            for (int col = 0; col < w; ++col) {
                const std::size_t i = static_cast<std::size_t>(row) * w + col;
                local[i] = cam.pixelRay(col, row) * (cover[j][i] >= 0.5 ? z[j][i] : medianDepth);
            }
        }
        // Rotation from view j's camera frame into the reference frame.
        const Mat3 toRef = ref.worldToCameraRotation() * cam.rotation;
        auto at = [&](int r, int c) {
            r = std::clamp(r, 0, h - 1);
            c = std::clamp(c, 0, w - 1);
            return local[static_cast<std::size_t>(r) * w + c];
        };
        pred.points[j].resize(hw);
        pred.confidence[j].resize(hw);
        for (int row = 0; row < h; ++row) {
            for (int col = 0; col < w; ++col) {
                const std::size_t i = static_cast<std::size_t>(row) * w + col;
                const bool valid    = cover[j][i] >= 0.5;
                const Vec3 inRef    = ref.toCamera(cam.toWorld(local[i]));
                const Vec3 noise(nrm(rng), nrm(rng), nrm(rng));
                double conf = 0.0;
                if (valid) {
                    conf = cover[j][i];
                    if (sigmaN > 0) conf *= std::exp(-noise.squaredNorm() / 6.0);
                }
                pred.points[j][i]     = factor * (inRef + sigmaN * noise);
                pred.confidence[j][i] = conf;

                // Surface normal from central differences of the clean pointmap; the
                // disk is symmetric, so the normal is flipped to the +z hemisphere.
                Vec3 normal = (at(row, col + 1) - at(row, col - 1)).cross(at(row + 1, col) - at(row - 1, col));
                normal      = normal.norm() > 0 ? Vec3(toRef * normal.normalized()) : Vec3(0, 0, 1);
                if (normal.z() < 0) normal = -normal;
                // Shortest-arc rotation from +z to the normal.
                const Vec4 q = normalizedQuaternion(Vec4(1.0 + normal.z(), -normal.y(), normal.x(), 0.0));

                GaussianPrimitive g;
                g.position      = pred.points[j][i];
                g.rotation      = q;
                g.confidence    = conf;
                g.opacity_logit = logit(mParams.opacity);
                g.log_scale     = Vec3(base + mParams.scale_jitter * nrm(rng), base + mParams.scale_jitter * nrm(rng),
                                       base + std::log(mParams.flatness) + mParams.scale_jitter * nrm(rng));
                const auto &img = mImages[views[j]];
                g.setBaseColor(Vec3(img.at(row, col, 0), img.at(row, col, 1), img.at(row, col, 2)));
                pred.gaussians.add(g);
            }
        }
    }
    return pred;
}

// ---------------------------------------------------------------------------

namespace {

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int
    find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

bool
pairsConnected(int n, const std::vector<ImagePair> &pairs) {
    if (n <= 0) return false;
    UnionFind uf(n);
    for (const auto &e : pairs) uf.unite(e.p, e.q);
    const int root = uf.find(0);
    for (int i = 1; i < n; ++i)
        if (uf.find(i) != root) return false;
    return true;
}

} // namespace

bool
ConnectivityGraph::connected() const {
    return pairsConnected(n_images, pairs);
}

ConnectivityGraph
buildGraph(int nImages, const std::vector<ImagePair> &pairs, Predictor &predictor) {
    if (pairs.empty()) throw ContractError("build_graph: no pairs");
    ConnectivityGraph g;
    g.n_images = nImages;
    UnionFind uf(nImages);
    for (const auto &e : pairs) {
        if (e.p < 0 || e.q < 0 || e.p >= nImages || e.q >= nImages || e.p == e.q) {
            throw ContractError("build_graph: pair index out of range");
        }
        g.pairs.push_back(e);
        uf.unite(e.p, e.q);
    }
    for (int i = 0; i + 1 < nImages; ++i) {
        if (uf.find(i) != uf.find(i + 1)) {
            g.bridges.push_back({i, i + 1});
            g.pairs.push_back({i, i + 1});
            uf.unite(i, i + 1);
        }
    }
    for (const auto &e : g.pairs) {
        PairPrediction pred = predictor.predict(e.p, e.q);
        pred.validate();
        g.edges.push_back(std::move(pred));
    }
    return g;
}

// ---------------------------------------------------------------------------
// Global alignment

namespace {

struct Term {
    int edge;
    int view; // 0 = p, 1 = q
};

struct AlignProblem {
    const ConnectivityGraph &graph;
    const std::vector<Camera> &poses;
    std::vector<std::vector<Term>> termsOf; // per image
    std::size_t hw = 0;
    double totalWeight = 0;

    int
    imageOf(const Term &t) const {
        const auto &pr = graph.pairs[t.edge];
        return t.view == 0 ? pr.p : pr.q;
    }
    const Mat3 &rot(int e) const { return poses[graph.pairs[e].p].rotation; }
    const Vec3 &trans(int e) const { return poses[graph.pairs[e].p].translation; }
};

AlignProblem
makeProblem(const ConnectivityGraph &graph, const std::vector<Camera> &poses) {
    if (graph.edges.empty() || graph.edges.size() != graph.pairs.size()) {
        throw ContractError("global_align: graph has no edges");
    }
    if (!graph.connected()) {
        throw ContractError("global_align: connectivity graph is disconnected; lower the stride or add bridging pairs");
    }
    if (static_cast<int>(poses.size()) != graph.n_images) {
        throw ContractError("global_align: need one pose per image");
    }
    AlignProblem pb{graph, poses, std::vector<std::vector<Term>>(graph.n_images)};
    pb.hw = graph.edges[0].pixelCount();
    for (std::size_t e = 0; e < graph.edges.size(); ++e) {
        const auto &pred = graph.edges[e];
        if (pred.pixelCount() != pb.hw) throw ContractError("global_align: pointmaps differ in size");
        pred.validate();
        for (int j = 0; j < 2; ++j) {
            pb.termsOf[j == 0 ? graph.pairs[e].p : graph.pairs[e].q].push_back({static_cast<int>(e), j});
            for (double c : pred.confidence[j]) pb.totalWeight += c;
        }
    }
    if (!(pb.totalWeight > 0)) throw NumericError("global_align: all confidences are zero");
    return pb;
}

Vec3
predicted(const AlignProblem &pb, const AlignmentResult &s, const Term &t, std::size_t i) {
    const auto &X = pb.graph.edges[t.edge].points[t.view][i];
    return pb.rot(t.edge) * (s.gamma * s.sigma[t.edge] * X) + pb.trans(t.edge);
}

double
objective(const AlignProblem &pb, const AlignmentResult &s, double eps) {
    const double e = eps * s.scene_scale;
    double f       = 0.0;
    for (int v = 0; v < pb.graph.n_images; ++v) {
        for (const Term &t : pb.termsOf[v]) {
            const auto &C = pb.graph.edges[t.edge].confidence[t.view];
            for (std::size_t i = 0; i < pb.hw; ++i) {
                if (C[i] == 0) continue;
                const double r2 = (s.chi[v][i] - predicted(pb, s, t, i)).squaredNorm();
                f += C[i] * (std::sqrt(r2 + e * e) - e);
            }
        }
    }
    return f / (pb.totalWeight * s.scene_scale);
}

void
applyGauge(AlignmentResult &s) {
    double meanLog = 0;
    for (double sg : s.sigma) meanLog += std::log(sg);
    meanLog /= static_cast<double>(s.sigma.size());
    for (double &sg : s.sigma) sg = std::exp(std::log(sg) - meanLog);
    s.gamma *= std::exp(meanLog);
}

double
weightedRms(const std::vector<Vec3> &pts, const std::vector<double> &w) {
    Vec3 c     = Vec3::Zero();
    double sum = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        c += w[i] * pts[i];
        sum += w[i];
    }
    if (!(sum > 0)) return 0;
    c /= sum;
    double ss = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) ss += w[i] * (pts[i] - c).squaredNorm();
    return std::sqrt(ss / sum);
}

// Spanning-tree initialization: relative pair scales from the spread of shared
// images, the metric factor from the camera baselines, chi from weighted averages.
void
initialize(const AlignProblem &pb, AlignmentResult &s) {
    const std::size_t ne = pb.graph.edges.size();
    s.sigma.assign(ne, 1.0);
    std::vector<bool> seen(ne, false);
    std::queue<int> queue;
    queue.push(0);
    seen[0] = true;
    while (!queue.empty()) {
        const int e = queue.front();
        queue.pop();
        for (int j = 0; j < 2; ++j) {
            const int v = j == 0 ? pb.graph.pairs[e].p : pb.graph.pairs[e].q;
            for (const Term &t : pb.termsOf[v]) {
                if (seen[t.edge]) continue;
                const auto &a = pb.graph.edges[e], &b = pb.graph.edges[t.edge];
                std::vector<double> w(pb.hw);
                for (std::size_t i = 0; i < pb.hw; ++i) w[i] = std::min(a.confidence[j][i], b.confidence[t.view][i]);
                const double ra = weightedRms(a.points[j], w), rb = weightedRms(b.points[t.view], w);
                s.sigma[t.edge] = (ra > 0 && rb > 0) ? s.sigma[e] * ra / rb : s.sigma[e];
                seen[t.edge]    = true;
                queue.push(t.edge);
            }
        }
    }
    // Metric factor: an image seen from two reference frames pins the scale through the baseline.
    double num = 0, den = 0;
    for (int v = 0; v < pb.graph.n_images; ++v) {
        const auto &terms = pb.termsOf[v];
        for (std::size_t a = 0; a < terms.size(); ++a) {
            for (std::size_t b = a + 1; b < terms.size(); ++b) {
                const Term ta = terms[a], tb = terms[b];
                const Vec3 d  = pb.trans(tb.edge) - pb.trans(ta.edge);
                const auto &ea = pb.graph.edges[ta.edge], &eb = pb.graph.edges[tb.edge];
                for (std::size_t i = 0; i < pb.hw; ++i) {
                    const double w = std::min(ea.confidence[ta.view][i], eb.confidence[tb.view][i]);
                    if (w == 0) continue;
                    const Vec3 diff = pb.rot(ta.edge) * (s.sigma[ta.edge] * ea.points[ta.view][i]) -
                                      pb.rot(tb.edge) * (s.sigma[tb.edge] * eb.points[tb.view][i]);
                    num += w * diff.dot(d);
                    den += w * diff.squaredNorm();
                }
            }
        }
    }
    s.gamma = (den > 0 && num > 0) ? num / den : 1.0;
    applyGauge(s);

    s.chi.assign(pb.graph.n_images, std::vector<Vec3>(pb.hw, Vec3::Zero()));
    Vec3 centroid = Vec3::Zero();
    double wsum   = 0;
    for (int v = 0; v < pb.graph.n_images; ++v) {
        for (std::size_t i = 0; i < pb.hw; ++i) {
            Vec3 acc = Vec3::Zero(), plain = Vec3::Zero();
            double w = 0;
            for (const Term &t : pb.termsOf[v]) {
                const Vec3 y   = predicted(pb, s, t, i);
                const double c = pb.graph.edges[t.edge].confidence[t.view][i];
                acc += c * y;
                plain += y;
                w += c;
            }
            s.chi[v][i] = w > 0 ? Vec3(acc / w) : Vec3(plain / static_cast<double>(pb.termsOf[v].size()));
            centroid += w * s.chi[v][i];
            wsum += w;
        }
    }
    centroid /= wsum;
    double spread = 0;
    for (int v = 0; v < pb.graph.n_images; ++v) {
        for (std::size_t i = 0; i < pb.hw; ++i) {
            double w = 0;
            for (const Term &t : pb.termsOf[v]) w += pb.graph.edges[t.edge].confidence[t.view][i];
            spread += w * (s.chi[v][i] - centroid).squaredNorm();
        }
    }
    s.scene_scale = spread > 0 ? std::sqrt(spread / wsum) : 1.0;
}

} // namespace

double
alignmentObjective(const ConnectivityGraph &graph, const std::vector<Camera> &poses, const AlignmentResult &params,
                   double smoothing) {
    const AlignProblem pb = makeProblem(graph, poses);
    return objective(pb, params, smoothing);
}

AlignmentResult
globalAlign(const ConnectivityGraph &graph, const std::vector<Camera> &poses, const AlignOptions &opts) {
    if (opts.steps < 1) throw ContractError("global_align: steps must be >= 1");
    if (!(opts.lr_start > 0) || !(opts.lr_end > 0) || opts.lr_end > opts.lr_start) {
        throw ContractError("global_align: require 0 < lr_end <= lr_start");
    }
    const AlignProblem pb = makeProblem(graph, poses);
    AlignmentResult s;
    initialize(pb, s);
    const double eps = opts.smoothing * s.scene_scale;
    const std::size_t ne = graph.edges.size();

    s.objective.push_back(objective(pb, s, opts.smoothing));
    s.checkpoint_steps.push_back(0);

    // Each step is a block-wise preconditioned gradient step (chi, then sigma, then gamma)
    // whose diagonal preconditioner is the curvature of the reweighted least-squares
    // majorizer of the smoothed norm. Step fraction lr / lr_start lies in (0, 1], so every
    // block update decreases the objective.
    std::vector<double> num(ne), den(ne);
    for (int step = 0; step < opts.steps; ++step) {
        const double phase = opts.steps > 1 ? static_cast<double>(step) / (opts.steps - 1) : 0.0;
        const double lr    = opts.lr_end + 0.5 * (opts.lr_start - opts.lr_end) * (1.0 + std::cos(M_PI * phase));
        const double frac  = lr / opts.lr_start;

        for (int v = 0; v < graph.n_images; ++v) {
            for (std::size_t i = 0; i < pb.hw; ++i) {
                Vec3 acc = Vec3::Zero();
                double w = 0;
                for (const Term &t : pb.termsOf[v]) {
                    const double c = graph.edges[t.edge].confidence[t.view][i];
                    if (c == 0) continue;
                    const Vec3 y    = predicted(pb, s, t, i);
                    const double wr = c / std::sqrt((s.chi[v][i] - y).squaredNorm() + eps * eps);
                    acc += wr * y;
                    w += wr;
                }
                if (w > 0) s.chi[v][i] += frac * (acc / w - s.chi[v][i]);
            }
        }

        std::fill(num.begin(), num.end(), 0.0);
        std::fill(den.begin(), den.end(), 0.0);
        double gNum = 0, gDen = 0;
        for (int v = 0; v < graph.n_images; ++v) {
            for (const Term &t : pb.termsOf[v]) {
                const auto &pred = graph.edges[t.edge];
                for (std::size_t i = 0; i < pb.hw; ++i) {
                    const double c = pred.confidence[t.view][i];
                    if (c == 0) continue;
                    const Vec3 a    = pb.rot(t.edge) * (s.gamma * pred.points[t.view][i]);
                    const Vec3 b    = s.chi[v][i] - pb.trans(t.edge);
                    const double wr = c / std::sqrt((b - s.sigma[t.edge] * a).squaredNorm() + eps * eps);
                    num[t.edge] += wr * a.dot(b);
                    den[t.edge] += wr * a.squaredNorm();
                }
            }
        }
        for (std::size_t e = 0; e < ne; ++e) {
            if (den[e] > 0 && num[e] > 0) s.sigma[e] += frac * (num[e] / den[e] - s.sigma[e]);
        }

        for (int v = 0; v < graph.n_images; ++v) {
            for (const Term &t : pb.termsOf[v]) {
                const auto &pred = graph.edges[t.edge];
                for (std::size_t i = 0; i < pb.hw; ++i) {
                    const double c = pred.confidence[t.view][i];
                    if (c == 0) continue;
                    const Vec3 a    = pb.rot(t.edge) * (s.sigma[t.edge] * pred.points[t.view][i]);
                    const Vec3 b    = s.chi[v][i] - pb.trans(t.edge);
                    const double wr = c / std::sqrt((b - s.gamma * a).squaredNorm() + eps * eps);
                    gNum += wr * a.dot(b);
                    gDen += wr * a.squaredNorm();
                }
            }
        }
        if (gDen > 0 && gNum > 0) s.gamma += frac * (gNum / gDen - s.gamma);
        applyGauge(s);

        const bool last = step + 1 == opts.steps;
        if (last || (opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0)) {
            s.objective.push_back(objective(pb, s, opts.smoothing));
            s.checkpoint_steps.push_back(step + 1);
        }
    }
    for (const auto &pts : s.chi)
        for (const auto &x : pts)
            if (!x.allFinite()) throw NumericError("global_align: non-finite aligned point");
    return s;
}

// ---------------------------------------------------------------------------

double
icpGlobalScale(const std::vector<Vec3> &source, const std::vector<Vec3> &target, const IcpOptions &opts) {
    if (source.size() < 3 || target.size() < 3) throw ContractError("icp: need at least 3 points per set");
    // Deterministic stride subsampling keeps the cost bounded.
    auto subsample = [](const std::vector<Vec3> &pts, std::size_t cap) {
        if (cap == 0 || pts.size() <= cap) return pts;
        std::vector<Vec3> out;
        out.reserve(cap);
        for (std::size_t k = 0; k < cap; ++k) out.push_back(pts[k * pts.size() / cap]);
        return out;
    };
    const std::vector<Vec3> src = subsample(source, opts.max_points);
    const KdTree3 tree(subsample(target, opts.max_points * 4));

    Vec3 sc = Vec3::Zero(), tc = Vec3::Zero();
    for (const auto &p : src) sc += p;
    sc /= static_cast<double>(src.size());
    for (std::size_t i = 0; i < tree.size(); ++i) tc += tree.point(i);
    tc /= static_cast<double>(tree.size());
    double srcSpread = 0, tgtSpread = 0;
    for (const auto &p : src) srcSpread += (p - sc).squaredNorm();
    for (std::size_t i = 0; i < tree.size(); ++i) tgtSpread += (tree.point(i) - tc).squaredNorm();
    if (!(srcSpread > 0)) throw ContractError("icp: degenerate source (all points coincide)");
    srcSpread /= static_cast<double>(src.size());
    tgtSpread /= static_cast<double>(tree.size());
    double s = std::sqrt(tgtSpread / srcSpread);
    if (!(s > 0)) throw ContractError("icp: degenerate target (all points coincide)");

    for (int it = 0; it < opts.max_iterations; ++it) {
        std::vector<Vec3> matched(src.size());
        Vec3 mc = Vec3::Zero();
        for (std::size_t i = 0; i < src.size(); ++i) {
            matched[i] = tree.point(tree.nearest(s * (src[i] - sc) + tc));
            mc += matched[i];
        }
        mc /= static_cast<double>(src.size());
        double num = 0, den = 0;
        for (std::size_t i = 0; i < src.size(); ++i) {
            num += (matched[i] - mc).dot(src[i] - sc);
            den += (src[i] - sc).squaredNorm();
        }
        const double next = num / den;
        if (!(next > 0)) throw NumericError("icp: scale estimate became non-positive");
        const double change = std::abs(next - s) / s;
        s                   = next;
        tc                  = mc;
        if (change < opts.tolerance) break;
    }
    return s;
}

LocalScale
localScale(const std::vector<Vec3> &points, int width, int height, double tau) {
    if (width < 2 || height < 2) throw ContractError("local_scale: pointmap must be at least 2x2");
    if (points.size() != static_cast<std::size_t>(width) * height) {
        throw ContractError("local_scale: point count does not match dimensions");
    }
    LocalScale out;
    out.scale.resize(points.size());
    out.keep.assign(points.size(), true);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * width + c;
            double sum          = 0;
            int n               = 0;
            auto visit          = [&](int rr, int cc) {
                if (rr < 0 || cc < 0 || rr >= height || cc >= width) return;
                sum += (points[i] - points[static_cast<std::size_t>(rr) * width + cc]).norm();
                ++n;
            };
            visit(r - 1, c);
            visit(r + 1, c);
            visit(r, c - 1);
            visit(r, c + 1);
            out.scale[i] = sum / n;
        }
    }
    std::vector<double> sorted = out.scale;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double median = sorted[sorted.size() / 2];
    for (std::size_t i = 0; i < points.size(); ++i) out.keep[i] = out.scale[i] <= tau * median;
    return out;
}

const char *
toString(ScaleMode m) {
    switch (m) {
    case ScaleMode::None: return "none";
    case ScaleMode::Global: return "global";
    case ScaleMode::GlobalLocal: return "global+local";
    }
    return "?";
}

GaussianModel
assembleInit(const ConnectivityGraph &graph, const std::vector<Camera> &poses, const AlignmentResult &align,
             const AssembleInputs &in) {
    if (static_cast<int>(poses.size()) != graph.n_images) throw ContractError("assemble_init: need one pose per image");
    if (align.chi.size() != static_cast<std::size_t>(graph.n_images) || align.sigma.size() != graph.edges.size()) {
        throw ContractError("assemble_init: alignment does not match the graph");
    }
    if (!(in.s_global > 0)) throw ContractError("assemble_init: global scale must be positive");
    if (in.mode == ScaleMode::GlobalLocal && in.local.size() != graph.edges.size()) {
        throw ContractError("assemble_init: need local scales for every edge");
    }
    const int degree = graph.edges.front().gaussians.shDegree();
    GaussianModel model(degree);
    const double logGlobal = std::log(in.s_global);
    for (std::size_t e = 0; e < graph.edges.size(); ++e) {
        const auto &pred    = graph.edges[e];
        const std::size_t n = pred.pixelCount();
        if (pred.gaussians.shDegree() != degree) throw ContractError("assemble_init: mixed sh degrees");
        // Predicted orientations live in the reference camera frame.
        const Vec4 toWorld = quaternionFromRotation(poses[graph.pairs[e].p].rotation);
        double rawMean = 0;
        for (std::size_t k = 0; k < 2 * n; ++k) rawMean += pred.gaussians[k].log_scale.sum();
        rawMean /= static_cast<double>(6 * n);
        for (int j = 0; j < 2; ++j) {
            const int v = j == 0 ? graph.pairs[e].p : graph.pairs[e].q;
            if (in.mode == ScaleMode::GlobalLocal &&
                (in.local[e][j].scale.size() != n || in.local[e][j].keep.size() != n)) {
                throw ContractError("assemble_init: local scale map has the wrong size");
            }
            for (std::size_t i = 0; i < n; ++i) {
                if (pred.confidence[j][i] <= 0) continue;
                if (in.mode == ScaleMode::GlobalLocal && !in.local[e][j].keep[i]) continue;
                GaussianPrimitive g = pred.gaussians[j * n + i];
                g.position          = align.chi[v][i];
                g.rotation          = quaternionProduct(toWorld, g.rotation);
                g.confidence        = pred.confidence[j][i];
                switch (in.mode) {
                case ScaleMode::None: break;
                case ScaleMode::Global: g.log_scale.array() += logGlobal; break;
                case ScaleMode::GlobalLocal:
                    g.log_scale.array() += logGlobal + std::log(in.local[e][j].scale[i]) - rawMean;
                    break;
                }
                model.add(g);
            }
        }
    }
    if (model.empty()) throw ContractError("assemble_init: no Gaussians survive masking");
    model.sanitize();
    return model;
}

InitReport
initializeDevice(const std::vector<Camera> &cams, Predictor &predictor, const InitConfig &cfg) {
    InitReport rep;
    const int n = static_cast<int>(cams.size());
    rep.graph   = buildGraph(n, pairImages(n, cfg.stride), predictor);
    rep.align   = globalAlign(rep.graph, cams, cfg.align);

    AssembleInputs in;
    in.mode = cfg.mode;
    double logSum = 0;
    for (std::size_t e = 0; e < rep.graph.edges.size(); ++e) {
        const auto &pred    = rep.graph.edges[e];
        const Camera &ref   = cams[rep.graph.pairs[e].p];
        const std::size_t m = pred.pixelCount();
        std::vector<Vec3> source, target;
        std::array<LocalScale, 2> locals;
        for (int j = 0; j < 2; ++j) {
            const int v = j == 0 ? rep.graph.pairs[e].p : rep.graph.pairs[e].q;
            std::vector<Vec3> relative(m);
            for (std::size_t i = 0; i < m; ++i) {
                relative[i] = rep.align.sigma[e] * pred.points[j][i];
                if (pred.confidence[j][i] <= 0) continue;
                source.push_back(relative[i]);
                target.push_back(ref.toCamera(rep.align.chi[v][i]));
            }
            if (cfg.mode == ScaleMode::GlobalLocal) locals[j] = localScale(relative, pred.width, pred.height, cfg.tau);
        }
        logSum += std::log(icpGlobalScale(source, target));
        in.local.push_back(std::move(locals));
    }
    rep.s_global = std::exp(logSum / static_cast<double>(rep.graph.edges.size()));
    in.s_global  = rep.s_global;
    rep.model    = assembleInit(rep.graph, cams, rep.align, in);
    return rep;
}

GaussianModel
randomInit(const std::vector<Camera> &cams, std::size_t count, std::uint64_t seed, int shDegree) {
    if (cams.empty()) throw ContractError("random_init: no cameras");
    if (count == 0) throw ContractError("random_init: count must be positive");
    Vec2 lo = Vec2::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (const auto &c : cams) {
        lo = lo.cwiseMin(c.translation.head<2>());
        hi = hi.cwiseMax(c.translation.head<2>());
        for (const auto &[col, row] : {std::pair{0, 0}, {c.width - 1, 0}, {0, c.height - 1}, {c.width - 1, c.height - 1}}) {
            const Vec3 d = c.rotation * c.pixelRay(col, row);
            if (d.z() >= -1e-9) continue;
            const double t = -c.translation.z() / d.z();
            if (t <= 0) continue;
            const Vec3 hit = c.translation + t * d;
            lo             = lo.cwiseMin(hit.head<2>());
            hi             = hi.cwiseMax(hit.head<2>());
        }
    }
    const Vec2 size   = (hi - lo).cwiseMax(1e-6);
    const double diag = size.norm();
    const double spacing = std::sqrt(size.x() * size.y() / static_cast<double>(count));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GaussianModel model(shDegree);
    model.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        GaussianPrimitive g;
        g.position      = Vec3(lo.x() + size.x() * u(rng), lo.y() + size.y() * u(rng), diag * (-0.05 + 0.15 * u(rng)));
        g.log_scale     = Vec3::Constant(std::log(spacing));
        g.opacity_logit = logit(0.1);
        g.setBaseColor(Vec3(u(rng), u(rng), u(rng)));
        model.add(g);
    }
    return model;
}

} // namespace dgtr
