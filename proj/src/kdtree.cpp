// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include <dgtr/kdtree.hpp>

#include <algorithm>
#include <limits>
#include <numeric>

namespace dgtr {

namespace {
constexpr std::uint32_t kLeafSize = 8;
}

KdTree3::KdTree3(std::vector<Vec3> points) : mPoints(std::move(points)) {
    if (mPoints.size() >= std::numeric_limits<std::uint32_t>::max()) {
        throw ContractError("kd-tree: too many points");
    }
    mOrder.resize(mPoints.size());
    std::iota(mOrder.begin(), mOrder.end(), 0u);
    if (!mPoints.empty()) {
        mNodes.reserve(2 * mPoints.size() / kLeafSize + 2);
        build(0, static_cast<std::uint32_t>(mPoints.size()));
    }
}

int
KdTree3::build(std::uint32_t begin, std::uint32_t end) {
    const int id = static_cast<int>(mNodes.size());
    mNodes.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (std::uint32_t i = begin; i < end; ++i) {
        lo = lo.cwiseMin(mPoints[mOrder[i]]);
        hi = hi.cwiseMax(mPoints[mOrder[i]]);
    }
    int axis;
    (hi - lo).maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(mOrder.begin() + begin, mOrder.begin() + mid, mOrder.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                         const double va = mPoints[a][axis], vb = mPoints[b][axis];
                         return va != vb ? va < vb : a < b;
                     });
    const double split = mPoints[mOrder[mid]][axis];
    const int left     = build(begin, mid);
    const int right    = build(mid, end);
    mNodes[id].axis    = axis;
    mNodes[id].split   = split;
    mNodes[id].left    = left;
    mNodes[id].right   = right;
    return id;
}

void
KdTree3::search(int node, const Vec3 &q, std::size_t &best, double &bestD2) const {
    const Node &n = mNodes[node];
    if (n.left < 0) {
        for (std::uint32_t i = n.begin; i < n.end; ++i) {
            const std::uint32_t idx = mOrder[i];
            const double d2         = (mPoints[idx] - q).squaredNorm();
            if (d2 < bestD2 || (d2 == bestD2 && idx < best)) {
                bestD2 = d2;
                best   = idx;
            }
        }
        return;
    }
    const double diff = q[n.axis] - n.split;
    const int nearSide = diff < 0 ? n.left : n.right;
    const int farSide  = diff < 0 ? n.right : n.left;
    search(nearSide, q, best, bestD2);
    // Points equal to the split value may sit on either side, hence <=.
    if (diff * diff <= bestD2) search(farSide, q, best, bestD2);
}

std::size_t
KdTree3::nearest(const Vec3 &q) const {
    if (mPoints.empty()) throw ContractError("kd-tree: query on empty tree");
    std::size_t best = std::numeric_limits<std::size_t>::max();
    double bestD2    = std::numeric_limits<double>::infinity();
    search(0, q, best, bestD2);
    return best;
}

} // namespace dgtr
