// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Static 3D k-d tree for exact nearest-neighbor queries.
//
#pragma once

#include <dgtr/core.hpp>

#include <cstdint>
#include <vector>

namespace dgtr {

class KdTree3 {
  public:
    explicit KdTree3(std::vector<Vec3> points);

    std::size_t
    size() const {
        return mPoints.size();
    }
    const Vec3 &
    point(std::size_t i) const {
        return mPoints[i];
    }

    // Index of the closest point (ties resolved to the lowest index). Requires size() > 0.
    std::size_t nearest(const Vec3 &q) const;

  private:
    struct Node {
        std::uint32_t begin, end; // range into mOrder
        std::int32_t left = -1, right = -1;
        int axis          = 0;
        double split      = 0;
    };

    int build(std::uint32_t begin, std::uint32_t end);
    void search(int node, const Vec3 &q, std::size_t &best, double &bestD2) const;

    std::vector<Vec3> mPoints;
    std::vector<std::uint32_t> mOrder;
    std::vector<Node> mNodes;
};

} // namespace dgtr
