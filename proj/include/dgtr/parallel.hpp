// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstddef>
#include <functional>

namespace dgtr {

// Worker count used by parallelFor; defaults to the hardware concurrency.
int threadCount();
void setThreadCount(int n);

// Calls fn(i) for i in [0, n). Work items are split into contiguous chunks; callers
// must write to disjoint outputs so results do not depend on the schedule.
void parallelFor(std::size_t n, const std::function<void(std::size_t)> &fn);

} // namespace dgtr
