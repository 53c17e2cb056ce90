// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace sfmc {

/// Worker cap: SFMC_THREADS if set and positive, otherwise hardware cores.
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n). Each index must write disjoint memory, which
/// keeps results independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace sfmc
