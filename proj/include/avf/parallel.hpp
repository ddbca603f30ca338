// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace avf {

/// Worker cap: min(AVF_THREADS, hardware concurrency), at least 1.
std::size_t worker_count();

/// Runs f(begin, end) over disjoint chunks of [0, n), possibly on worker
/// threads. Chunks write disjoint state, so results do not depend on the
/// number of workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& f);

} // namespace avf
