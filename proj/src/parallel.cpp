// SPDX-License-Identifier: Apache-2.0
#include "avf/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace avf {

std::size_t worker_count() {
    static const std::size_t cached = [] {
        std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
        if (const char* env = std::getenv("AVF_THREADS")) {
            const long requested = std::strtol(env, nullptr, 10);
            if (requested >= 1) hw = std::min<std::size_t>(hw, static_cast<std::size_t>(requested));
        }
        return hw;
    }();
    return cached;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& f) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1 || n < 2) {
        f(0, n);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        threads.emplace_back([&f, begin, end] { f(begin, end); });
    }
    for (std::thread& t : threads) t.join();
}

} // namespace avf
