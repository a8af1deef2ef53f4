#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mfslq {

// Worker count: MFSLQ_THREADS caps it, hardware concurrency is the default.
inline int worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    int n = hw == 0 ? 1 : static_cast<int>(hw);
    if (const char* env = std::getenv("MFSLQ_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < n) n = cap;
        if (cap >= 1 && n < 1) n = cap;
    }
    return n < 1 ? 1 : n;
}

// Runs fn(block_index, begin, end) over fixed-size blocks of [0, count).
// The block layout is independent of the worker count, so per-block
// results (combined in block order) are reproducible under any
// parallel schedule.
inline void parallel_blocks(long count, long block_size, const std::function<void(long, long, long)>& fn) {
    if (count <= 0) return;
    const long n_blocks = (count + block_size - 1) / block_size;
    int workers = worker_count();
    if (workers <= 1 || n_blocks == 1) {
        for (long b = 0; b < n_blocks; ++b) fn(b, b * block_size, std::min(count, (b + 1) * block_size));
        return;
    }
    std::atomic<long> next(0);
    auto run = [&]() {
        for (;;) {
            long b = next.fetch_add(1);
            if (b >= n_blocks) break;
            fn(b, b * block_size, std::min(count, (b + 1) * block_size));
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers) - 1);
    for (int w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    for (auto& t : pool) t.join();
}

inline constexpr long kPathBlock = 1024;

}  // namespace mfslq
