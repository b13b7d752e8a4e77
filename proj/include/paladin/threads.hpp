#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace paladin {

inline int worker_count() {
    if (const char* env = std::getenv("PALADIN_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

/// Run fn(i) for i in [0, n). Work items must be independent; callers that
/// reduce results must do so afterwards in index order so the outcome is
/// identical regardless of scheduling.
template <class F>
void parallel_for(int n, F&& fn, int workers = 0) {
    if (workers <= 0) workers = worker_count();
    if (workers == 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto run = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const int spawn = std::min(workers, n) - 1;
    pool.reserve(size_t(spawn));
    for (int w = 0; w < spawn; ++w) pool.emplace_back(run);
    run();
    for (auto& th : pool) th.join();
}

} // namespace paladin
