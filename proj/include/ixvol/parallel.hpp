#pragma once

#include <cstdint>
#include <exception>
#include <thread>
#include <vector>

namespace ixvol {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Static partition of [0, n) across workers. Each worker gets one contiguous
// range and must write only to its own slots, so the result is identical for
// any thread count.
template <typename Fn>
void parallel_for(std::int64_t n, int threads, Fn&& body) {
    threads = resolve_threads(threads);
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        body(std::int64_t{0}, n);
        return;
    }
    if (static_cast<std::int64_t>(threads) > n) threads = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    std::exception_ptr first_error;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    const std::int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, &errors, t, lo, hi] {
            try {
                body(lo, hi);
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace ixvol
