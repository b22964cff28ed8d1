#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace cvmh {

namespace detail {
inline std::size_t& thread_cap() {
    static std::size_t cap = [] {
        const char* env = std::getenv("CVMH_THREADS");
        if (env == nullptr) return std::size_t{1};
        try {
            const long v = std::stol(env);
            return v < 1 ? std::size_t{1} : static_cast<std::size_t>(v);
        } catch (...) {
            return std::size_t{1};
        }
    }();
    return cap;
}
}  // namespace detail

/// Number of worker threads kernels may use (CVMH_THREADS, default 1).
inline std::size_t num_threads() { return detail::thread_cap(); }
inline void set_num_threads(std::size_t n) { detail::thread_cap() = std::max<std::size_t>(1, n); }

/// Runs fn(i) for i in [0, n). Work is split over the batch axis only; every
/// index writes disjoint memory, so the result does not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(num_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace cvmh
