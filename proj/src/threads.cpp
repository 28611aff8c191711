#include "keytailor/threads.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace kt {

size_t thread_count() {
    static size_t cached = [] {
        if (const char* env = std::getenv("KEYTAILOR_THREADS")) {
            long v = std::atol(env);
            if (v >= 1) return static_cast<size_t>(v);
        }
        size_t hw = std::thread::hardware_concurrency();
        return std::min<size_t>(hw ? hw : 1, 8);
    }();
    return cached;
}

void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    size_t workers = std::min(thread_count(), n);
    if (workers <= 1) {
        if (n) fn(0, n);
        return;
    }
    size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        size_t b = w * chunk;
        size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace kt
