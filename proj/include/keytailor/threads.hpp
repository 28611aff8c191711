#pragma once

#include <cstddef>
#include <functional>

namespace kt {

/// Worker count: KEYTAILOR_THREADS if set, else hardware concurrency capped at 8.
size_t thread_count();

/// Splits [0,n) into contiguous chunks, one per worker. Each index is handled
/// by exactly one worker with a fixed sequential inner order, so results are
/// bit-identical for any thread count.
void parallel_for(size_t n, const std::function<void(size_t begin, size_t end)>& fn);

}  // namespace kt
