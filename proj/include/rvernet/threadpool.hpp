// Deterministic parallel_for. Work is split into contiguous index ranges so
// every output element is written by exactly one worker with a fixed inner
// loop order; results are bitwise identical for any thread count.
#pragma once

#include <cstdint>
#include <functional>

namespace rvernet {

// Number of worker threads. Initialized from RVERNET_THREADS (default 1).
int num_threads();

// Override the thread count at runtime (clamped to >= 1).
void set_num_threads(int n);

// Runs fn(begin, end) over a partition of [0, n). With one thread the call
// runs inline on the caller.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace rvernet
