#pragma once

#include <functional>

namespace lara {

// Worker cap: min(hardware, LARA_THREADS env if set). At least 1.
int max_threads();
void set_thread_cap(int n);  // 0 restores the default

// Runs fn(i) for i in [0, n) on up to max_threads() workers with a static
// block partition. Results must be written to per-index slots; any ordering
// of reads across indices after the call is deterministic.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace lara
