#pragma once

#include <functional>

namespace phieat {

// Worker count: min(hardware_concurrency, PHIEAT_THREADS if set).
int worker_count();

// Runs fn(begin, end, chunk_index) over [0, n) split into `chunks` contiguous
// ranges. Chunk boundaries depend only on n and chunks, never on the worker
// count, so per-chunk partial results can be reduced in chunk order and the
// outcome is identical for any PHIEAT_THREADS setting.
void parallel_chunks(int n, int chunks, const std::function<void(int, int, int)>& fn);

// Convenience: one index at a time.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace phieat
