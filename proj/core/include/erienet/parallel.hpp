#pragma once

#include <cstddef>
#include <functional>

namespace erienet {

/// Worker cap: ERIENET_THREADS if set and positive, otherwise hardware concurrency.
std::size_t max_threads();

/// Overrides the worker cap for the rest of the process (0 restores the default).
void set_max_threads(std::size_t n);

/// Runs fn(i) for i in [0, n). Tasks may run on different threads; each
/// index is executed exactly once. Work partitioning never depends on the
/// thread count, so results are identical for any cap.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace erienet
