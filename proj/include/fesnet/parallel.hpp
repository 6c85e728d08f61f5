#pragma once

#include <cstddef>
#include <functional>

namespace fesnet::parallel {

/// Number of worker threads used by kernels. Initialised from the
/// FESNET_THREADS environment variable (default 1).
int num_threads();
void set_num_threads(int n);

/// Runs fn(begin, end) over a static contiguous partition of [0, n).
/// Callers must make each index write a disjoint output so results do not
/// depend on the thread count. Nested calls run inline.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace fesnet::parallel
