#pragma once

#include <cstddef>
#include <functional>

namespace cdev {

/// Worker count from CDEV_THREADS (0 or unset = hardware concurrency).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on `workers` threads (0 = worker_count()).
/// Callers write results by index, so output never depends on scheduling.
/// The exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t workers = 0);

}  // namespace cdev
