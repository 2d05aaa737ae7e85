#pragma once

#include <cstddef>
#include <functional>

namespace impression {

/// Worker count from IMPRESSION_THREADS; unset or 0 means hardware concurrency.
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to thread_count() threads. Callers write
/// results into per-index slots so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace impression
