#pragma once

#include <cstddef>
#include <functional>

namespace fcan {

/// Worker cap: FCAN_THREADS when set to a positive integer, otherwise the
/// hardware concurrency.
std::size_t thread_budget();

/// Runs body(i) for i in [0, n). Iterations must write disjoint memory; the
/// result never depends on how many workers run.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace fcan
