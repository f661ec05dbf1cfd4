#pragma once

#include <cstddef>
#include <functional>

namespace alp::num {

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is processed by
/// exactly one thread; callers must write results to per-index slots and reduce them in
/// index order afterwards so the outcome does not depend on the worker count.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body);

} // namespace alp::num
