#pragma once

#include <cstddef>
#include <functional>

namespace stitchlab {

/// Calls fn(k) for k in [0, count) on up to `threads` workers. Each k is
/// visited exactly once; callers write results into per-k slots so the output
/// does not depend on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace stitchlab
