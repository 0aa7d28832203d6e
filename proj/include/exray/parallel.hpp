#pragma once

#include <cstddef>
#include <functional>

namespace exray {

/// Calls `task(i)` for i in [0, count) on up to `jobs` threads. Tasks must
/// write only to their own output slot; ordering of results is the caller's.
/// The first exception thrown by any task is rethrown after all threads join.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task);

}  // namespace exray
