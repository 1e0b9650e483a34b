#pragma once

#include <cstddef>
#include <functional>

namespace ps {

// Process-wide worker count. 0 restores the hardware default.
void set_thread_count(int n);
int thread_count();

// Runs fn(i) for i in [0, n). Work is split into contiguous index ranges, one
// per worker, so writes to disjoint per-index slots never race. Results must
// not depend on the split: fn may only write to state owned by index i.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace ps
