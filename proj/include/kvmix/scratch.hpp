#pragma once

#include <atomic>
#include <cstddef>

namespace kvmix::scratch {

// Allocation instrumentation for the attention paths. The fused kernels must
// not materialize full-precision copies of quantized regions, so tests reset
// this counter, run a kernel, and inspect how many auxiliary bytes were
// requested. Only buffers that are genuinely auxiliary (not function outputs)
// are recorded.

inline std::atomic<size_t>& counter() {
  static std::atomic<size_t> c{0};
  return c;
}

inline void reset() { counter().store(0, std::memory_order_relaxed); }
inline void add(size_t bytes) { counter().fetch_add(bytes, std::memory_order_relaxed); }
inline size_t allocated() { return counter().load(std::memory_order_relaxed); }

}  // namespace kvmix::scratch
