#pragma once

// Process-level setup: allocator tuning and BLAS thread count.

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "maskflow/blas.hpp"

namespace maskflow {

// Keeps large tensor buffers on the heap instead of fresh mmaps per allocation.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Resolves the worker count: explicit request, then MASKFLOW_THREADS, then all
// cores. Deterministic mode always uses one thread.
inline int resolve_threads(int requested, bool deterministic) {
  if (deterministic) return 1;
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MASKFLOW_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

inline int configure_runtime(int requested_threads = 0, bool deterministic = false) {
  tune_allocator();
  const int n = resolve_threads(requested_threads, deterministic);
  blas::set_threads(n);
  return n;
}

}  // namespace maskflow
