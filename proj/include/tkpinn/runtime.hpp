#pragma once

/**
 * @file runtime.hpp
 * @brief Process-level tuning for the training loop.
 */

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tkp {

/// Keeps large training buffers on the heap instead of fresh mmap pages.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
  mallopt(M_TOP_PAD, 256 * 1024 * 1024);
#endif
}

}  // namespace tkp
