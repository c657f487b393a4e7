#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace iternet {

/// Keeps large activation buffers on the heap instead of fresh mmap/munmap
/// pairs per allocation. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
}

}  // namespace iternet
