#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cntl {

// Training allocates and frees many multi-megabyte tensors per step. Keeping
// them on the heap instead of fresh mmap regions avoids repeated page faults
// (about 20% of step time at desk scale).
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

}  // namespace cntl
