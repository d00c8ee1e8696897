#pragma once

// Reusable per-thread scratch buffers for the GEMM-lowering temporaries
// inside conv2d / conv_transpose2d. A fresh std::vector per call would
// hit mmap + page-fault churn on every batch (the buffers run tens of
// megabytes); reusing warm allocations removes that entirely. Contents
// are garbage on entry — every user must fully overwrite or explicitly
// zero the span it asks for.

#include <cstddef>
#include <span>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace jl1::detail {

// Distinct slots may be alive at the same time inside one op; slots are
// only reused across ops, never concurrently within one.
inline constexpr int kScratchSlots = 6;

template <typename T>
std::span<T> scratch(int slot, std::size_t n) {
  static thread_local std::vector<T> pool[kScratchSlots];
  auto& buf = pool[slot];
  if (buf.size() < n) buf.resize(n);
  return std::span<T>(buf.data(), n);
}

// Keeps glibc from serving multi-megabyte tensor allocations via
// mmap/munmap pairs (each round trip re-faults every page). Idempotent;
// called from the training and evaluation entry points.
inline void warm_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace jl1::detail
