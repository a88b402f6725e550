#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace phieat {

// Vector storage pinned to a fixed 64-byte boundary. Wide SIMD kernels split
// loops based on the runtime address of the data; with plain malloc alignment
// that split varies per allocation and float reductions stop being
// bit-reproducible. Pinning the base makes every pass over the same layout
// take the same code path.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(Align));
  }

  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

}  // namespace phieat
