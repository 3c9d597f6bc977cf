#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace deeprhythm {

// Storage on a fixed 64-byte boundary. Vectorized kernels peel differently
// depending on where a buffer starts, which changes float summation order;
// a fixed boundary keeps results independent of heap layout.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

}  // namespace deeprhythm
