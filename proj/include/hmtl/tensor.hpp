#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hmtl {

/// 64-byte aligned allocation. Vectorized reductions peel a scalar head up
/// to the first aligned element, so a fixed base alignment keeps their
/// summation order, and therefore results, identical from run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <typename U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense row-major float tensor. Activations use (N, C, H, W) or (N, D).
struct Tensor {
    std::vector<int> shape;
    FloatBuffer data;

    Tensor() = default;
    explicit Tensor(std::vector<int> dims, float fill = 0.0f) : shape(std::move(dims)) {
        data.assign(static_cast<std::size_t>(count(shape)), fill);
    }

    static std::int64_t count(const std::vector<int>& dims) {
        return std::accumulate(dims.begin(), dims.end(), std::int64_t{1},
                               [](std::int64_t a, int b) { return a * b; });
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    int dim(std::size_t i) const { return shape.at(i); }
    int rank() const { return static_cast<int>(shape.size()); }

    /// Elements per leading-axis entry (one sample).
    std::size_t stride0() const { return shape.empty() || shape[0] == 0 ? 0 : data.size() / shape[0]; }
    std::span<float> row(int n) { return std::span<float>(data).subspan(n * stride0(), stride0()); }
    std::span<const float> row(int n) const {
        return std::span<const float>(data).subspan(n * stride0(), stride0());
    }

    void zero() { std::fill(data.begin(), data.end(), 0.0f); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::string shape_string(const std::vector<int>& shape);

}  // namespace hmtl
