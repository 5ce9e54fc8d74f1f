#ifndef QMRI_ARRAY_HPP
#define QMRI_ARRAY_HPP

#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qmri {

using index_t = std::ptrdiff_t;

template <class S>
using cx = std::complex<S>;
using cplx = std::complex<double>;

/// Volume extent (H, W, D). Voxels are flattened row-major: z fastest.
struct Dims3 {
    index_t nx = 0;
    index_t ny = 0;
    index_t nz = 0;

    constexpr index_t voxels() const { return nx * ny * nz; }
    constexpr index_t offset(index_t x, index_t y, index_t z) const { return (x * ny + y) * nz + z; }
    constexpr bool valid() const { return nx > 0 && ny > 0 && nz > 0; }

    friend constexpr bool operator==(const Dims3&, const Dims3&) = default;
};

inline std::string to_string(const Dims3& d) {
    return "(" + std::to_string(d.nx) + "," + std::to_string(d.ny) + "," + std::to_string(d.nz) + ")";
}

inline void require_same_dims(const Dims3& a, const Dims3& b, const std::string& what) {
    if (a.nx != b.nx) throw std::invalid_argument(what + ": extent mismatch on axis H");
    if (a.ny != b.ny) throw std::invalid_argument(what + ": extent mismatch on axis W");
    if (a.nz != b.nz) throw std::invalid_argument(what + ": extent mismatch on axis D");
}

/// A single 3D volume.
template <class T>
class Volume {
public:
    Volume() = default;
    explicit Volume(Dims3 dims, T fill = T{}) : dims_(dims), data_(static_cast<std::size_t>(dims.voxels()), fill) {}

    const Dims3& dims() const { return dims_; }
    index_t size() const { return static_cast<index_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T& operator[](index_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](index_t i) const { return data_[static_cast<std::size_t>(i)]; }
    T& operator()(index_t x, index_t y, index_t z) { return (*this)[dims_.offset(x, y, z)]; }
    const T& operator()(index_t x, index_t y, index_t z) const { return (*this)[dims_.offset(x, y, z)]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }
    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    friend bool operator==(const Volume&, const Volume&) = default;

private:
    Dims3 dims_{};
    std::vector<T> data_;
};

/// A stack of `count` volumes sharing one extent, stored volume-major:
/// element (n, voxel) lives at n * voxels + voxel. Used for frames, coils
/// and basis channels alike.
template <class T>
class Stack {
public:
    Stack() = default;
    Stack(Dims3 dims, index_t count, T fill = T{})
        : dims_(dims), count_(count), data_(static_cast<std::size_t>(dims.voxels() * count), fill) {}

    const Dims3& dims() const { return dims_; }
    index_t count() const { return count_; }
    index_t voxels() const { return dims_.voxels(); }
    index_t size() const { return static_cast<index_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T& operator()(index_t n, index_t voxel) { return data_[static_cast<std::size_t>(n * voxels() + voxel)]; }
    const T& operator()(index_t n, index_t voxel) const {
        return data_[static_cast<std::size_t>(n * voxels() + voxel)];
    }
    T& operator[](index_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](index_t i) const { return data_[static_cast<std::size_t>(i)]; }

    std::span<T> slice(index_t n) { return {data_.data() + n * voxels(), static_cast<std::size_t>(voxels())}; }
    std::span<const T> slice(index_t n) const {
        return {data_.data() + n * voxels(), static_cast<std::size_t>(voxels())};
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    friend bool operator==(const Stack&, const Stack&) = default;

private:
    Dims3 dims_{};
    index_t count_ = 0;
    std::vector<T> data_;
};

template <class T>
double squared_norm(std::span<const T> v) {
    double acc = 0.0;
    for (const auto& x : v) acc += static_cast<double>(std::norm(x));
    return acc;
}

template <class T>
double squared_norm(const Stack<T>& s) {
    return squared_norm(std::span<const T>(s.values()));
}

}  // namespace qmri

#endif  // QMRI_ARRAY_HPP
