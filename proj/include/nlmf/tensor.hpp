#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nlmf {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape);

// Dense row-major tensor of scalars. Canonical image layout is B x C x H x W.
// The compute dtype is float; the double instantiation exists for the
// finite-difference gradient-check mode.
template <class T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(Shape s) : shape(std::move(s)) {
        validate_shape(shape);
        data.assign(static_cast<std::size_t>(numel(shape)), T(0));
    }

    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        validate_shape(shape);
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

    static TensorT full(Shape s, T v) {
        TensorT t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static void validate_shape(const Shape& s) {
        if (s.empty()) throw std::invalid_argument("tensor rank must be >= 1");
        for (int e : s)
            if (e < 1) throw std::invalid_argument("tensor extents must be >= 1, got " + shape_str(s));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // Unchecked 4-d access, canonical layout.
    T& at4(int b, int c, int i, int j) {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(b) * dim(1) + c) * dim(2) + i) * dim(3) + j)];
    }
    T at4(int b, int c, int i, int j) const {
        return data[static_cast<std::size_t>(((static_cast<std::int64_t>(b) * dim(1) + c) * dim(2) + i) * dim(3) + j)];
    }
};

using Tensor = TensorT<float>;

template <class To, class From>
TensorT<To> cast(const TensorT<From>& t) {
    TensorT<To> out(t.shape);
    for (std::int64_t i = 0; i < t.size(); ++i)
        out.data[static_cast<std::size_t>(i)] = static_cast<To>(t.data[static_cast<std::size_t>(i)]);
    return out;
}

template <class T>
T max_abs(const TensorT<T>& t) {
    T m = 0;
    for (T v : t.data) m = std::max(m, std::abs(v));
    return m;
}

template <class T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    T m = 0;
    for (std::int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[static_cast<std::size_t>(i)] - b.data[static_cast<std::size_t>(i)]));
    return m;
}

template <class T>
bool all_finite(const TensorT<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// Concatenate along the channel dimension of the canonical 4-d layout.
template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 4 || b.rank() != 4)
        throw std::invalid_argument("concat_channels expects rank-4 tensors");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: batch/spatial mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    TensorT<T> out(Shape{B, Ca + Cb, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int bb = 0; bb < B; ++bb) {
        std::copy_n(a.ptr() + static_cast<std::int64_t>(bb) * Ca * plane, Ca * plane,
                    out.ptr() + static_cast<std::int64_t>(bb) * (Ca + Cb) * plane);
        std::copy_n(b.ptr() + static_cast<std::int64_t>(bb) * Cb * plane, Cb * plane,
                    out.ptr() + static_cast<std::int64_t>(bb) * (Ca + Cb) * plane + Ca * plane);
    }
    return out;
}

// NTF tensor file: 8-byte magic "NTENSOR1", little-endian u32 rank, rank u32
// extents, then the row-major payload as little-endian 32-bit floats.
void save_ntf(const std::string& path, const Tensor& t);
Tensor load_ntf(const std::string& path);

} // namespace nlmf
