// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace csimae {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// Dense row-major n-dimensional array. Axis lengths are strictly positive;
/// scalars are represented as shape [1].
template <typename T>
class Tensor {
public:
    Tensor() : shape_{1}, data_(1, T(0)) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate();
    }

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_axes(shape_);
        data_.assign(shape_numel(shape_), T(0));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T(1);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    const std::vector<T>& data() const { return data_; }
    std::vector<T>& data() { return data_; }
    const T* raw() const { return data_.data(); }
    T* raw() { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool is_scalar() const { return data_.size() == 1; }

    T scalar_value() const {
        if (!is_scalar()) throw std::invalid_argument("tensor: expected a single-element tensor, got shape " + shape_str(shape_));
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    /// Flat offset of a multi-index.
    std::size_t offset(const std::vector<std::size_t>& idx) const {
        std::size_t off = 0, stride = 1;
        for (std::size_t i = shape_.size(); i-- > 0;) {
            off += idx[i] * stride;
            stride *= shape_[i];
        }
        return off;
    }

    T& at(const std::vector<std::size_t>& idx) { return data_[offset(idx)]; }
    const T& at(const std::vector<std::size_t>& idx) const { return data_[offset(idx)]; }

    Tensor reshaped(Shape s) const {
        check_axes(s);
        if (shape_numel(s) != data_.size())
            throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    static void check_axes(const Shape& s) {
        if (s.empty()) throw std::invalid_argument("tensor: rank-0 shapes are not supported");
        for (auto d : s)
            if (d == 0) throw std::invalid_argument("tensor: axis lengths must be strictly positive, got " + shape_str(s));
    }

    void validate() const {
        check_axes(shape_);
        if (shape_numel(shape_) != data_.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match buffer of " +
                                        std::to_string(data_.size()) + " elements");
    }

    Shape shape_;
    std::vector<T> data_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

}  // namespace csimae
