#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "starvc/error.hpp"
#include "starvc/rng.hpp"

namespace starvc::num {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

/// Dense row-major array. Rank 0 is a scalar. Matrix-style accessors treat
/// every leading axis as rows and the last axis as columns.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_size(shape_))
            throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                                 shape_str(shape_));
    }

    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

    static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        const int r = static_cast<int>(rows.size());
        const int c = r ? static_cast<int>(rows.begin()->size()) : 0;
        std::vector<T> d;
        d.reserve(static_cast<std::size_t>(r) * c);
        for (auto& row : rows) {
            if (static_cast<int>(row.size()) != c) throw DimensionError("ragged matrix literal");
            d.insert(d.end(), row.begin(), row.end());
        }
        return BasicTensor({r, c}, std::move(d));
    }

    static BasicTensor vector(std::initializer_list<T> v) {
        return BasicTensor({static_cast<int>(v.size())}, std::vector<T>(v));
    }

    static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        BasicTensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        BasicTensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    int cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    int rows() const noexcept {
        return cols() == 0 ? 0 : static_cast<int>(data_.size() / static_cast<std::size_t>(cols()));
    }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
    const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

    std::span<T> row(int r) { return {data_.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())}; }
    std::span<const T> row(int r) const {
        return {data_.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
    }

    T item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    BasicTensor reshaped(Shape s) const { return BasicTensor(std::move(s), data_); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> d(data_.size());
        std::transform(data_.begin(), data_.end(), d.begin(), [](T x) { return static_cast<U>(x); });
        return BasicTensor<U>(shape_, std::move(d));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T x) { return std::isfinite(x); });
    }

    bool same_bits(const BasicTensor& o) const {
        return shape_ == o.shape_ &&
               std::equal(data_.begin(), data_.end(), o.data_.begin(), o.data_.end(),
                          [](T a, T b) { return std::memcmp(&a, &b, sizeof(T)) == 0; });
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <class T>
double sum_squares(const BasicTensor<T>& t) {
    double s = 0.0;
    for (T x : t.values()) s += static_cast<double>(x) * x;
    return s;
}

template <class T>
double l2_norm(const BasicTensor<T>& t) {
    return std::sqrt(sum_squares(t));
}

}  // namespace starvc::num
