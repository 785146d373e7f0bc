#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "psynet/errors.hpp"

namespace psynet {

/**
 * Dense row-major array of 64-bit reals.
 *
 * All numeric compute in the library goes through this type. The last axis
 * is contiguous, so `row()` hands out a span over it for rank-2 and rank-3
 * tensors without copying.
 */
class Tensor {
public:
    using Shape = std::vector<std::size_t>;

    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(product(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (data_.size() != product(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) throw IndexError("axis out of range");
        return shape_[axis];
    }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    // Contiguous slice over the last axis. Rank 2: row(i). Rank 3: row(i, j).
    std::span<double> row(std::size_t i) {
        const std::size_t n = shape_.back();
        return std::span<double>(data_).subspan(i * n, n);
    }
    std::span<const double> row(std::size_t i) const {
        const std::size_t n = shape_.back();
        return std::span<const double>(data_).subspan(i * n, n);
    }
    std::span<double> row(std::size_t i, std::size_t j) { return row(i * shape_[1] + j); }
    std::span<const double> row(std::size_t i, std::size_t j) const { return row(i * shape_[1] + j); }

    // Sub-tensor along the leading axis, copied.
    Tensor slice(std::size_t i) const {
        if (rank() < 2) throw DimensionError("slice requires rank >= 2");
        Shape sub(shape_.begin() + 1, shape_.end());
        const std::size_t n = product(sub);
        std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(i * n),
                              data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
        return Tensor(std::move(sub), std::move(d));
    }

    Tensor reshaped(Shape shape) const {
        Tensor t = *this;
        if (product(shape) != t.size()) {
            throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    double norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(*this, other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    static std::size_t product(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    static std::string shape_string(const Shape& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
        if (a.shape_ != b.shape_) {
            throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape_) + " vs " +
                                 shape_string(b.shape_));
        }
    }

private:
    static void check_shape(const Shape& shape) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

// Largest |a - b| over matching entries.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    Tensor::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace psynet
