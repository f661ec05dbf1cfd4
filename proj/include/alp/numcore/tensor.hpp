#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace alp::num {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not conform.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a primitive produces (or receives) NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of 64-bit reals.
///
/// The invariant `shape_size(shape()) == size()` holds for every constructed
/// tensor. A rank-0 shape denotes a scalar with a single element.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return Tensor(Shape{1}, {value}); }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
    static Tensor vector(std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Rank-2 helpers; a rank-1 tensor is treated as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const& noexcept { return data_; }
    std::span<double> data() & noexcept { return data_; }
    // Spans into a temporary would dangle (e.g. `for (x : t.grad(v).data())`).
    std::span<const double> data() const&& = delete;
    const double* ptr() const noexcept { return data_.data(); }
    double* ptr() noexcept { return data_.data(); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    std::span<const double> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
    std::span<double> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

    double item() const;
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;
    /// Bitwise equality of shape and contents.
    bool identical(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<double> data_;
};

void require_finite(std::span<const double> values, std::string_view context);
void require_same_shape(const Tensor& a, const Tensor& b, std::string_view context);

} // namespace alp::num
