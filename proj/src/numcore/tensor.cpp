#include "alp/numcore/tensor.hpp"


#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>

namespace alp::num {

std::size_t shape_size(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (shape_size(shape_) != data_.size()) {
        throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::full(Shape shape, double value)
{
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
{
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values)
{
    return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const
{
    if (shape_.size() == 2) {
        return shape_[0];
    }
    if (shape_.size() == 1) {
        return 1;
    }
    throw ShapeError("rows() requires rank 1 or 2, got " + shape_string(shape_));
}

std::size_t Tensor::cols() const
{
    if (shape_.size() == 2) {
        return shape_[1];
    }
    if (shape_.size() == 1) {
        return shape_[0];
    }
    throw ShapeError("cols() requires rank 1 or 2, got " + shape_string(shape_));
}

double Tensor::item() const
{
    if (data_.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept
{
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

bool Tensor::identical(const Tensor& other) const noexcept
{
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

void require_finite(std::span<const double> values, std::string_view context)
{
    // Non-finite doubles are exactly those with an all-ones exponent.
    unsigned bad = 0;
    for (double v : values) {
        bad |= ((std::bit_cast<std::uint64_t>(v) >> 52) & 0x7ffU) == 0x7ffU;
    }
    if (bad == 0) {
        return;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError("non-finite value " + std::to_string(values[i]) + " at index " +
                               std::to_string(i) + " in " + std::string(context));
        }
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view context)
{
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(context) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

} // namespace alp::num
