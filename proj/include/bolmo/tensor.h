#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bolmo {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape & shape);
std::string shape_str(const Shape & shape);

// Dense row-major tensor of 64-bit floats.
//
// Most ops view a tensor as a matrix of rows() x cols(), where cols() is the
// extent of the last axis and rows() the product of all leading axes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> data);
    static Tensor matrix(int64_t rows, int64_t cols, std::initializer_list<double> data);

    const Shape & shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t axis) const;
    int64_t rows() const;
    int64_t cols() const;
    bool is_scalar() const { return data_.size() == 1 && shape_.size() <= 1; }

    double * data() { return data_.data(); }
    const double * data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double> & storage() { return data_; }

    double & operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double & at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }
    double item() const;

    std::span<double> row(int64_t r);
    std::span<const double> row(int64_t r) const;

    Tensor reshaped(Shape shape) const;
    void fill(double v);
    bool all_finite() const;

    bool operator==(const Tensor & other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

// True iff shapes are equal and every element is bit-identical.
bool bit_equal(const Tensor & a, const Tensor & b);
double max_abs_diff(const Tensor & a, const Tensor & b);

} // namespace bolmo
