#include "bolmo/tensor.h"

#include "bolmo/errors.h"

#include <cmath>
#include <cstring>

namespace bolmo {

int64_t shape_numel(const Shape & shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) {
            throw ShapeError("negative extent in shape " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape & shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> data) {
    const auto n = static_cast<int64_t>(data.size());
    return Tensor({n}, std::move(data));
}

Tensor Tensor::matrix(int64_t rows, int64_t cols, std::initializer_list<double> data) {
    return Tensor({rows, cols}, std::vector<double>(data));
}

int64_t Tensor::dim(int64_t axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis out of range for shape " + shape_str(shape_));
    }
    return shape_[static_cast<size_t>(axis)];
}

int64_t Tensor::rows() const {
    if (shape_.empty()) return 1;
    int64_t r = 1;
    for (size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
    return r;
}

int64_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape_));
    }
    return data_[0];
}

std::span<double> Tensor::row(int64_t r) {
    const int64_t c = cols();
    return {data_.data() + r * c, static_cast<size_t>(c)};
}

std::span<const double> Tensor::row(int64_t r) const {
    const int64_t c = cols();
    return {data_.data() + r * c, static_cast<size_t>(c)};
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    // x * 0 is NaN exactly for non-finite x; the sum vectorizes
    double acc = 0.0;
    for (double v : data_) acc += v * 0.0;
    return acc == 0.0;
}

bool bit_equal(const Tensor & a, const Tensor & b) {
    if (a.shape() != b.shape()) return false;
    return a.numel() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

double max_abs_diff(const Tensor & a, const Tensor & b) {
    if (a.numel() != b.numel()) {
        throw ShapeError("max_abs_diff: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace bolmo
