// SPDX-License-Identifier: Apache-2.0

#include "r2f/tensor.hpp"

#include <cmath>
#include <sstream>

#include "r2f/error.hpp"

namespace r2f {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0F) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
        fail(ErrorKind::shape, "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                   shape_str(shape_));
    }
}

std::size_t Tensor::rows() const noexcept {
    if (shape_.size() < 2) return 1;
    return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
    if (shape_.empty()) return 1;
    return shape_.back();
}

float Tensor::item() const {
    if (data_.size() != 1) fail(ErrorKind::shape, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(float v) {
    for (auto& x : data_) x = v;
}

double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) fail(ErrorKind::shape, "dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

}  // namespace r2f
