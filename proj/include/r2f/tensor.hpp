// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace r2f {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major f32 tensor. Rank 0 (shape {}) holds a single scalar.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float v) { return Tensor({}, {v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    // Matrix view helpers. A rank-1 tensor is treated as a single row.
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    std::vector<float>& vec() noexcept { return data_; }
    const std::vector<float>& vec() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    float item() const;
    bool all_finite() const noexcept;
    void fill(float v);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

using TensorMap = std::map<std::string, Tensor>;

/// Double-accumulated Euclidean norm over one or more tensors.
double l2_norm(std::span<const float> v);
double dot(std::span<const float> a, std::span<const float> b);

}  // namespace r2f
