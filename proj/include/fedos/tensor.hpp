#pragma once

#include <Eigen/Core>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fedos/error.hpp"

namespace fedos {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major n-d array. `data.size() == shape_size(shape)` always holds.
template <class Scalar>
struct Tensor {
    Shape shape;
    Vector<Scalar> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)), data(Vector<Scalar>::Zero(shape_size(shape))) {}

    Tensor(Shape s, Vector<Scalar> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_size(shape)) {
            throw ShapeError("tensor", "payload of " + std::to_string(data.size()) +
                                           " does not match shape " + shape_string(shape));
        }
    }

    Index size() const { return data.size(); }
    Index rank() const { return static_cast<Index>(shape.size()); }
    Index dim(std::size_t i) const { return shape.at(i); }

    Scalar* ptr() { return data.data(); }
    const Scalar* ptr() const { return data.data(); }

    /// Leading dimension times the rest, as a row-major matrix view.
    Eigen::Map<RowMatrix<Scalar>> rows() { return {data.data(), shape.at(0), data.size() / shape.at(0)}; }
    Eigen::Map<const RowMatrix<Scalar>> rows() const {
        return {data.data(), shape.at(0), data.size() / shape.at(0)};
    }

    bool all_finite() const { return data.allFinite(); }

    template <class Other>
    Tensor<Other> cast() const {
        return Tensor<Other>(shape, data.template cast<Other>());
    }

    bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

} // namespace fedos
