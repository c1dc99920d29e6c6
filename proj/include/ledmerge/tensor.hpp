#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "ledmerge/dtype.hpp"

namespace ledmerge {

using Shape = std::vector<std::uint64_t>;

std::uint64_t shape_numel(const Shape& shape);

/// A materialized tensor in compute precision.
///
/// Values live as float for f32/f16/bf16 storage and as double for f64
/// storage. `dtype()` is the storage type the tensor narrows to when it is
/// written back into a checkpoint.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> values, DType storage = DType::F32);
    Tensor(Shape shape, std::vector<double> values);

    /// Zero tensor of the given storage dtype.
    static Tensor zeros(Shape shape, DType storage);

    DType dtype() const { return dtype_; }
    const Shape& shape() const { return shape_; }
    std::size_t numel() const;
    bool is_f64() const { return computes_in_f64(dtype_); }

    template <class T>
    std::span<const T> values() const {
        return std::get<std::vector<T>>(data_);
    }
    template <class T>
    std::span<T> values() {
        return std::get<std::vector<T>>(data_);
    }

    /// Element read widened to double, for tests and reports.
    double at(std::size_t i) const;

    template <class F>
    decltype(auto) visit(F&& f) const {
        return std::visit(std::forward<F>(f), data_);
    }
    template <class F>
    decltype(auto) visit(F&& f) {
        return std::visit(std::forward<F>(f), data_);
    }

    /// Same values, different storage dtype. Only moves between dtypes that
    /// share a compute precision (f32/f16/bf16), or is the identity.
    Tensor with_storage(DType storage) const;
    /// Same values under a shape with the same element count. Throws ShapeError.
    Tensor reshaped(Shape shape) &&;

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    DType dtype_ = DType::F32;
    std::variant<std::vector<float>, std::vector<double>> data_;
};

/// Compute-precision value type of a storage dtype.
template <DType D>
using compute_t = std::conditional_t<D == DType::F64, double, float>;

} // namespace ledmerge
