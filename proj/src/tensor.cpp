#include "ledmerge/tensor.hpp"

#include <fmt/core.h>

#include "ledmerge/errors.hpp"

namespace ledmerge {

std::uint64_t shape_numel(const Shape& shape) {
    std::uint64_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

Tensor::Tensor(Shape shape, std::vector<float> values, DType storage)
    : shape_(std::move(shape)), dtype_(storage), data_(std::move(values)) {
    if (computes_in_f64(storage)) throw DtypeError("float values cannot back an F64 tensor");
    if (shape_numel(shape_) != std::get<std::vector<float>>(data_).size())
        throw ShapeError(fmt::format("tensor of {} values does not fill its shape ({} elements)",
                                     std::get<std::vector<float>>(data_).size(), shape_numel(shape_)));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), dtype_(DType::F64), data_(std::move(values)) {
    if (shape_numel(shape_) != std::get<std::vector<double>>(data_).size())
        throw ShapeError(fmt::format("tensor of {} values does not fill its shape ({} elements)",
                                     std::get<std::vector<double>>(data_).size(), shape_numel(shape_)));
}

Tensor Tensor::zeros(Shape shape, DType storage) {
    const auto n = shape_numel(shape);
    if (computes_in_f64(storage)) return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), storage);
}

std::size_t Tensor::numel() const {
    return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Tensor::at(std::size_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

Tensor Tensor::with_storage(DType storage) const {
    if (computes_in_f64(storage) != computes_in_f64(dtype_))
        throw DtypeError(fmt::format("cannot re-tag {} tensor as {}", dtype_name(dtype_), dtype_name(storage)));
    Tensor out = *this;
    out.dtype_ = storage;
    return out;
}

Tensor Tensor::reshaped(Shape shape) && {
    if (shape_numel(shape) != numel())
        throw ShapeError(fmt::format("cannot view {} elements as {} elements", numel(), shape_numel(shape)));
    Tensor out = std::move(*this);
    out.shape_ = std::move(shape);
    return out;
}

} // namespace ledmerge
