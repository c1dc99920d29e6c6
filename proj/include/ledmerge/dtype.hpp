#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace ledmerge {

/// Storage element type of a checkpoint tensor.
///
/// Arithmetic never happens in the storage type: f16/bf16/f32 tensors are
/// widened to float on read, f64 tensors stay double. Narrowing back to the
/// storage type rounds to nearest, ties to even.
enum class DType : std::uint8_t { F32, F16, BF16, F64 };

std::size_t dtype_width(DType dtype);

/// Safetensors spelling ("F32", "F16", "BF16", "F64").
std::string_view dtype_name(DType dtype);

/// Throws DtypeError for anything outside the supported set.
DType parse_dtype(std::string_view name);

/// True when values of this dtype are computed in double precision.
constexpr bool computes_in_f64(DType dtype) { return dtype == DType::F64; }

float f16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_f16(float value);
float bf16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_bf16(float value);

} // namespace ledmerge
