#pragma once
/**
 * @file tensor_io.hpp
 * @brief Binary tensor files.
 *
 * Layout (all integers little-endian):
 *   "PTNS" | version u32 | dtype u32 | ndim u32 | dims u32[ndim] | payload
 * The payload is row-major, little-endian IEEE-754 of the tagged width.
 */

#include <cstdint>
#include <filesystem>
#include <vector>

#include "picnn/tensor.hpp"

namespace picnn {

enum class DType : std::uint32_t { f64 = 1, f32 = 2 };

inline constexpr std::uint32_t kTensorFileVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype = DType::f64);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f64);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace picnn
