#pragma once

#include <cstdint>
#include <string>

#include "metadec/tensor.hpp"

namespace metadec {

/// 8-bit grayscale PNG as [H, W]. Color inputs are converted to luma,
/// 16-bit inputs are reduced to 8 bits.
Tensor<std::uint8_t> read_png_gray(const std::string& path);
void write_png_gray(const std::string& path, const Tensor<std::uint8_t>& image);

}  // namespace metadec
