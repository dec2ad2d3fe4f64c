#pragma once

#include <vector>

#include "metadec/tensor.hpp"

namespace metadec {

/// Gaussian high-pass weights over the DC-centered spectrum:
/// M(u,v) = 1 - exp(-((u-u0)^2 + (v-v0)^2) / (2 sigma^2)), (u0,v0) = (h/2, w/2).
struct HighpassMask {
  int height = 0;
  int width = 0;
  double sigma = 0;
  int u0 = 0;
  int v0 = 0;
  std::vector<double> values;  // row-major over centered coordinates (u, v)

  double at(int u, int v) const { return values[static_cast<std::size_t>(u) * width + v]; }
};

HighpassMask gaussian_highpass_mask(int height, int width, double sigma);

/// Mask of ones; filtering with it reproduces the input (transform round trip).
HighpassMask identity_mask(int height, int width);

/// Two-channel network input: the image and its high-pass component.
struct SpatialFrequencyInput {
  Tensor<double> image;     // [H, W]
  Tensor<double> highpass;  // [H, W]

  int height() const { return image.dim(0); }
  int width() const { return image.dim(1); }
};

/// x_hp = IFFT(M ⊙ FFT(x)) on the centered spectrum, packed as [x ; x_hp].
SpatialFrequencyInput highpass_filter(const Tensor<double>& image, const HighpassMask& mask);
SpatialFrequencyInput highpass_filter(const Tensor<double>& image, double sigma);

/// Zero mean, unit variance per image (a constant image maps to zeros).
Tensor<double> normalize_image(const Tensor<double>& image);

/// Normalizes `raw` [H,W] and applies the high-pass stage.
SpatialFrequencyInput spatial_frequency_input(const Tensor<double>& raw, double sigma);

}  // namespace metadec
