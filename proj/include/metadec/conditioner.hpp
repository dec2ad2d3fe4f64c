#pragma once

#include "metadec/encoder.hpp"

namespace metadec {

/// Token grid shared by every scale: ceil(H/32) × ceil(W/32).
struct TokenGrid {
  int rows = 0;
  int cols = 0;
  int size() const { return rows * cols; }
};

TokenGrid token_grid(int height, int width);

/// Fixed 2D sine-cosine embedding [rows*cols, dim]; the first dim/2 channels
/// encode the row index, the remaining dim/2 the column index.
template <typename T>
Tensor<T> sincos_embedding(const TokenGrid& grid, int dim);

/// Image-awareness condition c = c_im + c_hf + c_pe, [N, L, C_T] with
/// L = 4 · grid size. c_im stacks patch tokens of f2..f5 (patch sizes 16, 8, 4, 2);
/// c_hf patchifies x_sf with 32×32 patches and is repeated once per scale block.
template <typename T>
class Conditioner {
 public:
  Conditioner() = default;
  Conditioner(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);

  Var<T> operator()(const FeaturePyramid<T>& pyr, const Var<T>& x_sf) const;

  static constexpr int kScales = 4;

 private:
  Var<T> patchify(const Var<T>& x, int patch, const Var<T>& weight, const Var<T>& bias) const;

  int token_dim_ = 0;
  std::array<Var<T>, kScales> scale_weights_, scale_biases_;
  Var<T> hf_weight_, hf_bias_;
};

}  // namespace metadec
