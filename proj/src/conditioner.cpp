#include "metadec/conditioner.hpp"

#include <cmath>
#include <stdexcept>

namespace metadec {

TokenGrid token_grid(int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("token_grid: empty image");
  return {(height + 31) / 32, (width + 31) / 32};
}

template <typename T>
Tensor<T> sincos_embedding(const TokenGrid& grid, int dim) {
  if (dim % 4 != 0) throw std::invalid_argument("sincos_embedding: dim must be divisible by 4");
  const int quarter = dim / 4;
  Tensor<T> out({grid.size(), dim});
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      T* tok = out.data() + static_cast<std::size_t>(r * grid.cols + c) * dim;
      for (int k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / quarter);
        tok[k] = static_cast<T>(std::sin(r * omega));
        tok[quarter + k] = static_cast<T>(std::cos(r * omega));
        tok[2 * quarter + k] = static_cast<T>(std::sin(c * omega));
        tok[3 * quarter + k] = static_cast<T>(std::cos(c * omega));
      }
    }
  }
  return out;
}

template <typename T>
Conditioner<T>::Conditioner(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : token_dim_(cfg.token_dim) {
  for (int s = 0; s < kScales; ++s) {
    const int level = s + 2;  // f2..f5
    const int patch = 32 >> (level - 1);
    const int ch = cfg.encoder_channels[level - 1];
    const std::string name = "condition.scale" + std::to_string(s + 1);
    const int fan_in = ch * patch * patch;
    scale_weights_[s] = store.add(
        name + ".weight",
        normal_tensor<T>({cfg.token_dim, fan_in}, std::sqrt(1.0 / fan_in), rng));
    scale_biases_[s] = store.add(name + ".bias", Tensor<T>({cfg.token_dim}));
  }
  const int hf_fan_in = 2 * 32 * 32;
  hf_weight_ = store.add("condition.highfreq.weight",
                         normal_tensor<T>({cfg.token_dim, hf_fan_in},
                                          std::sqrt(1.0 / hf_fan_in), rng));
  hf_bias_ = store.add("condition.highfreq.bias", Tensor<T>({cfg.token_dim}));
}

template <typename T>
Var<T> Conditioner<T>::patchify(const Var<T>& x, int patch, const Var<T>& weight,
                                const Var<T>& bias) const {
  return ops::linear<T>(ops::extract_patches(x, patch), weight, bias);
}

template <typename T>
Var<T> Conditioner<T>::operator()(const FeaturePyramid<T>& pyr, const Var<T>& x_sf) const {
  const int n = x_sf.dim(0);
  const TokenGrid grid = token_grid(x_sf.dim(2), x_sf.dim(3));
  std::vector<Var<T>> blocks;
  for (int s = 0; s < kScales; ++s) {
    const int level = s + 2;
    const auto& f = pyr.f[level - 1];
    const int patch = 32 >> (level - 1);
    if (f.dim(0) != n) throw std::invalid_argument("conditioner: pyramid/batch mismatch");
    auto tokens = patchify(f, patch, scale_weights_[s], scale_biases_[s]);
    if (tokens.dim(1) != grid.size()) {
      throw std::invalid_argument("conditioner: scale " + std::to_string(level) +
                                  " does not tile the shared token grid");
    }
    blocks.push_back(tokens);
  }
  auto c_im = ops::concat_tokens(blocks);
  auto hf = patchify(x_sf, 32, hf_weight_, hf_bias_);
  auto c_hf = ops::concat_tokens(std::vector<Var<T>>(kScales, hf));

  const Tensor<T> table = sincos_embedding<T>(grid, token_dim_);
  const std::size_t per_scale = table.size();
  Tensor<T> pe({n, kScales * grid.size(), token_dim_});
  for (int b = 0; b < n; ++b) {
    for (int s = 0; s < kScales; ++s) {
      std::copy(table.data(), table.data() + per_scale,
                pe.data() + (static_cast<std::size_t>(b) * kScales + s) * per_scale);
    }
  }
  return ops::add(ops::add(c_im, c_hf), Var<T>::constant(std::move(pe)));
}

template Tensor<float> sincos_embedding<float>(const TokenGrid&, int);
template Tensor<double> sincos_embedding<double>(const TokenGrid&, int);
template class Conditioner<float>;
template class Conditioner<double>;

}  // namespace metadec
