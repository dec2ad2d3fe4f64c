#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "metadec/config.hpp"
#include "metadec/frequency.hpp"
#include "metadec/nn.hpp"

namespace metadec {

/// The five encoder feature maps, f[0] at full resolution, each later one halved.
template <typename T>
struct FeaturePyramid {
  std::array<Var<T>, 5> f;
  std::uint64_t provenance = 0;
};

/// Stacks [x ; x_hp] of each sample into an [N, 2, H, W] tensor.
template <typename T>
Tensor<T> make_input_batch(const std::vector<SpatialFrequencyInput>& inputs);

/// Multi-kernel aggregation: four equal channel groups convolved with kernels
/// 1, 3, 5, 7, concatenated, BN+ReLU, then scaled per channel by
/// 1 + sigmoid(MLP(GMP - GAP)).
template <typename T>
class Mkab {
 public:
  Mkab() = default;
  Mkab(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng);
  Var<T> operator()(const Var<T>& x, bool training) const;

  /// Channel attention factor for already-aggregated features f̃, shape [N, C].
  Var<T> attention_scale(const Var<T>& aggregated) const;
  Var<T> aggregate(const Var<T>& x, bool training) const;

 private:
  int channels_ = 0;
  std::array<Var<T>, 4> group_weights_;
  BatchNorm2d<T> bn_;
  Linear<T> mlp_in_, mlp_out_;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);

  /// x_sf [N, 2, H, W] with H, W divisible by 16.
  FeaturePyramid<T> operator()(const Var<T>& x_sf, bool training) const;

 private:
  struct Block {
    Var<T> conv_a, conv_b;
    BatchNorm2d<T> bn_a, bn_b;
    Mkab<T> mkab;
    int stride = 1;
  };
  std::vector<Block> blocks_;
};

std::uint64_t next_provenance();

}  // namespace metadec
