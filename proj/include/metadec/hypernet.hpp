#pragma once

#include "metadec/layout.hpp"
#include "metadec/nn.hpp"

namespace metadec {

/// Output of a parameter generator for one batch.
template <typename T>
struct GeneratedParameters {
  Var<T> matrix;  // [N, N_q, P]
  Var<T> norm;    // [N, bn_param_count]
};

/// Querying transformer that turns learnable decoder tokens into decoder
/// parameters. Each layer is pre-norm: self-attention over the decoder tokens,
/// cross-attention from the tokens to the condition, then a GELU FFN (4×), each
/// with a residual connection.
template <typename T>
class Hypernet {
 public:
  Hypernet() = default;
  Hypernet(ParameterStore<T>& store, const ModelConfig& cfg, const DecoderLayout& layout,
           const DecoderSchema& schema, Rng& rng);

  /// [N, L, C_T] condition -> refined tokens Q^out [N, N_q + 1, C_T].
  Var<T> generate_decoder_tokens(const Var<T>& condition) const;
  /// Q^out -> kernel rows through the shared head, norm token through its own head.
  GeneratedParameters<T> project_tokens(const Var<T>& tokens) const;

  GeneratedParameters<T> operator()(const Var<T>& condition) const {
    return project_tokens(generate_decoder_tokens(condition));
  }

  const Var<T>& q_init() const { return q_init_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  /// Output projections of every attention and FFN sublayer (weights and biases).
  std::vector<Var<T>> residual_output_parameters() const;

 private:
  struct Attention {
    Linear<T> q, k, v, out;
  };
  struct Layer {
    LayerNorm<T> norm_self, norm_cross, norm_memory, norm_ffn;
    Attention self_attn, cross_attn;
    Linear<T> ffn_in, ffn_out;
  };
  Var<T> attend(const Attention& a, const Var<T>& queries, const Var<T>& memory) const;

  int heads_ = 1;
  int rows_ = 0;
  Var<T> q_init_;
  std::vector<Layer> layers_;
  LayerNorm<T> final_norm_;
  Linear<T> param_head_, norm_head_;
};

/// Ablation generator: one learned parameter matrix and norm vector shared by
/// every input.
template <typename T>
class StaticGenerator {
 public:
  StaticGenerator() = default;
  StaticGenerator(ParameterStore<T>& store, const DecoderLayout& layout,
                  const DecoderSchema& schema, Rng& rng);
  GeneratedParameters<T> operator()(int batch) const;

 private:
  Var<T> matrix_, norm_;
};

/// Initial norm-head bias: γ entries 1, β entries 0.
template <typename T>
Tensor<T> norm_bias_init(const DecoderLayout& layout, const DecoderSchema& schema);

}  // namespace metadec
