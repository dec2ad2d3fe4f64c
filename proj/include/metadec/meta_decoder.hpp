#pragma once

#include "metadec/encoder.hpp"
#include "metadec/layout.hpp"

namespace metadec {

/// Gate in (0,1) from per-channel 1D convs over the width-pooled (column) and
/// height-pooled (row) profiles of f: sigmoid(col(h,c) + row(w,c)).
template <typename T>
Var<T> position_attention_gate(const Var<T>& f, const Var<T>& weight_h, const Var<T>& weight_w);

/// Runs a materialized decoder over the pyramid. Static pieces: the 1×1
/// projection of f5, the 1×1 skip projections of f4..f1 and the shared 3×3
/// output head; everything inside the stage blocks is generated.
template <typename T>
class MetaDecoder {
 public:
  MetaDecoder() = default;
  MetaDecoder(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng);

  /// Logits [N, 1, H, W] at the input resolution.
  Var<T> decode_mask(const FeaturePyramid<T>& pyr, const MaterializedDecoder<T>& dec,
                     DecoderVariant variant) const;

  const DecoderSchema& schema() const { return schema_; }
  const Var<T>& head_bias() const { return head_bias_; }

 private:
  Var<T> stage_block(const Var<T>& x, const MaterializedDecoder<T>& dec, int stage,
                     DecoderVariant variant) const;

  DecoderVariant variant_ = DecoderVariant::basic;
  int stages_ = 4;
  DecoderSchema schema_;
  std::vector<std::size_t> stage_first_unit_;
  Var<T> deep_proj_w_, deep_proj_b_;
  std::vector<Var<T>> skip_w_, skip_b_;  // stage order: f4, f3, f2, f1
  Var<T> head_w_, head_bias_;
};

}  // namespace metadec
