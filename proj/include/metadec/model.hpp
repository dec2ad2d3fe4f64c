#pragma once

#include <memory>
#include <optional>

#include "metadec/conditioner.hpp"
#include "metadec/hypernet.hpp"
#include "metadec/meta_decoder.hpp"

namespace metadec {

template <typename T>
struct ForwardResult {
  Var<T> logits;  // [N, 1, H, W]
  GeneratedParameters<T> generated;
  MaterializedDecoder<T> decoder;
};

/// Full pipeline: encoder, condition tokens, parameter generator, meta-decoder.
/// Parameters live in the owned store, so the object is not copyable.
template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// x_sf [N, 2, H, W] as built by make_input_batch.
  ForwardResult<T> forward(const Tensor<T>& x_sf, bool training) const;
  /// Generated parameters only (no decoding).
  GeneratedParameters<T> generate(const Tensor<T>& x_sf) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  const DecoderSchema& schema() const { return schema_; }
  const DecoderLayout& layout() const { return layout_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Hypernet<T>& hypernet() const { return hypernet_; }
  const MetaDecoder<T>& decoder() const { return decoder_; }

 private:
  GeneratedParameters<T> generate_from(const FeaturePyramid<T>& pyr, const Var<T>& x) const;

  ModelConfig cfg_;
  ParameterStore<T> store_;
  DecoderSchema schema_;
  DecoderLayout layout_;
  Encoder<T> encoder_;
  Conditioner<T> conditioner_;
  Hypernet<T> hypernet_;
  StaticGenerator<T> static_;
  MetaDecoder<T> decoder_;
};

/// Preprocesses raw images ([H,W], any range) into a network batch.
template <typename T>
Tensor<T> prepare_batch(const std::vector<const Tensor<double>*>& images, double sigma_hp);

/// Sigmoid probabilities [H,W] of one image at its own size, in inference mode.
/// Sizes that are not multiples of 16 are edge-padded internally.
template <typename T>
Tensor<double> predict_probabilities(const Model<T>& model, const Tensor<double>& image);

}  // namespace metadec
