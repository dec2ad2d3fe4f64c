#include "metadec/meta_decoder.hpp"

#include <stdexcept>

namespace metadec {

template <typename T>
Var<T> position_attention_gate(const Var<T>& f, const Var<T>& weight_h, const Var<T>& weight_w) {
  auto col = ops::conv1d_depthwise(ops::mean_over_width(f), weight_h);   // [N,C,H]
  auto row = ops::conv1d_depthwise(ops::mean_over_height(f), weight_w);  // [N,C,W]
  return ops::sigmoid(ops::outer_add(col, row));
}

template <typename T>
MetaDecoder<T>::MetaDecoder(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng)
    : variant_(cfg.decoder_variant),
      stages_(cfg.num_decoder_stages),
      schema_(make_schema(cfg.decoder_variant, cfg.decoder_width, cfg.num_decoder_stages)) {
  const int c = cfg.decoder_width;
  for (std::size_t u = 0; u < schema_.units.size(); ++u) {
    if (u == 0 || schema_.units[u].stage != schema_.units[u - 1].stage) {
      stage_first_unit_.push_back(u);
    }
  }
  deep_proj_w_ = store.add("decoder.deep_proj.weight", he_conv<T>(c, cfg.encoder_channels[4], 1, rng));
  deep_proj_b_ = store.add("decoder.deep_proj.bias", Tensor<T>({c}));
  for (int s = 0; s < stages_; ++s) {
    const int level = 3 - s;  // f4, f3, f2, f1
    const std::string name = "decoder.skip" + std::to_string(level + 1);
    skip_w_.push_back(store.add(name + ".weight", he_conv<T>(c, cfg.encoder_channels[level], 1, rng)));
    skip_b_.push_back(store.add(name + ".bias", Tensor<T>({c})));
  }
  head_w_ = store.add("decoder.head.weight", normal_tensor<T>({1, c, 3, 3}, std::sqrt(1.0 / (9 * c)), rng));
  head_bias_ = store.add("decoder.head.bias", Tensor<T>({1}));
}

template <typename T>
Var<T> MetaDecoder<T>::stage_block(const Var<T>& x, const MaterializedDecoder<T>& dec, int stage,
                                   DecoderVariant variant) const {
  const std::size_t u0 = stage_first_unit_[stage];
  const auto& units = dec.units;
  auto conv_bn_relu = [&](const Var<T>& in, std::size_t u) {
    auto y = ops::conv2d<T>(in, units[u].weight, std::nullopt);
    return ops::relu(ops::instance_norm(y, units[u].gamma, units[u].beta));
  };
  Var<T> y = conv_bn_relu(x, u0);
  if (variant == DecoderVariant::basic) return y;
  const int c = y.dim(1);
  auto dw = ops::add(ops::conv2d<T>(y, units[u0 + 1].weight, std::nullopt, 1, c),
                     ops::conv2d<T>(y, units[u0 + 2].weight, std::nullopt, 1, c));
  y = conv_bn_relu(conv_bn_relu(dw, u0 + 3), u0 + 4);
  if (variant == DecoderVariant::multiscale) return y;
  return ops::mul(y, position_attention_gate(y, units[u0 + 5].weight, units[u0 + 6].weight));
}

template <typename T>
Var<T> MetaDecoder<T>::decode_mask(const FeaturePyramid<T>& pyr, const MaterializedDecoder<T>& dec,
                                   DecoderVariant variant) const {
  if (variant != variant_ || dec.units.size() != schema_.units.size()) {
    throw std::invalid_argument("decode_mask: decoder built for " + to_string(variant_) +
                                " cannot run variant " + to_string(variant) + " with " +
                                std::to_string(dec.units.size()) + " generated units");
  }
  if (dec.provenance != pyr.provenance) {
    throw std::invalid_argument("decode_mask: decoder was generated for a different input");
  }
  if (dec.batch != pyr.f[4].dim(0)) throw std::invalid_argument("decode_mask: batch mismatch");
  Var<T> x = ops::conv2d<T>(pyr.f[4], deep_proj_w_, deep_proj_b_);
  for (int s = 0; s < stages_; ++s) {
    x = ops::upsample_bilinear2x(x);
    x = ops::add(x, ops::conv2d<T>(pyr.f[3 - s], skip_w_[s], skip_b_[s]));
    x = stage_block(x, dec, s, variant);
  }
  for (int s = stages_; s < 4; ++s) x = ops::upsample_bilinear2x(x);
  return ops::conv2d<T>(x, head_w_, head_bias_);
}

template Var<float> position_attention_gate(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> position_attention_gate(const Var<double>&, const Var<double>&,
                                             const Var<double>&);
template class MetaDecoder<float>;
template class MetaDecoder<double>;

}  // namespace metadec
