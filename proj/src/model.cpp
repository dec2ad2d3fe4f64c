#include "metadec/model.hpp"

#include <algorithm>
#include <cmath>

namespace metadec {

namespace {

Rng model_rng(const ModelConfig& cfg) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    0x6d6f64u};
  return Rng(seq);
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
  check_invariants(cfg_);
  Rng rng = model_rng(cfg_);
  schema_ = make_schema(cfg_.decoder_variant, cfg_.decoder_width, cfg_.num_decoder_stages);
  layout_ = compute_layout(schema_, cfg_);
  encoder_ = Encoder<T>(store_, cfg_, rng);
  if (cfg_.generator == GeneratorKind::transformer) {
    conditioner_ = Conditioner<T>(store_, cfg_, rng);
    hypernet_ = Hypernet<T>(store_, cfg_, layout_, schema_, rng);
  } else {
    static_ = StaticGenerator<T>(store_, layout_, schema_, rng);
  }
  decoder_ = MetaDecoder<T>(store_, cfg_, rng);
}

template <typename T>
GeneratedParameters<T> Model<T>::generate_from(const FeaturePyramid<T>& pyr,
                                               const Var<T>& x) const {
  if (cfg_.generator == GeneratorKind::static_matrix) return static_(x.dim(0));
  return hypernet_(conditioner_(pyr, x));
}

template <typename T>
ForwardResult<T> Model<T>::forward(const Tensor<T>& x_sf, bool training) const {
  auto x = Var<T>::constant(x_sf);
  auto pyr = encoder_(x, training);
  ForwardResult<T> out;
  out.generated = generate_from(pyr, x);
  out.decoder = materialize_decoder(layout_, schema_, out.generated.matrix, out.generated.norm,
                                    pyr.provenance);
  out.logits = decoder_.decode_mask(pyr, out.decoder, cfg_.decoder_variant);
  return out;
}

template <typename T>
GeneratedParameters<T> Model<T>::generate(const Tensor<T>& x_sf) const {
  auto x = Var<T>::constant(x_sf);
  return generate_from(encoder_(x, false), x);
}

template <typename T>
Tensor<T> prepare_batch(const std::vector<const Tensor<double>*>& images, double sigma_hp) {
  std::vector<SpatialFrequencyInput> inputs;
  inputs.reserve(images.size());
  for (const auto* img : images) inputs.push_back(spatial_frequency_input(*img, sigma_hp));
  return make_input_batch<T>(inputs);
}

template <typename T>
Tensor<double> predict_probabilities(const Model<T>& model, const Tensor<double>& image) {
  NoGradGuard guard;
  const int h = image.dim(0), w = image.dim(1);
  // Sizes that are not multiples of 16 are edge-padded and cropped back.
  const int ph = (h + 15) / 16 * 16, pw = (w + 15) / 16 * 16;
  const Tensor<double>* src = &image;
  Tensor<double> padded;
  if (ph != h || pw != w) {
    padded = Tensor<double>({ph, pw});
    for (int y = 0; y < ph; ++y) {
      for (int x = 0; x < pw; ++x) {
        padded[static_cast<std::size_t>(y) * pw + x] =
            image[static_cast<std::size_t>(std::min(y, h - 1)) * w + std::min(x, w - 1)];
      }
    }
    src = &padded;
  }
  auto out = model.forward(prepare_batch<T>({src}, model.config().sigma_hp), false);
  const auto& z = out.logits.value();
  Tensor<double> prob({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double zi = z[static_cast<std::size_t>(y) * pw + x];
      prob[static_cast<std::size_t>(y) * w + x] = 1.0 / (1.0 + std::exp(-zi));
    }
  }
  return prob;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> prepare_batch<float>(const std::vector<const Tensor<double>*>&, double);
template Tensor<double> prepare_batch<double>(const std::vector<const Tensor<double>*>&, double);
template Tensor<double> predict_probabilities(const Model<float>&, const Tensor<double>&);
template Tensor<double> predict_probabilities(const Model<double>&, const Tensor<double>&);

}  // namespace metadec
