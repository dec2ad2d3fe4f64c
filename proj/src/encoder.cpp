#include "metadec/encoder.hpp"

#include <atomic>
#include <stdexcept>

namespace metadec {

std::uint64_t next_provenance() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

template <typename T>
Tensor<T> make_input_batch(const std::vector<SpatialFrequencyInput>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("make_input_batch: empty batch");
  const int h = inputs[0].height(), w = inputs[0].width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out({static_cast<int>(inputs.size()), 2, h, w});
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (inputs[b].height() != h || inputs[b].width() != w) {
      throw std::invalid_argument("make_input_batch: samples differ in size");
    }
    T* dst = out.data() + b * 2 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = static_cast<T>(inputs[b].image[i]);
      dst[plane + i] = static_cast<T>(inputs[b].highpass[i]);
    }
  }
  return out;
}

template <typename T>
Mkab<T>::Mkab(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng)
    : channels_(channels) {
  if (channels % 4 != 0) {
    throw std::invalid_argument("MKAB channel count " + std::to_string(channels) +
                                " not divisible by 4");
  }
  const int g = channels / 4;
  for (int k = 1; k <= 4; ++k) {
    const int ks = 2 * k - 1;
    group_weights_[k - 1] =
        store.add(name + ".group" + std::to_string(k) + ".weight", he_conv<T>(g, g, ks, rng));
  }
  bn_ = BatchNorm2d<T>(store, name + ".bn", channels);
  const int hidden = std::max(1, channels / 4);
  mlp_in_ = Linear<T>(store, name + ".mlp_in", channels, hidden, rng);
  mlp_out_ = Linear<T>(store, name + ".mlp_out", hidden, channels, rng);
}

template <typename T>
Var<T> Mkab<T>::aggregate(const Var<T>& x, bool training) const {
  if (x.dim(1) != channels_) {
    throw std::invalid_argument("MKAB expects " + std::to_string(channels_) + " channels, got " +
                                std::to_string(x.dim(1)));
  }
  const int g = channels_ / 4;
  std::vector<Var<T>> paths;
  for (int k = 0; k < 4; ++k) {
    auto part = ops::slice_channels(x, k * g, (k + 1) * g);
    paths.push_back(ops::conv2d<T>(part, group_weights_[k], std::nullopt));
  }
  return ops::relu(bn_(ops::concat_channels(paths), training));
}

template <typename T>
Var<T> Mkab<T>::attention_scale(const Var<T>& aggregated) const {
  auto diff = ops::add(ops::global_max_pool(aggregated),
                       ops::scale(ops::global_avg_pool(aggregated), T(-1)));
  auto logits = mlp_out_(ops::relu(mlp_in_(diff)));
  auto gate = ops::sigmoid(logits);
  Tensor<T> ones(gate.shape(), T(1));
  return ops::add(gate, Var<T>::constant(std::move(ones)));
}

template <typename T>
Var<T> Mkab<T>::operator()(const Var<T>& x, bool training) const {
  auto agg = aggregate(x, training);
  return ops::scale_channels(agg, attention_scale(agg));
}

template <typename T>
Encoder<T>::Encoder(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  int in = 2;
  for (int i = 0; i < 5; ++i) {
    const int out = cfg.encoder_channels[i];
    const std::string name = "encoder.block" + std::to_string(i + 1);
    Block b;
    b.stride = i == 0 ? 1 : 2;
    b.conv_a = store.add(name + ".conv_a.weight", he_conv<T>(out, in, 3, rng));
    b.bn_a = BatchNorm2d<T>(store, name + ".bn_a", out);
    b.conv_b = store.add(name + ".conv_b.weight", he_conv<T>(out, out, 3, rng));
    b.bn_b = BatchNorm2d<T>(store, name + ".bn_b", out);
    b.mkab = Mkab<T>(store, name + ".mkab", out, rng);
    blocks_.push_back(std::move(b));
    in = out;
  }
}

template <typename T>
FeaturePyramid<T> Encoder<T>::operator()(const Var<T>& x_sf, bool training) const {
  if (x_sf.value().rank() != 4 || x_sf.dim(1) != 2) {
    throw std::invalid_argument("encoder expects [N,2,H,W], got " + shape_string(x_sf.shape()));
  }
  if (x_sf.dim(2) % 16 != 0 || x_sf.dim(3) % 16 != 0) {
    throw std::invalid_argument("encoder input spatial size must be divisible by 16, got " +
                                shape_string(x_sf.shape()));
  }
  FeaturePyramid<T> pyr;
  pyr.provenance = next_provenance();
  Var<T> x = x_sf;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    x = ops::relu(b.bn_a(ops::conv2d<T>(x, b.conv_a, std::nullopt, b.stride), training));
    x = ops::relu(b.bn_b(ops::conv2d<T>(x, b.conv_b, std::nullopt), training));
    x = b.mkab(x, training);
    pyr.f[i] = x;
  }
  return pyr;
}

template Tensor<float> make_input_batch<float>(const std::vector<SpatialFrequencyInput>&);
template Tensor<double> make_input_batch<double>(const std::vector<SpatialFrequencyInput>&);
template class Mkab<float>;
template class Mkab<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace metadec
