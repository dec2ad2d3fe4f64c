#include "metadec/hypernet.hpp"

#include <cmath>
#include <stdexcept>

namespace metadec {

namespace {

// Per-element scale of generated kernels at initialization: He scale of a
// full 3×3 conv over C_dec channels, i.e. sqrt(2 / P).
double kernel_init_std(const DecoderLayout& layout) {
  return std::sqrt(2.0 / layout.row_width);
}

}  // namespace

template <typename T>
Tensor<T> norm_bias_init(const DecoderLayout& layout, const DecoderSchema& schema) {
  Tensor<T> bias({layout.bn_param_count});
  for (std::size_t u = 0; u < schema.units.size(); ++u) {
    if (!schema.units[u].has_bn) continue;
    const int b = layout.unit_bn_begin[u];
    for (int c = 0; c < schema.units[u].out_channels; ++c) bias[b + c] = T(1);
  }
  return bias;
}

template <typename T>
Hypernet<T>::Hypernet(ParameterStore<T>& store, const ModelConfig& cfg,
                      const DecoderLayout& layout, const DecoderSchema& schema, Rng& rng)
    : heads_(cfg.num_heads), rows_(layout.num_rows) {
  const int d = cfg.token_dim;
  q_init_ = store.add("hypernet.q_init", normal_tensor<T>({layout.num_rows + 1, d}, 0.02, rng));
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string p = "hypernet.layer" + std::to_string(i);
    Layer l;
    l.norm_self = LayerNorm<T>(store, p + ".norm_self", d);
    l.self_attn = {Linear<T>(store, p + ".self_attn.q", d, d, rng),
                   Linear<T>(store, p + ".self_attn.k", d, d, rng),
                   Linear<T>(store, p + ".self_attn.v", d, d, rng),
                   Linear<T>(store, p + ".self_attn.out", d, d, rng)};
    l.norm_cross = LayerNorm<T>(store, p + ".norm_cross", d);
    l.norm_memory = LayerNorm<T>(store, p + ".norm_memory", d);
    l.cross_attn = {Linear<T>(store, p + ".cross_attn.q", d, d, rng),
                    Linear<T>(store, p + ".cross_attn.k", d, d, rng),
                    Linear<T>(store, p + ".cross_attn.v", d, d, rng),
                    Linear<T>(store, p + ".cross_attn.out", d, d, rng)};
    l.norm_ffn = LayerNorm<T>(store, p + ".norm_ffn", d);
    l.ffn_in = Linear<T>(store, p + ".ffn.in", d, 4 * d, rng);
    l.ffn_out = Linear<T>(store, p + ".ffn.out", 4 * d, d, rng);
    layers_.push_back(std::move(l));
  }
  final_norm_ = LayerNorm<T>(store, "hypernet.final_norm", d);
  param_head_.weight = store.add(
      "hypernet.param_head.weight",
      normal_tensor<T>({layout.row_width, d}, kernel_init_std(layout) / std::sqrt(d), rng));
  param_head_.bias = store.add("hypernet.param_head.bias", Tensor<T>({layout.row_width}));
  // Small weights so untrained BN parameters start near γ = 1, β = 0.
  norm_head_.weight = store.add(
      "hypernet.norm_head.weight",
      normal_tensor<T>({layout.bn_param_count, d}, 0.02 / std::sqrt(d), rng));
  norm_head_.bias = store.add("hypernet.norm_head.bias", norm_bias_init<T>(layout, schema));
}

template <typename T>
Var<T> Hypernet<T>::attend(const Attention& a, const Var<T>& queries,
                           const Var<T>& memory) const {
  return a.out(ops::attention(a.q(queries), a.k(memory), a.v(memory), heads_));
}

template <typename T>
Var<T> Hypernet<T>::generate_decoder_tokens(const Var<T>& condition) const {
  if (condition.value().rank() != 3 || condition.dim(2) != q_init_.dim(1)) {
    throw std::invalid_argument("hypernet: condition must be [N, L, " +
                                std::to_string(q_init_.dim(1)) + "], got " +
                                shape_string(condition.shape()));
  }
  Var<T> f = ops::broadcast_batch(q_init_, condition.dim(0));
  for (const auto& l : layers_) {
    auto s = l.norm_self(f);
    f = ops::add(f, attend(l.self_attn, s, s));
    f = ops::add(f, attend(l.cross_attn, l.norm_cross(f), l.norm_memory(condition)));
    f = ops::add(f, l.ffn_out(ops::gelu(l.ffn_in(l.norm_ffn(f)))));
  }
  return f;
}

template <typename T>
GeneratedParameters<T> Hypernet<T>::project_tokens(const Var<T>& tokens) const {
  if (tokens.value().rank() != 3 || tokens.dim(1) != rows_ + 1) {
    throw std::invalid_argument("project_tokens: expected " + std::to_string(rows_ + 1) +
                                " tokens, got " + shape_string(tokens.shape()));
  }
  auto normed = final_norm_(tokens);
  GeneratedParameters<T> out;
  out.matrix = param_head_(ops::slice_rows(normed, 0, rows_));
  auto norm_token = ops::slice_rows(normed, rows_, rows_ + 1);
  auto projected = norm_head_(norm_token);
  out.norm = ops::reshape(projected, {tokens.dim(0), projected.dim(2)});
  return out;
}

template <typename T>
std::vector<Var<T>> Hypernet<T>::residual_output_parameters() const {
  std::vector<Var<T>> out;
  for (const auto& l : layers_) {
    for (const Linear<T>* lin : {&l.self_attn.out, &l.cross_attn.out, &l.ffn_out}) {
      out.push_back(lin->weight);
      out.push_back(lin->bias);
    }
  }
  return out;
}

template <typename T>
StaticGenerator<T>::StaticGenerator(ParameterStore<T>& store, const DecoderLayout& layout,
                                    const DecoderSchema& schema, Rng& rng)
    : matrix_(store.add("static.matrix",
                        normal_tensor<T>({layout.num_rows, layout.row_width},
                                         kernel_init_std(layout), rng))),
      norm_(store.add("static.norm", norm_bias_init<T>(layout, schema))) {}

template <typename T>
GeneratedParameters<T> StaticGenerator<T>::operator()(int batch) const {
  return {ops::broadcast_batch(matrix_, batch), ops::broadcast_batch(norm_, batch)};
}

template class Hypernet<float>;
template class Hypernet<double>;
template class StaticGenerator<float>;
template class StaticGenerator<double>;

}  // namespace metadec
