#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metadec/model.hpp"

using namespace metadec;
using V = Var<double>;

namespace {

Tensor<double> images(int n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Tensor<double>> imgs(n, Tensor<double>({h, w}));
  std::vector<const Tensor<double>*> ptrs;
  for (auto& i : imgs) {
    for (auto& v : i.storage()) v = u(rng);
    ptrs.push_back(&i);
  }
  return prepare_batch<double>(ptrs, 5.0);
}

}  // namespace

TEST_CASE("desk model produces full-resolution logits for every variant") {
  for (const char* variant : {"basic", "multiscale", "spatial_attention"}) {
    const auto cfg = validate_config({{"profile", "desk"}, {"decoder_variant", variant}});
    Model<float> m(cfg);
    NoGradGuard g;
    const auto out = m.forward(images(2, 64, 64, 1).cast<float>(), false);
    CHECK(out.logits.shape() == Shape{2, 1, 64, 64});
    CHECK(out.decoder.units.size() == m.schema().units.size());
  }
}

TEST_CASE("zero kernels and zero shifts give a constant mask equal to the head bias") {
  for (const char* variant : {"basic", "spatial_attention"}) {
    const auto cfg = validate_config({{"profile", "tiny"}, {"decoder_variant", variant}});
    ParameterStore<double> store;
    Rng rng(3);
    Encoder<double> enc(store, cfg, rng);
    MetaDecoder<double> dec(store, cfg, rng);
    dec.head_bias().node()->value[0] = 0.37;
    auto x = V::constant(images(2, 16, 16, 2));
    const auto pyr = enc(x, false);
    const auto layout = compute_layout(dec.schema(), cfg);
    auto norm = normal_tensor<double>({2, layout.bn_param_count}, 1.0, rng);
    for (std::size_t u = 0; u < dec.schema().units.size(); ++u) {
      const auto& unit = dec.schema().units[u];
      if (!unit.has_bn) continue;
      for (int b = 0; b < 2; ++b)
        for (int c = 0; c < unit.out_channels; ++c)
          norm.at({b, layout.unit_bn_begin[u] + unit.out_channels + c}) = 0.0;
    }
    const auto md = materialize_decoder(layout, dec.schema(),
                                        V::constant(Tensor<double>({2, layout.num_rows, layout.row_width})),
                                        V::constant(norm), pyr.provenance);
    const auto z = dec.decode_mask(pyr, md, cfg.decoder_variant).value();
    CHECK(z.shape() == Shape{2, 1, 16, 16});
    for (double v : z.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  }
}

TEST_CASE("position gate") {
  Rng rng(4);
  auto f = V::constant(normal_tensor<double>({2, 3, 6, 5}, 2.0, rng));
  auto zeros = V::constant(Tensor<double>({2, 3, 3}));
  const auto half = position_attention_gate(f, zeros, zeros);
  for (double g : half.value().values()) CHECK(g == 0.5);
  auto wh = V::constant(normal_tensor<double>({2, 3, 3}, 3.0, rng));
  auto ww = V::constant(normal_tensor<double>({2, 3, 3}, 3.0, rng));
  const auto g = position_attention_gate(f, wh, ww).value();
  CHECK(g.shape() == f.shape());
  for (double v : g.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  // constant features: away from the zero-padded border every position sees the same profile
  auto c = V::constant(Tensor<double>({2, 3, 6, 5}, 0.8));
  const auto gc = position_attention_gate(c, wh, ww).value();
  for (int b = 0; b < 2; ++b)
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 1; y < 5; ++y)
        for (int x = 1; x < 4; ++x) CHECK(gc.at({b, ch, y, x}) == doctest::Approx(gc.at({b, ch, 1, 1})));
}

TEST_CASE("decoder refuses mismatched parameters") {
  const auto cfg = validate_config({{"profile", "tiny"}, {"decoder_variant", "multiscale"}});
  ParameterStore<double> store;
  Rng rng(3);
  Encoder<double> enc(store, cfg, rng);
  MetaDecoder<double> dec(store, cfg, rng);
  auto x = V::constant(images(1, 16, 16, 5));
  const auto pyr = enc(x, false);
  const auto layout = compute_layout(dec.schema(), cfg);
  auto params = V::constant(Tensor<double>({1, layout.num_rows, layout.row_width}));
  auto norm = V::constant(Tensor<double>({1, layout.bn_param_count}));
  const auto md = materialize_decoder(layout, dec.schema(), params, norm, pyr.provenance);
  CHECK_NOTHROW(dec.decode_mask(pyr, md, DecoderVariant::multiscale));
  CHECK_THROWS_AS(dec.decode_mask(pyr, md, DecoderVariant::spatial_attention), std::invalid_argument);
  const auto other = materialize_decoder(layout, dec.schema(), params, norm, pyr.provenance + 1000);
  CHECK_THROWS_WITH(dec.decode_mask(pyr, other, DecoderVariant::multiscale),
                    doctest::Contains("different input"));
  const auto basic = make_schema(DecoderVariant::basic, cfg.decoder_width, 4);
  const auto bl = compute_layout(basic);
  const auto wrong = materialize_decoder(bl, basic, V::constant(Tensor<double>({1, bl.num_rows, bl.row_width})),
                                         V::constant(Tensor<double>({1, bl.bn_param_count})), pyr.provenance);
  CHECK_THROWS(dec.decode_mask(pyr, wrong, DecoderVariant::multiscale));
}

TEST_CASE("fewer decoder stages still return the input resolution") {
  const auto cfg = validate_config({{"profile", "tiny"}, {"num_decoder_stages", "2"}});
  Model<double> m(cfg);
  NoGradGuard g;
  CHECK(m.forward(images(1, 32, 16, 6), false).logits.shape() == Shape{1, 1, 32, 16});
}

TEST_CASE("inference keeps arbitrary image sizes") {
  Model<float> m(validate_config({{"profile", "tiny"}}));
  for (auto [h, w] : std::vector<std::pair<int, int>>{{16, 16}, {20, 33}, {7, 9}}) {
    Tensor<double> img({h, w}, 0.3);
    const auto p = predict_probabilities(m, img);
    CHECK(p.shape() == Shape{h, w});
    for (double v : p.values()) CHECK((v > 0.0 && v < 1.0));
  }
}

TEST_CASE("default profile at 512×512") {
  Model<float> m(validate_config({{"profile", "paper"}, {"decoder_variant", "basic"}, {"num_layers", "1"}}));
  Tensor<double> img({512, 512}, 0.0);
  img[256 * 512 + 256] = 1.0;
  const auto p = predict_probabilities(m, img);
  CHECK(p.shape() == Shape{512, 512});
}
