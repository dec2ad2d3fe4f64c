#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metadec/conditioner.hpp"
#include "metadec/model.hpp"
#include "oracles.hpp"

using namespace metadec;
using V = Var<double>;

namespace {

Tensor<double> random_image(int h, int w, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> t({h, w});
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

Tensor<double> input_batch(int n, int h, int w, Rng& rng) {
  std::vector<Tensor<double>> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(random_image(h, w, rng));
  std::vector<const Tensor<double>*> ptrs;
  for (auto& i : imgs) ptrs.push_back(&i);
  return prepare_batch<double>(ptrs, 5.0);
}

void zero(ParameterStore<double>& store, const std::string& name) {
  store.get(name).mutable_value().fill(0.0);
}

}  // namespace

TEST_CASE("pyramid shapes follow the channel plan") {
  for (const char* profile : {"desk", "tiny"}) {
    const auto cfg = validate_config({{"profile", profile}});
    ParameterStore<double> store;
    Rng rng(3);
    Encoder<double> enc(store, cfg, rng);
    const int h = cfg.input_height, w = cfg.input_width;
    Rng data(1);
    const auto pyr = enc(V::constant(input_batch(2, h, w, data)), true);
    for (int i = 0; i < 5; ++i) {
      CHECK(pyr.f[i].shape() == Shape{2, cfg.encoder_channels[i], h >> i, w >> i});
    }
  }
}

TEST_CASE("full-size pyramid on a small non-square input") {
  const auto cfg = validate_config({{"profile", "paper"}});
  ParameterStore<float> store;
  Rng rng(3);
  Encoder<float> enc(store, cfg, rng);
  Rng data(2);
  const auto x = input_batch(1, 32, 48, data).cast<float>();
  NoGradGuard g;
  const auto pyr = enc(Var<float>::constant(x), false);
  CHECK(pyr.f[0].shape() == Shape{1, 32, 32, 48});
  CHECK(pyr.f[4].shape() == Shape{1, 512, 2, 3});
}

TEST_CASE("encoder rejects sizes not divisible by 16 and wrong channel counts") {
  const auto cfg = validate_config({{"profile", "tiny"}});
  ParameterStore<double> store;
  Rng rng(3);
  Encoder<double> enc(store, cfg, rng);
  CHECK_THROWS_AS(enc(V::constant(Tensor<double>({1, 2, 24, 16})), false), std::invalid_argument);
  CHECK_THROWS_AS(enc(V::constant(Tensor<double>({1, 1, 16, 16})), false), std::invalid_argument);
}

TEST_CASE("MKAB groups and parameter shapes") {
  ParameterStore<double> store;
  Rng rng(5);
  Mkab<double> m(store, "m", 8, rng);
  for (int k = 1; k <= 4; ++k) {
    const int ks = 2 * k - 1;
    CHECK(store.get("m.group" + std::to_string(k) + ".weight").shape() == Shape{2, 2, ks, ks});
  }
  CHECK_THROWS_AS(Mkab<double>(store, "bad", 6, rng), std::invalid_argument);
}

TEST_CASE("MKAB channel factor is 1.5 with a silent MLP and inside (1,2) otherwise") {
  ParameterStore<double> store;
  Rng rng(5);
  Mkab<double> m(store, "m", 8, rng);
  auto x = V::constant(normal_tensor<double>({2, 8, 6, 6}, 1.0, rng));
  {
    const auto s = m.attention_scale(m.aggregate(x, true)).value();
    for (double v : s.values()) {
      CHECK(v > 1.0);
      CHECK(v < 2.0);
    }
  }
  zero(store, "m.mlp_out.weight");
  zero(store, "m.mlp_out.bias");
  const auto agg = m.aggregate(x, true);
  const auto s = m.attention_scale(agg).value();
  for (double v : s.values()) CHECK(v == 1.5);
  const auto y = m(x, true).value();
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(1.5 * agg.value()[i]));
}

TEST_CASE("MKAB gradient matches finite differences") {
  ParameterStore<double> store;
  Rng rng(9);
  Mkab<double> m(store, "m", 8, rng);
  auto x = V::leaf(normal_tensor<double>({1, 8, 4, 4}, 1.0, rng));
  const Tensor<double> w = normal_tensor<double>({1, 8, 4, 4}, 1.0, rng);
  auto f = [&] { return ops::weighted_sum(m(x, true), w); };
  store.zero_grad();
  backward(f());
  auto objective = [&] {
    NoGradGuard g;
    return f().value()[0];
  };
  for (const auto& [name, p] : store.parameters()) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < p.size(); i += 3) idx.push_back(i);
    const auto num = oracle::numeric_grad(p.node()->value, idx, objective);
    std::vector<double> ana;
    for (auto i : idx) ana.push_back(p.grad()[i]);
    INFO(name);
    CHECK(oracle::relative_error(ana, num) < 1e-5);
  }
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto num = oracle::numeric_grad(x.node()->value, idx, objective);
  std::vector<double> ana(x.grad().values().begin(), x.grad().values().end());
  CHECK(oracle::relative_error(ana, num) < 1e-5);
}

TEST_CASE("each forward pass gets a fresh provenance") {
  const auto cfg = validate_config({{"profile", "tiny"}});
  ParameterStore<double> store;
  Rng rng(3);
  Encoder<double> enc(store, cfg, rng);
  Rng data(1);
  auto x = V::constant(input_batch(1, 16, 16, data));
  CHECK(enc(x, false).provenance != enc(x, false).provenance);
}

TEST_CASE("token grid and embedding layout") {
  CHECK(token_grid(64, 64).size() == 4);
  CHECK(token_grid(256, 256).size() == 64);
  CHECK(token_grid(48, 80).rows == 2);
  CHECK(token_grid(48, 80).cols == 3);
  const auto pe = sincos_embedding<double>({2, 3}, 8);
  // row 0 column 0: sin(0)=0, cos(0)=1 in both halves
  CHECK(pe.at({0, 0}) == 0.0);
  CHECK(pe.at({0, 2}) == 1.0);
  // tokens sharing a row share the first half
  for (int k = 0; k < 4; ++k) CHECK(pe.at({1, k}) == pe.at({2, k}));
  for (int k = 4; k < 8; ++k) CHECK(pe.at({0, k}) == pe.at({3, k}));
  CHECK_THROWS(sincos_embedding<double>({1, 1}, 6));
}

TEST_CASE("condition tokens: count, zero-weight limit and shared positions") {
  for (const char* profile : {"desk", "paper"}) {
    const auto cfg = validate_config({{"profile", profile}});
    CHECK(4 * token_grid(cfg.input_height, cfg.input_width).size() ==
          (std::string(profile) == "desk" ? 16 : 256));
  }
  const auto cfg = validate_config({{"profile", "desk"}});
  ParameterStore<double> store;
  Rng rng(3);
  Encoder<double> enc(store, cfg, rng);
  Conditioner<double> cond(store, cfg, rng);
  Rng data(4);
  auto x = V::constant(input_batch(2, 64, 64, data));
  const auto pyr = enc(x, false);
  const auto c = cond(pyr, x).value();
  CHECK(c.shape() == Shape{2, 16, 96});
  for (const auto& [name, p] : store.parameters()) {
    if (name.rfind("condition.", 0) == 0) p.node()->value.fill(0.0);
  }
  const auto c0 = cond(pyr, x).value();
  const auto pe = sincos_embedding<double>(token_grid(64, 64), 96);
  for (int b = 0; b < 2; ++b)
    for (int s = 0; s < 4; ++s)
      for (int t = 0; t < 4; ++t)
        for (int k = 0; k < 96; ++k) CHECK(c0.at({b, s * 4 + t, k}) == pe.at({t, k}));
}

TEST_CASE("conditioner commutes with batch permutation") {
  const auto cfg = validate_config({{"profile", "tiny"}});
  ParameterStore<double> store;
  Rng rng(3);
  Encoder<double> enc(store, cfg, rng);
  Conditioner<double> cond(store, cfg, rng);
  Rng data(6);
  const auto a = input_batch(3, 32, 32, data);
  Tensor<double> swapped(a.shape());
  const std::size_t per = a.size() / 3;
  const int perm[3] = {2, 0, 1};
  for (int b = 0; b < 3; ++b) std::copy_n(a.data() + perm[b] * per, per, swapped.data() + b * per);
  auto xa = V::constant(a), xs = V::constant(swapped);
  const auto ca = cond(enc(xa, false), xa).value();
  const auto cs = cond(enc(xs, false), xs).value();
  const std::size_t cper = ca.size() / 3;
  for (int b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < cper; ++i)
      CHECK(cs[b * cper + i] == doctest::Approx(ca[perm[b] * cper + i]).epsilon(1e-12));
}
