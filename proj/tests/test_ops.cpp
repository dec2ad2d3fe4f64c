#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <random>

#include "metadec/nn.hpp"
#include "oracles.hpp"

using namespace metadec;
using V = Var<double>;

namespace {

Rng& rng() {
  static Rng r(1234);
  return r;
}

V leaf(const Shape& s, double scale = 1.0) { return V::leaf(normal_tensor<double>(s, scale, rng())); }

// Checks d/dθ Σ w ⊙ f(inputs) for every entry of every leaf against central differences.
void check_grad(const std::vector<V>& leaves, const std::function<V()>& f, double tol = 1e-6) {
  const V probe = f();
  const Tensor<double> w = normal_tensor<double>(probe.shape(), 1.0, rng());
  auto objective = [&] {
    NoGradGuard g;
    return ops::weighted_sum(f(), w).value()[0];
  };
  for (const auto& l : leaves) l.zero_grad();
  backward(ops::weighted_sum(f(), w));
  for (const auto& l : leaves) {
    auto node = l.node();
    std::vector<std::size_t> idx(l.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto numeric = oracle::numeric_grad(node->value, idx, objective);
    std::vector<double> analytic(l.grad().values().begin(), l.grad().values().end());
    if (analytic.empty()) analytic.assign(numeric.size(), 0.0);
    CHECK(oracle::relative_error(analytic, numeric) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise gradients") {
  auto a = leaf({2, 3, 4}), b = leaf({2, 3, 4});
  check_grad({a, b}, [&] { return ops::add(a, b); });
  check_grad({a, b}, [&] { return ops::mul(a, b); });
  check_grad({a}, [&] { return ops::scale(a, 0.3); });
  check_grad({a}, [&] { return ops::relu(a); });
  check_grad({a}, [&] { return ops::sigmoid(a); });
  check_grad({a}, [&] { return ops::gelu(a); });
  check_grad({a}, [&] { return ops::reshape(a, {6, 4}); });
}

TEST_CASE("conv2d forward matches a direct oracle") {
  for (int k : {1, 3, 5, 7}) {
    for (int stride : {1, 2}) {
      auto x = leaf({2, 3, 9, 8});
      auto w = leaf({4, 3, k, k});
      const auto got = ops::conv2d<double>(x, w, std::nullopt, stride).value();
      const auto want = oracle::conv2d(x.value(), w.value(), stride, false);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
  auto x = leaf({1, 4, 7, 7});
  auto w = leaf({4, 1, 5, 5});
  const auto got = ops::conv2d<double>(x, w, std::nullopt, 1, 4).value();
  const auto want = oracle::conv2d(x.value(), w.value(), 1, true);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("conv2d gradients: shared, strided, per-sample and depthwise") {
  auto x = leaf({2, 3, 6, 5});
  auto w = leaf({4, 3, 3, 3});
  auto b = leaf({4});
  check_grad({x, w, b}, [&] { return ops::conv2d<double>(x, w, b); });
  check_grad({x, w}, [&] { return ops::conv2d<double>(x, w, std::nullopt, 2); });
  auto ws = leaf({2, 4, 3, 1, 1});
  check_grad({x, ws}, [&] { return ops::conv2d<double>(x, ws, std::nullopt); });
  auto wd = leaf({2, 3, 1, 5, 5});
  check_grad({x, wd}, [&] { return ops::conv2d<double>(x, wd, std::nullopt, 1, 3); });
  auto wd2 = leaf({3, 1, 3, 3});
  check_grad({x, wd2}, [&] { return ops::conv2d<double>(x, wd2, std::nullopt, 2, 3); });
}

TEST_CASE("per-sample conv equals shared conv applied sample by sample") {
  auto x = leaf({2, 3, 5, 5});
  auto w = leaf({2, 4, 3, 3, 3});
  const auto out = ops::conv2d<double>(x, w, std::nullopt).value();
  for (int b = 0; b < 2; ++b) {
    Tensor<double> xb({1, 3, 5, 5}), wb({4, 3, 3, 3});
    std::copy_n(x.value().data() + b * 75, 75, xb.data());
    std::copy_n(w.value().data() + b * 108, 108, wb.data());
    const auto ref = oracle::conv2d(xb, wb, 1, false);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out[b * ref.size() + i] == doctest::Approx(ref[i]));
  }
}

TEST_CASE("normalization gradients") {
  auto x = leaf({3, 2, 4, 3});
  auto g = leaf({2}), be = leaf({2});
  Tensor<double> rm({2}), rv({2}, 1.0);
  check_grad({x, g, be}, [&] { return ops::batch_norm<double>(x, g, be, rm, rv, true); });
  check_grad({x, g, be}, [&] { return ops::batch_norm<double>(x, g, be, rm, rv, false); });
  auto gi = leaf({3, 2}), bi = leaf({3, 2});
  check_grad({x, gi, bi}, [&] { return ops::instance_norm<double>(x, gi, bi); });
  auto t = leaf({2, 5, 6});
  auto lg = leaf({6}), lb = leaf({6});
  check_grad({t, lg, lb}, [&] { return ops::layer_norm<double>(t, lg, lb); });
}

TEST_CASE("batch norm running statistics") {
  auto x = V::constant(Tensor<double>({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6}));
  auto g = V::constant(Tensor<double>({1}, 1.0)), b = V::constant(Tensor<double>({1}));
  Tensor<double> rm({1}), rv({1}, 1.0);
  ops::batch_norm<double>(x, g, b, rm, rv, true);
  CHECK(rm[0] == doctest::Approx(0.1 * 3.0));
  // unbiased variance of {1,2,3,6} is 14/3
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
}

TEST_CASE("pooling, broadcasting and resampling gradients") {
  auto x = leaf({2, 3, 4, 6});
  check_grad({x}, [&] { return ops::global_max_pool(x); });
  check_grad({x}, [&] { return ops::global_avg_pool(x); });
  check_grad({x}, [&] { return ops::mean_over_width(x); });
  check_grad({x}, [&] { return ops::mean_over_height(x); });
  check_grad({x}, [&] { return ops::upsample_bilinear2x(x); });
  auto col = leaf({2, 3, 4}), row = leaf({2, 3, 6});
  check_grad({col, row}, [&] { return ops::outer_add(col, row); });
  auto s = leaf({2, 3});
  check_grad({x, s}, [&] { return ops::scale_channels(x, s); });
  auto w1 = leaf({2, 3, 3});
  check_grad({col, w1}, [&] { return ops::conv1d_depthwise(col, w1); });
}

TEST_CASE("bilinear upsampling uses half-pixel centers") {
  auto x = V::constant(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0, 4}));
  const auto y = ops::upsample_bilinear2x(x).value();
  REQUIRE(y.shape() == Shape{1, 1, 2, 4});
  const std::vector<double> row{0, 1, 3, 4};
  for (int i = 0; i < 4; ++i) {
    CHECK(y[i] == doctest::Approx(row[i]));
    CHECK(y[4 + i] == doctest::Approx(row[i]));
  }
}

TEST_CASE("slicing and token layout gradients") {
  auto x = leaf({2, 5, 4, 6});
  check_grad({x}, [&] { return ops::slice_channels(x, 1, 4); });
  auto y = leaf({2, 2, 4, 6});
  check_grad({x, y}, [&] { return ops::concat_channels<double>({x, y}); });
  check_grad({x}, [&] { return ops::pad_to(x, 7, 8); });
  check_grad({x}, [&] { return ops::to_tokens(x); });
  check_grad({x}, [&] { return ops::extract_patches(x, 4); });
  auto t = leaf({2, 5, 3}), u = leaf({2, 2, 3});
  check_grad({t, u}, [&] { return ops::concat_tokens<double>({t, u}); });
  check_grad({t}, [&] { return ops::slice_rows(t, 1, 4); });
  check_grad({t}, [&] { return ops::take_block(t, 1, 3, 2); });
  auto m = leaf({4, 3});
  check_grad({m}, [&] { return ops::broadcast_batch(m, 3); });
  auto k = leaf({3, 7});
  check_grad({k}, [&] { return ops::slice_cols(k, 2, 4); });
}

TEST_CASE("extract_patches zero-pads the remainder") {
  Tensor<double> v({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) v[i] = double(i + 1);
  const auto p = ops::extract_patches(V::constant(v), 2).value();
  REQUIRE(p.shape() == Shape{1, 4, 4});
  const std::vector<double> want{1, 2, 4, 5, 3, 0, 6, 0, 7, 8, 0, 0, 9, 0, 0, 0};
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(p[i] == want[i]);
}

TEST_CASE("dense and attention gradients") {
  auto x = leaf({2, 4, 6});
  auto w = leaf({5, 6}), b = leaf({5});
  check_grad({x, w, b}, [&] { return ops::linear<double>(x, w, b); });
  auto q = leaf({2, 70, 6}), k = leaf({2, 5, 6}), v = leaf({2, 5, 6});
  check_grad({q, k, v}, [&] { return ops::attention(q, k, v, 3); });
  check_grad({q}, [&] { return ops::attention(q, q, q, 2); });
}

TEST_CASE("attention matches a naive softmax oracle") {
  auto q = leaf({1, 3, 4}), k = leaf({1, 5, 4}), v = leaf({1, 5, 4});
  const auto out = ops::attention(q, k, v, 2).value();
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 3; ++i) {
      std::vector<double> s(5);
      double mx = -1e300, z = 0;
      for (int j = 0; j < 5; ++j) {
        double d = 0;
        for (int c = 0; c < 2; ++c) d += q.value().at({0, i, h * 2 + c}) * k.value().at({0, j, h * 2 + c});
        s[j] = d / std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (int c = 0; c < 2; ++c) {
        double acc = 0;
        for (int j = 0; j < 5; ++j) acc += s[j] / z * v.value().at({0, j, h * 2 + c});
        CHECK(out.at({0, i, h * 2 + c}) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("segmentation loss gradient and value") {
  auto z = leaf({2, 1, 4, 4}, 2.0);
  Tensor<double> t({2, 1, 4, 4});
  for (std::size_t i = 0; i < t.size(); i += 3) t[i] = 1;
  check_grad({z}, [&] { return ops::segmentation_loss<double>(z, t, 0.5); });
  // zero logits: BCE is ln 2 exactly
  auto zero = V::constant(Tensor<double>({1, 1, 3, 3}));
  Tensor<double> none({1, 1, 3, 3});
  CHECK(ops::segmentation_loss<double>(zero, none, 0.0).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto a = leaf({3});
  NoGradGuard g;
  const auto b = ops::mul(a, a);
  CHECK(!b.requires_grad());
  CHECK(b.node()->inputs.empty());
}

TEST_CASE("shape errors") {
  auto x = leaf({1, 3, 4, 4});
  CHECK_THROWS(ops::conv2d<double>(x, leaf({2, 2, 3, 3}), std::nullopt));
  CHECK_THROWS(ops::conv2d<double>(x, leaf({2, 3, 2, 2}), std::nullopt));
  CHECK_THROWS(ops::add(x, leaf({1, 3, 4, 5})));
  CHECK_THROWS(ops::attention(leaf({1, 2, 6}), leaf({1, 3, 6}), leaf({1, 3, 6}), 4));
}
