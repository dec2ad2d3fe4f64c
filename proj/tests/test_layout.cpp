#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "metadec/model.hpp"

using namespace metadec;
using V = Var<double>;

TEST_CASE("three basic stages with C_dec = 4") {
  const auto s = make_schema(DecoderVariant::basic, 4, 3);
  const auto l = compute_layout(s);
  CHECK(l.num_rows == 12);
  CHECK(l.row_width == 36);
  CHECK(l.num_rows * l.row_width == 432);
  CHECK(l.bn_param_count == 24);
}

TEST_CASE("desk layouts per variant") {
  const int rows[3] = {128, 576, 832};
  const int bn[3] = {256, 640, 640};
  int k = 0;
  for (auto v : {DecoderVariant::basic, DecoderVariant::multiscale, DecoderVariant::spatial_attention}) {
    const auto l = compute_layout(make_schema(v, 32, 4));
    CHECK(l.num_rows == rows[k]);
    CHECK(l.row_width == 288);
    CHECK(l.bn_param_count == bn[k]);
    ++k;
  }
}

TEST_CASE("homogeneous schemas tile the matrix exactly") {
  Rng rng(17);
  std::uniform_int_distribution<int> width(1, 64), count(1, 40);
  for (int trial = 0; trial < 200; ++trial) {
    DecoderSchema s;
    s.width = width(rng);
    const int n = count(rng);
    long expect = 0;
    for (int u = 0; u < n; ++u) {
      s.units.push_back({0, "main", UnitKind::conv3_full, s.width, s.width, true});
      expect += long(s.width) * s.width * 9;
    }
    const auto l = compute_layout(s);
    CHECK(long(l.num_rows) * l.row_width == expect);
  }
}

TEST_CASE("kernel usage within a row") {
  const auto s = make_schema(DecoderVariant::spatial_attention, 32, 1);
  REQUIRE(s.units.size() == 7);
  CHECK(s.units[0].kernel_elems() == 288);
  CHECK(s.units[1].kernel_elems() == 9);
  CHECK(s.units[2].kernel_elems() == 25);
  CHECK(s.units[3].kernel_elems() == 32);
  CHECK(s.units[3].out_channels == 16);
  CHECK(s.units[4].kernel_elems() == 16);
  CHECK(s.units[5].kernel_elems() == 3);
  const auto csv = layout_csv(s, compute_layout(s));
  CHECK(csv.find("2,0,dw5,conv5_depthwise,") != std::string::npos);
  CHECK(csv.find(",25,288,263,0\n") != std::string::npos);
}

TEST_CASE("oversized kernels cannot be packed") {
  DecoderSchema s;
  s.width = 4;
  s.units.push_back({0, "main", UnitKind::conv3_full, 4, 4, true});
  s.units.push_back({0, "wide", UnitKind::conv1_pointwise, 4, 40, false});
  CHECK_THROWS_WITH_AS(compute_layout(s), doctest::Contains("invalid channel counts"),
                       std::invalid_argument);
  DecoderSchema d;
  d.width = 3;  // rows hold 27 entries, a 5×5 kernel fits
  d.units.push_back({0, "dw5", UnitKind::conv5_depthwise, 3, 1, false});
  CHECK(compute_layout(d).num_rows == 3);
  d.width = 2;  // 18 < 25
  d.units = {{0, "dw5", UnitKind::conv5_depthwise, 2, 1, false}};
  CHECK_THROWS_WITH_AS(compute_layout(d), doctest::Contains("cannot pack"), std::invalid_argument);
  CHECK_THROWS(make_schema(DecoderVariant::multiscale, 5, 2));
  CHECK_THROWS(compute_layout(make_schema(DecoderVariant::basic, 8, 2),
                              validate_config({{"profile", "desk"}})));
}

TEST_CASE("row map is a bijection onto (unit, kernel) pairs") {
  const auto s = make_schema(DecoderVariant::spatial_attention, 8, 4);
  const auto l = compute_layout(s);
  std::set<std::pair<int, int>> seen;
  for (int r = 0; r < l.num_rows; ++r) {
    const auto& slot = l.row_map[r];
    CHECK(r == l.unit_row_begin[slot.unit] + slot.kernel);
    seen.insert({slot.unit, slot.kernel});
  }
  std::size_t total = 0;
  for (const auto& u : s.units) total += u.out_channels;
  CHECK(seen.size() == total);
  CHECK(total == std::size_t(l.num_rows));
}

TEST_CASE("materialize then flatten reproduces the used prefix; slack is ignored") {
  const auto s = make_schema(DecoderVariant::spatial_attention, 4, 2);
  const auto l = compute_layout(s);
  Rng rng(2);
  auto params = normal_tensor<double>({2, l.num_rows, l.row_width}, 1.0, rng);
  auto norm = normal_tensor<double>({2, l.bn_param_count}, 1.0, rng);
  const auto dec = materialize_decoder(l, s, V::constant(params), V::constant(norm), 7);
  CHECK(dec.provenance == 7);
  CHECK(dec.units[0].weight.shape() == Shape{2, 4, 4, 3, 3});
  CHECK(dec.units[5].weight.shape() == Shape{2, 4, 3});
  CHECK(dec.units[3].gamma.shape() == Shape{2, 2});
  const auto flat = flatten_decoder(dec, l, s);
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < l.num_rows; ++r) {
      const int used = s.units[l.row_map[r].unit].kernel_elems();
      for (int c = 0; c < l.row_width; ++c) {
        const double v = flat.at({b, r, c});
        if (c < used) {
          CHECK(v == params.at({b, r, c}));
        } else {
          CHECK(v == 0.0);
        }
      }
    }
  // the first kernel of each unit starts at the beginning of its row
  CHECK(dec.units[1].weight.value()[0] == params.at({0, l.unit_row_begin[1], 0}));
  // γ then β runs
  const int b3 = l.unit_bn_begin[3];
  CHECK(dec.units[3].gamma.value().at({1, 1}) == norm.at({1, b3 + 1}));
  CHECK(dec.units[3].beta.value().at({1, 0}) == norm.at({1, b3 + 2}));

  auto perturbed = params;
  for (int r = 0; r < l.num_rows; ++r) {
    const int used = s.units[l.row_map[r].unit].kernel_elems();
    for (int c = used; c < l.row_width; ++c) perturbed.at({0, r, c}) += 100.0;
  }
  const auto dec2 = materialize_decoder(l, s, V::constant(perturbed), V::constant(norm), 7);
  for (std::size_t u = 0; u < s.units.size(); ++u) {
    CHECK(dec2.units[u].weight.value() == dec.units[u].weight.value());
  }
}

TEST_CASE("earlier units keep their rows when later units are appended") {
  const auto small = compute_layout(make_schema(DecoderVariant::multiscale, 8, 2));
  const auto big = compute_layout(make_schema(DecoderVariant::multiscale, 8, 4));
  for (std::size_t u = 0; u < small.unit_row_begin.size(); ++u) {
    CHECK(small.unit_row_begin[u] == big.unit_row_begin[u]);
    CHECK(small.unit_bn_begin[u] == big.unit_bn_begin[u]);
  }
}

TEST_CASE("shape mismatches are rejected") {
  const auto s = make_schema(DecoderVariant::basic, 4, 1);
  const auto l = compute_layout(s);
  CHECK_THROWS(materialize_decoder(l, s, V::constant(Tensor<double>({1, 5, 36})),
                                   V::constant(Tensor<double>({1, 8})), 1));
  CHECK_THROWS(materialize_decoder(l, s, V::constant(Tensor<double>({1, 4, 36})),
                                   V::constant(Tensor<double>({1, 6})), 1));
}
