#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "metadec/frequency.hpp"
#include "oracles.hpp"

using namespace metadec;

namespace {

Tensor<double> random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<double> t({h, w});
  for (auto& v : t.values()) v = u(rng);
  return t;
}

double max_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

TEST_CASE("mask values at reference points") {
  const auto m = gaussian_highpass_mask(64, 64, 5.0);
  CHECK(m.u0 == 32);
  CHECK(m.v0 == 32);
  CHECK(m.at(32, 32) == 0.0);
  CHECK(!std::signbit(m.at(32, 32)));
  CHECK(m.at(0, 0) >= 0.999);
  // squared distance 50 = 2σ²: (37, 33) has 25 + 1 = 26, so check (37, 37): 25 + 25
  CHECK(std::abs(m.at(37, 37) - (1.0 - std::exp(-1.0))) <= 1e-12);
}

TEST_CASE("mask invariants") {
  for (auto [h, w] : {std::pair{64, 64}, {17, 12}, {1, 1}, {8, 30}}) {
    const auto m = gaussian_highpass_mask(h, w, 3.0);
    double prev = -1;
    for (int d = 0; d < h - m.u0; ++d) {  // along a ray from the center
      const double v = m.at(m.u0 + d, m.v0);
      CHECK(v >= prev);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      prev = v;
    }
    for (int u = 0; u < h; ++u) {
      for (int v = 0; v < w; ++v) {
        const int mu = 2 * m.u0 - u, mv = 2 * m.v0 - v;
        if (mu >= 0 && mu < h && mv >= 0 && mv < w) CHECK(m.at(u, v) == m.at(mu, mv));
      }
    }
  }
  CHECK_THROWS(gaussian_highpass_mask(8, 8, 0.0));
  CHECK_THROWS(gaussian_highpass_mask(8, 8, -1.0));
  CHECK_THROWS(gaussian_highpass_mask(0, 8, 1.0));
}

TEST_CASE("constant image is fully suppressed") {
  for (double c : {1.0, -3.5, 250.0}) {
    Tensor<double> img({64, 64}, c);
    const auto out = highpass_filter(img, 5.0);
    CHECK(max_abs(out.highpass) <= 1e-5 * std::abs(c));
    CHECK(out.image == img);
  }
}

TEST_CASE("matches a direct DFT oracle") {
  for (auto [h, w] : {std::pair{8, 8}, {12, 10}, {9, 7}}) {
    const auto img = random_image(h, w, 5 + h);
    const auto got = highpass_filter(img, 2.0).highpass;
    const auto want = oracle::highpass_dft(img, 2.0);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-9));
  }
}

TEST_CASE("Parseval check for a centered impulse") {
  Tensor<double> img({64, 64});
  img.at({32, 32}) = 1.0;
  const auto m = gaussian_highpass_mask(64, 64, 5.0);
  const auto out = highpass_filter(img, m);
  double energy = 0, mean_m2 = 0;
  for (double v : out.highpass.values()) energy += v * v;
  for (double v : m.values) mean_m2 += v * v;
  mean_m2 /= 64.0 * 64.0;
  CHECK(energy == doctest::Approx(mean_m2).epsilon(1e-9));
}

TEST_CASE("identity mask round trip") {
  const auto img = random_image(32, 24, 3);
  const auto out = highpass_filter(img, identity_mask(32, 24));
  double err = 0, ref = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    err = std::max(err, std::abs(out.highpass[i] - img[i]));
    ref = std::max(ref, std::abs(img[i]));
  }
  CHECK(err <= 1e-5 * ref);
}

TEST_CASE("linearity, zero mean and shift covariance") {
  const auto x = random_image(32, 32, 1), y = random_image(32, 32, 2);
  Tensor<double> mix({32, 32});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * x[i] - 0.75 * y[i];
  const auto hx = highpass_filter(x, 5.0).highpass, hy = highpass_filter(y, 5.0).highpass;
  const auto hm = highpass_filter(mix, 5.0).highpass;
  double mean = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    CHECK(std::abs(hm[i] - (2.5 * hx[i] - 0.75 * hy[i])) <= 1e-5 * (max_abs(hm) + 1e-12));
    mean += hx[i];
  }
  CHECK(std::abs(mean / x.size()) <= 1e-12);

  Tensor<double> shifted({32, 32});
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) shifted.at({(r + 5) % 32, (c + 11) % 32}) = x.at({r, c});
  const auto hs = highpass_filter(shifted, 5.0).highpass;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) CHECK(hs.at({(r + 5) % 32, (c + 11) % 32}) == doctest::Approx(hx.at({r, c})).epsilon(1e-9));
}

TEST_CASE("normalization precedes filtering") {
  auto raw = random_image(16, 16, 9);
  for (auto& v : raw.values()) v = 100 + 20 * v;
  const auto n = normalize_image(raw);
  double mean = 0, var = 0;
  for (double v : n.values()) mean += v;
  mean /= n.size();
  for (double v : n.values()) var += (v - mean) * (v - mean);
  CHECK(std::abs(mean) < 1e-12);
  CHECK(var / n.size() == doctest::Approx(1.0).epsilon(1e-9));
  const auto sf = spatial_frequency_input(raw, 5.0);
  CHECK(sf.image == n);
  CHECK(sf.highpass == highpass_filter(n, 5.0).highpass);
  const auto flat = normalize_image(Tensor<double>({4, 4}, 7.0));
  CHECK(max_abs(flat) == 0.0);
}

TEST_CASE("mismatched mask size is rejected") {
  CHECK_THROWS(highpass_filter(random_image(8, 8, 1), gaussian_highpass_mask(8, 9, 1.0)));
}
