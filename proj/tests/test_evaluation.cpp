#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "metadec/evaluation.hpp"
#include "oracles.hpp"

using namespace metadec;

namespace {

BinaryMask blob(int h, int w, std::initializer_list<std::pair<int, int>> px) {
  BinaryMask m({h, w});
  for (auto [y, x] : px) m.at({y, x}) = 1;
  return m;
}

BinaryMask random_mask(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> side(1, 16);
  std::uniform_real_distribution<double> u(0, 1);
  const int h = side(rng), w = side(rng);
  const double density = u(rng) * 0.5;
  BinaryMask m({h, w});
  for (auto& v : m.storage()) v = u(rng) < density;
  return m;
}

BinaryMask random_like(const BinaryMask& ref, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  const double density = u(rng) * 0.5;
  BinaryMask m(ref.shape());
  for (auto& v : m.storage()) v = u(rng) < density;
  return m;
}

}  // namespace

TEST_CASE("iou examples") {
  const auto gt = blob(4, 4, {{1, 1}, {1, 2}});
  const auto pred = blob(4, 4, {{1, 2}, {1, 3}});
  CHECK(iou({pred}, {gt}) == doctest::Approx(1.0 / 3.0));
  CHECK(iou({gt}, {gt}) == 1.0);
  CHECK(iou({blob(4, 4, {{3, 3}})}, {gt}) == 0.0);
  CHECK(iou({BinaryMask({4, 4})}, {BinaryMask({4, 4})}) == 1.0);
  CHECK_THROWS(iou({BinaryMask({4, 5})}, {gt}));
}

TEST_CASE("pd_fa examples") {
  BinaryMask gt({256, 256}), pred({256, 256});
  gt.at({100, 100}) = 1;
  pred.at({102, 100}) = 1;
  auto r = pd_fa(pred, gt);
  CHECK(r.detected == 1);
  CHECK(r.targets == 1);
  CHECK(r.false_pixels == 0);

  BinaryMask far({256, 256});
  far.at({110, 100}) = far.at({110, 101}) = far.at({111, 100}) = 1;
  r = pd_fa(far, gt);
  CHECK(r.detected == 0);
  CHECK(r.targets == 1);
  CHECK(r.false_pixels == 3);
  MetricAccumulator acc;
  acc.add(far, gt);
  CHECK(acc.report().fa == doctest::Approx(3.0 / 65536.0));
  CHECK(acc.report().pd == 0.0);

  r = pd_fa(BinaryMask({8, 8}), BinaryMask({8, 8}));
  CHECK(r.detected == 0);
  CHECK(r.targets == 0);
  CHECK(r.false_pixels == 0);
  CHECK_THROWS(pd_fa(BinaryMask({8, 8}), BinaryMask({8, 9})));
}

TEST_CASE("targetless images do not enter the detection denominator") {
  MetricAccumulator acc;
  acc.add(blob(8, 8, {{2, 2}}), blob(8, 8, {{2, 2}}));
  acc.add(BinaryMask({8, 8}), BinaryMask({8, 8}));
  CHECK(acc.report().pd == 1.0);
  CHECK(acc.report().n_targets == 1);
  CHECK(acc.report().n_images == 2);
  MetricAccumulator none;
  none.add(BinaryMask({8, 8}), BinaryMask({8, 8}));
  CHECK(none.report().pd == 1.0);
}

TEST_CASE("each prediction matches at most one target") {
  // two GT pixels 2 px apart, one prediction between them
  const auto gt = blob(9, 9, {{4, 2}, {4, 6}});
  const auto pred = blob(9, 9, {{4, 4}});
  const auto r = pd_fa(pred, gt);
  CHECK(r.detected == 1);
  CHECK(r.false_pixels == 0);
  // the nearer target wins even when it comes later in raster order
  const auto gt2 = blob(9, 9, {{0, 4}, {6, 4}});
  const auto p2 = blob(9, 9, {{3, 4}, {5, 4}});
  const auto r2 = pd_fa(p2, gt2);
  CHECK(r2.detected == 2);
}

TEST_CASE("components follow 8-connectivity in raster order") {
  const auto m = blob(5, 5, {{0, 3}, {1, 4}, {2, 0}, {3, 1}, {4, 4}});
  const auto c = label_components(m);
  REQUIRE(c.components.size() == 3);
  CHECK(c.components[0].area == 2);
  CHECK(c.components[0].cy == 0.5);
  CHECK(c.components[0].cx == 3.5);
  CHECK(c.components[1].area == 2);
  CHECK(c.components[2].area == 1);
  CHECK(c.labels[4 * 5 + 4] == 2);
  CHECK(c.labels[0] == -1);
}

TEST_CASE("metrics agree with the brute-force oracle on random small masks") {
  std::mt19937_64 rng(2024);
  std::vector<BinaryMask> preds, gts;
  for (int i = 0; i < 1000; ++i) {
    const auto gt = random_mask(rng);
    const auto pred = random_like(gt, rng);
    const auto want = oracle::pd_fa(pred, gt, 3.0);
    const auto got = pd_fa(pred, gt, 3.0);
    CHECK(got.detected == want.detected);
    CHECK(got.targets == want.targets);
    CHECK(got.false_pixels == want.false_pixels);
    CHECK(iou({pred}, {gt}) == oracle::iou({pred}, {gt}));
    const auto comps = oracle::components(gt);
    const auto mine = label_components(gt).components;
    REQUIRE(comps.size() == mine.size());
    for (std::size_t k = 0; k < comps.size(); ++k) {
      CHECK(comps[k].area == mine[k].area);
      CHECK(comps[k].cy == mine[k].cy);
      CHECK(comps[k].cx == mine[k].cx);
    }
    preds.push_back(pred);
    gts.push_back(gt);
  }
  CHECK(iou(preds, gts) == oracle::iou(preds, gts));
}

TEST_CASE("split metrics do not depend on image order") {
  std::mt19937_64 rng(5);
  std::vector<BinaryMask> preds, gts;
  for (int i = 0; i < 40; ++i) {
    gts.push_back(random_mask(rng));
    preds.push_back(random_like(gts.back(), rng));
  }
  MetricAccumulator a, b;
  for (int i = 0; i < 40; ++i) a.add(preds[i], gts[i]);
  for (int i = 39; i >= 0; --i) b.add(preds[i], gts[i]);
  const auto ra = a.report(), rb = b.report();
  CHECK(ra.iou == rb.iou);
  CHECK(ra.pd == rb.pd);
  CHECK(ra.fa == rb.fa);
}

TEST_CASE("raising the threshold never adds false pixels") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = random_mask(rng);
    Tensor<double> prob(gt.shape());
    for (auto& v : prob.storage()) v = u(rng);
    std::int64_t prev = std::numeric_limits<std::int64_t>::max();
    std::int64_t prev_fp = prev;
    for (double t = 0.05; t < 1.0; t += 0.05) {
      const auto p = binarize(prob, t);
      const auto fp = pixel_counts(p, gt).fp;
      CHECK(fp <= prev_fp);
      prev_fp = fp;
      // matched-to-nothing pixels can only shrink along with the positive set
      int pos = 0;
      for (auto v : p.values()) pos += v;
      CHECK(pos <= prev);
      prev = pos;
    }
  }
  CHECK(binarize(Tensor<double>({1, 1}, 0.5), 0.5)[0] == 1);
}

TEST_CASE("drift statistics") {
  const std::vector<std::vector<float>> same(4, std::vector<float>(6, 0.25f));
  const auto deg = drift_statistics(same, {"a", "a", "b", "b"});
  CHECK(deg.degenerate);
  CHECK(deg.ratio == 1.0);

  const std::vector<std::vector<float>> sep{{0, 0}, {0, 1}, {10, 0}, {10, 1}};
  const auto s = drift_statistics(sep, {"a", "a", "b", "b"});
  CHECK(!s.degenerate);
  CHECK(s.intra == doctest::Approx(1.0));
  CHECK(s.inter == doctest::Approx((10.0 + 2 * std::sqrt(101.0) + 10.0) / 4.0));
  CHECK(s.ratio == doctest::Approx(s.inter / s.intra));
  REQUIRE(s.scenarios.size() == 2);
  CHECK(s.scenarios[0].label == "a");
  CHECK(s.scenarios[0].n_images == 2);

  // the same vectors under two labels: inter and intra estimate the same distance
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0, 1);
  std::vector<std::vector<float>> pts(60, std::vector<float>(16));
  for (auto& p : pts)
    for (auto& v : p) v = n(rng);
  std::vector<std::vector<float>> doubled = pts;
  doubled.insert(doubled.end(), pts.begin(), pts.end());
  std::vector<std::string> labels(60, "x");
  labels.resize(120, "y");
  const auto sym = drift_statistics(doubled, labels);
  CHECK(sym.ratio == doctest::Approx(1.0).epsilon(0.05));

  CHECK_THROWS(drift_statistics(sep, {"a", "a", "a", "a"}));
  CHECK_THROWS(drift_statistics(sep, {"a", "", "b", "b"}));
}

TEST_CASE("csv formats") {
  MetricAccumulator acc;
  acc.add(blob(4, 4, {{1, 1}}), blob(4, 4, {{1, 1}}));
  CHECK(metric_csv_header() == "split,scenario,IoU,Pd,Fa,n_images,n_targets\n");
  CHECK(metric_csv_row("test", "all", acc.report()).rfind("test,all,1,1,0,1,1", 0) == 0);
  const std::vector<std::vector<float>> sep{{0, 0}, {0, 1}, {10, 0}, {10, 1}};
  const auto csv = drift_csv({{"a", acc.report()}, {"b", acc.report()}},
                             drift_statistics(sep, {"a", "a", "b", "b"}));
  CHECK(csv.rfind("scenario,n_images,n_targets,IoU,Pd,Fa,intra_distance,inter_distance,separation_ratio,degenerate\n", 0) == 0);
  CHECK(csv.find("\nall,") != std::string::npos);
}
