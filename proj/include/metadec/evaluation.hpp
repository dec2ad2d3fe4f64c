#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadec/tensor.hpp"

namespace metadec {

using BinaryMask = Tensor<std::uint8_t>;  // [H, W], values 0/1

/// Thresholds probabilities: value >= threshold -> 1.
BinaryMask binarize(const Tensor<double>& prob, double threshold = 0.5);

struct Component {
  int area = 0;
  double cy = 0;  // centroid row
  double cx = 0;  // centroid column
};

/// 8-connected components in raster order of their first pixel.
struct ComponentLabels {
  std::vector<int> labels;  // -1 for background
  std::vector<Component> components;
};

ComponentLabels label_components(const BinaryMask& mask);

struct PixelCounts {
  std::int64_t tp = 0, fp = 0, fn = 0;
};

PixelCounts pixel_counts(const BinaryMask& pred, const BinaryMask& gt);

/// Σ TP / (Σ TP + Σ FP + Σ FN) over every image pair; 1.0 when the union is empty.
double iou(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt);

struct PdFaCounts {
  int detected = 0;
  int targets = 0;
  std::int64_t false_pixels = 0;
  std::int64_t total_pixels = 0;
};

/// Greedy nearest-first one-to-one matching of predicted to ground-truth
/// component centroids within `match_radius` pixels. Ties are broken by
/// (gt index, pred index).
PdFaCounts pd_fa(const BinaryMask& pred, const BinaryMask& gt, double match_radius = 3.0);

struct ImageMetrics {
  std::string id;
  PixelCounts pixels;
  PdFaCounts detection;
};

struct MetricReport {
  double iou = 0;
  double pd = 0;
  double fa = 0;
  int n_images = 0;
  int n_targets = 0;
  std::vector<ImageMetrics> per_image;
};

/// Associative accumulator over images.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(double match_radius = 3.0) : radius_(match_radius) {}
  void add(const BinaryMask& pred, const BinaryMask& gt, const std::string& id = "");
  MetricReport report() const;

 private:
  double radius_;
  std::vector<ImageMetrics> images_;
};

/// P_d over an empty target set is reported as 1.0 (nothing was missed).
MetricReport summarize(const std::vector<ImageMetrics>& images);

std::string metric_csv_header();
std::string metric_csv_row(const std::string& split, const std::string& scenario,
                           const MetricReport& r);

/// Separation statistic over flattened generated-parameter vectors.
struct DriftStats {
  struct Scenario {
    std::string label;
    int n_images = 0;
    double intra = 0;  // mean pairwise distance inside the scenario
    double inter = 0;  // mean distance to images of other scenarios
  };
  std::vector<Scenario> scenarios;
  double intra = 0;  // over all same-label pairs
  double inter = 0;  // over all cross-label pairs
  double ratio = 1.0;
  bool degenerate = false;  // ratio undefined (0/0 or x/0); reported as 1.0
};

DriftStats drift_statistics(const std::vector<std::vector<float>>& params,
                            const std::vector<std::string>& labels);

struct DriftRow {
  std::string scenario;
  MetricReport metrics;
};

std::string drift_csv(const std::vector<DriftRow>& rows, const DriftStats& stats);

}  // namespace metadec
