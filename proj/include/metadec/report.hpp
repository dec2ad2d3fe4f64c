#pragma once

#include <map>
#include <string>
#include <vector>

#include "metadec/data.hpp"
#include "metadec/model.hpp"

namespace metadec {

/// Runs the model over samples at their own size.
MetricReport evaluate_model(const Model<float>& model, const std::vector<Sample>& samples,
                            double threshold = 0.5, double match_radius = 3.0);

/// Metrics per scenario label, in first-appearance order.
std::vector<DriftRow> evaluate_by_scenario(const Model<float>& model,
                                           const std::vector<Sample>& samples,
                                           double threshold = 0.5, double match_radius = 3.0);

/// Flattened N_q × P generated parameter matrix of one image.
std::vector<float> generated_matrix(const Model<float>& model, const Tensor<double>& image);

struct DriftReport {
  std::vector<DriftRow> rows;
  DriftStats stats;
};

DriftReport drift_report(const Model<float>& model, const std::vector<Sample>& samples,
                         double threshold = 0.5, double match_radius = 3.0);

}  // namespace metadec
