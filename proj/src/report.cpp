#include "metadec/report.hpp"

#include <stdexcept>

namespace metadec {

MetricReport evaluate_model(const Model<float>& model, const std::vector<Sample>& samples,
                            double threshold, double match_radius) {
  MetricAccumulator acc(match_radius);
  for (const auto& s : samples) {
    acc.add(binarize(predict_probabilities(model, s.image), threshold), s.mask, s.id);
  }
  return acc.report();
}

std::vector<DriftRow> evaluate_by_scenario(const Model<float>& model,
                                           const std::vector<Sample>& samples, double threshold,
                                           double match_radius) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<ImageMetrics>> groups;
  for (const auto& s : samples) {
    if (!groups.count(s.scenario)) order.push_back(s.scenario);
    MetricAccumulator acc(match_radius);
    acc.add(binarize(predict_probabilities(model, s.image), threshold), s.mask, s.id);
    groups[s.scenario].push_back(acc.report().per_image.front());
  }
  std::vector<DriftRow> rows;
  for (const auto& label : order) rows.push_back({label, summarize(groups[label])});
  return rows;
}

std::vector<float> generated_matrix(const Model<float>& model, const Tensor<double>& image) {
  NoGradGuard guard;
  const auto gen = model.generate(prepare_batch<float>({&image}, model.config().sigma_hp));
  const auto& v = gen.matrix.value().storage();
  return std::vector<float>(v.begin(), v.end());
}

DriftReport drift_report(const Model<float>& model, const std::vector<Sample>& samples,
                         double threshold, double match_radius) {
  std::vector<std::vector<float>> params;
  std::vector<std::string> labels;
  for (const auto& s : samples) {
    if (s.scenario.empty() || s.scenario == "unknown") {
      throw std::invalid_argument("drift report: sample " + s.id + " has no scenario label");
    }
    params.push_back(generated_matrix(model, s.image));
    labels.push_back(s.scenario);
  }
  DriftReport r;
  r.stats = drift_statistics(params, labels);
  r.rows = evaluate_by_scenario(model, samples, threshold, match_radius);
  return r;
}

}  // namespace metadec
