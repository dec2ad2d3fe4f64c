#include "metadec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <tuple>

namespace metadec {

namespace {

void require_same(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": mask shapes differ (" +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()) + ")");
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

BinaryMask binarize(const Tensor<double>& prob, double threshold) {
  BinaryMask out(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? 1 : 0;
  return out;
}

ComponentLabels label_components(const BinaryMask& mask) {
  const int h = mask.dim(0), w = mask.dim(1);
  ComponentLabels out;
  out.labels.assign(mask.size(), -1);
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int start = y * w + x;
      if (!mask[start] || out.labels[start] >= 0) continue;
      const int id = static_cast<int>(out.components.size());
      Component c;
      double sy = 0, sx = 0;
      out.labels[start] = id;
      stack.assign(1, start);
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int py = p / w, px = p % w;
        ++c.area;
        sy += py;
        sx += px;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = py + dy, nx = px + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const int q = ny * w + nx;
            if (mask[q] && out.labels[q] < 0) {
              out.labels[q] = id;
              stack.push_back(q);
            }
          }
        }
      }
      c.cy = sy / c.area;
      c.cx = sx / c.area;
      out.components.push_back(c);
    }
  }
  return out;
}

PixelCounts pixel_counts(const BinaryMask& pred, const BinaryMask& gt) {
  require_same(pred, gt, "iou");
  PixelCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

double iou(const std::vector<BinaryMask>& pred, const std::vector<BinaryMask>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("iou: mask set sizes differ");
  std::int64_t tp = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto c = pixel_counts(pred[i], gt[i]);
    tp += c.tp;
    uni += c.tp + c.fp + c.fn;
  }
  return uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
}

PdFaCounts pd_fa(const BinaryMask& pred, const BinaryMask& gt, double match_radius) {
  require_same(pred, gt, "pd_fa");
  const auto pc = label_components(pred).components;
  const auto gc = label_components(gt).components;
  struct Pair {
    double d2;
    int g, p;
  };
  std::vector<Pair> pairs;
  const double r2 = match_radius * match_radius;
  for (int g = 0; g < static_cast<int>(gc.size()); ++g) {
    for (int p = 0; p < static_cast<int>(pc.size()); ++p) {
      const double dy = gc[g].cy - pc[p].cy, dx = gc[g].cx - pc[p].cx;
      const double d2 = dy * dy + dx * dx;
      if (d2 <= r2) pairs.push_back({d2, g, p});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tie(a.d2, a.g, a.p) < std::tie(b.d2, b.g, b.p);
  });
  std::vector<char> g_used(gc.size(), 0), p_used(pc.size(), 0);
  PdFaCounts out;
  out.targets = static_cast<int>(gc.size());
  out.total_pixels = static_cast<std::int64_t>(pred.size());
  for (const auto& pr : pairs) {
    if (g_used[pr.g] || p_used[pr.p]) continue;
    g_used[pr.g] = p_used[pr.p] = 1;
    ++out.detected;
  }
  for (std::size_t p = 0; p < pc.size(); ++p) {
    if (!p_used[p]) out.false_pixels += pc[p].area;
  }
  return out;
}

void MetricAccumulator::add(const BinaryMask& pred, const BinaryMask& gt, const std::string& id) {
  images_.push_back({id, pixel_counts(pred, gt), pd_fa(pred, gt, radius_)});
}

MetricReport MetricAccumulator::report() const { return summarize(images_); }

MetricReport summarize(const std::vector<ImageMetrics>& images) {
  MetricReport r;
  r.per_image = images;
  r.n_images = static_cast<int>(images.size());
  std::int64_t tp = 0, uni = 0, det = 0, tgt = 0, fpix = 0, tpix = 0;
  for (const auto& m : images) {
    tp += m.pixels.tp;
    uni += m.pixels.tp + m.pixels.fp + m.pixels.fn;
    det += m.detection.detected;
    tgt += m.detection.targets;
    fpix += m.detection.false_pixels;
    tpix += m.detection.total_pixels;
  }
  r.iou = uni == 0 ? 1.0 : static_cast<double>(tp) / uni;
  r.pd = tgt == 0 ? 1.0 : static_cast<double>(det) / tgt;
  r.fa = tpix == 0 ? 0.0 : static_cast<double>(fpix) / tpix;
  r.n_targets = static_cast<int>(tgt);
  return r;
}

std::string metric_csv_header() { return "split,scenario,IoU,Pd,Fa,n_images,n_targets\n"; }

std::string metric_csv_row(const std::string& split, const std::string& scenario,
                           const MetricReport& r) {
  return split + "," + scenario + "," + fmt(r.iou) + "," + fmt(r.pd) + "," + fmt(r.fa) + "," +
         std::to_string(r.n_images) + "," + std::to_string(r.n_targets) + "\n";
}

DriftStats drift_statistics(const std::vector<std::vector<float>>& params,
                            const std::vector<std::string>& labels) {
  if (params.size() != labels.size()) throw std::invalid_argument("drift: label count mismatch");
  std::map<std::string, int> index;
  DriftStats s;
  std::vector<int> label_id;
  for (const auto& l : labels) {
    if (l.empty()) throw std::invalid_argument("drift: missing scenario label");
    auto [it, fresh] = index.emplace(l, static_cast<int>(s.scenarios.size()));
    if (fresh) s.scenarios.push_back({l, 0, 0, 0});
    ++s.scenarios[it->second].n_images;
    label_id.push_back(it->second);
  }
  if (s.scenarios.size() < 2) {
    throw std::invalid_argument("drift: need at least 2 scenario labels, got " +
                                std::to_string(s.scenarios.size()));
  }
  const std::size_t n = params.size();
  const std::size_t k = s.scenarios.size();
  std::vector<double> intra_sum(k, 0), inter_sum(k, 0);
  std::vector<std::int64_t> intra_n(k, 0), inter_n(k, 0);
  double all_intra = 0, all_inter = 0;
  std::int64_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (params[i].size() != params[j].size()) {
        throw std::invalid_argument("drift: parameter vectors differ in length");
      }
      double d2 = 0;
      for (std::size_t t = 0; t < params[i].size(); ++t) {
        const double d = double(params[i][t]) - double(params[j][t]);
        d2 += d * d;
      }
      const double d = std::sqrt(d2);
      const int a = label_id[i], b = label_id[j];
      if (a == b) {
        intra_sum[a] += d;
        ++intra_n[a];
        all_intra += d;
        ++n_intra;
      } else {
        inter_sum[a] += d;
        inter_sum[b] += d;
        ++inter_n[a];
        ++inter_n[b];
        all_inter += d;
        ++n_inter;
      }
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    s.scenarios[c].intra = intra_n[c] ? intra_sum[c] / intra_n[c] : 0.0;
    s.scenarios[c].inter = inter_n[c] ? inter_sum[c] / inter_n[c] : 0.0;
  }
  s.intra = n_intra ? all_intra / n_intra : 0.0;
  s.inter = n_inter ? all_inter / n_inter : 0.0;
  const double ratio = s.inter / s.intra;
  if (!std::isfinite(ratio)) {
    s.ratio = 1.0;
    s.degenerate = true;
  } else {
    s.ratio = ratio;
  }
  return s;
}

std::string drift_csv(const std::vector<DriftRow>& rows, const DriftStats& stats) {
  std::string out =
      "scenario,n_images,n_targets,IoU,Pd,Fa,intra_distance,inter_distance,separation_ratio,"
      "degenerate\n";
  for (const auto& row : rows) {
    const DriftStats::Scenario* sc = nullptr;
    for (const auto& s : stats.scenarios) {
      if (s.label == row.scenario) sc = &s;
    }
    if (!sc) throw std::invalid_argument("drift: no statistics for scenario " + row.scenario);
    out += row.scenario + "," + std::to_string(row.metrics.n_images) + "," +
           std::to_string(row.metrics.n_targets) + "," + fmt(row.metrics.iou) + "," +
           fmt(row.metrics.pd) + "," + fmt(row.metrics.fa) + "," + fmt(sc->intra) + "," +
           fmt(sc->inter) + "," + fmt(stats.ratio) + "," + (stats.degenerate ? "1" : "0") + "\n";
  }
  std::vector<ImageMetrics> every;
  for (const auto& row : rows) {
    every.insert(every.end(), row.metrics.per_image.begin(), row.metrics.per_image.end());
  }
  const MetricReport all = summarize(every);
  out += "all," + std::to_string(all.n_images) + "," + std::to_string(all.n_targets) + "," +
         fmt(all.iou) + "," + fmt(all.pd) + "," + fmt(all.fa) + "," + fmt(stats.intra) + "," + fmt(stats.inter) + "," + fmt(stats.ratio) + "," +
         (stats.degenerate ? "1" : "0") + "\n";
  return out;
}

}  // namespace metadec
