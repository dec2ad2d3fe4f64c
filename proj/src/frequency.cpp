#include "metadec/frequency.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <tuple>

namespace metadec {

namespace {

// FFTW's planner is not re-entrant.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
  ~PlanPair() {
    std::lock_guard lock(planner_mutex());
    if (forward) fftw_destroy_plan(forward);
    if (inverse) fftw_destroy_plan(inverse);
  }
};

struct FftBuffer {
  fftw_complex* data = nullptr;
  explicit FftBuffer(std::size_t n) : data(fftw_alloc_complex(n)) {
    if (!data) throw std::bad_alloc();
  }
  ~FftBuffer() { fftw_free(data); }
  FftBuffer(const FftBuffer&) = delete;
  FftBuffer& operator=(const FftBuffer&) = delete;
};

std::shared_ptr<const HighpassMask> cached_mask(int h, int w, double sigma) {
  static std::mutex m;
  static std::map<std::tuple<int, int, double>, std::shared_ptr<const HighpassMask>> cache;
  std::lock_guard lock(m);
  auto& slot = cache[{h, w, sigma}];
  if (!slot) slot = std::make_shared<HighpassMask>(gaussian_highpass_mask(h, w, sigma));
  return slot;
}

}  // namespace

HighpassMask gaussian_highpass_mask(int height, int width, double sigma) {
  if (height < 1 || width < 1) throw std::invalid_argument("highpass mask needs h, w >= 1");
  if (!(sigma > 0)) throw std::invalid_argument("highpass mask needs sigma > 0");
  HighpassMask m;
  m.height = height;
  m.width = width;
  m.sigma = sigma;
  m.u0 = height / 2;
  m.v0 = width / 2;
  m.values.resize(static_cast<std::size_t>(height) * width);
  const double denom = 2.0 * sigma * sigma;
  for (int u = 0; u < height; ++u) {
    for (int v = 0; v < width; ++v) {
      const double du = u - m.u0, dv = v - m.v0;
      m.values[static_cast<std::size_t>(u) * width + v] =
          0.0 - std::expm1(-(du * du + dv * dv) / denom);
    }
  }
  return m;
}

HighpassMask identity_mask(int height, int width) {
  HighpassMask m;
  m.height = height;
  m.width = width;
  m.sigma = INFINITY;
  m.u0 = height / 2;
  m.v0 = width / 2;
  m.values.assign(static_cast<std::size_t>(height) * width, 1.0);
  return m;
}

SpatialFrequencyInput highpass_filter(const Tensor<double>& image, const HighpassMask& mask) {
  if (image.rank() != 2) throw std::invalid_argument("highpass_filter expects an [H,W] image");
  const int h = image.dim(0), w = image.dim(1);
  if (mask.height != h || mask.width != w) {
    throw std::invalid_argument("highpass mask size does not match image");
  }
  const std::size_t n = image.size();
  for (double v : image.values()) {
    if (!std::isfinite(v)) throw std::invalid_argument("highpass_filter: non-finite pixel");
  }
  FftBuffer buf(n);
  PlanPair plans;
  {
    std::lock_guard lock(planner_mutex());
    plans.forward = fftw_plan_dft_2d(h, w, buf.data, buf.data, FFTW_FORWARD, FFTW_ESTIMATE);
    plans.inverse = fftw_plan_dft_2d(h, w, buf.data, buf.data, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < n; ++i) {
    buf.data[i][0] = image[i];
    buf.data[i][1] = 0.0;
  }
  fftw_execute(plans.forward);
  // Bin (i, j) of the unshifted spectrum sits at ((i + h/2) mod h, (j + w/2) mod w)
  // once DC is moved to the center.
  for (int i = 0; i < h; ++i) {
    const int u = (i + h / 2) % h;
    for (int j = 0; j < w; ++j) {
      const int v = (j + w / 2) % w;
      const double m = mask.at(u, v);
      auto& c = buf.data[static_cast<std::size_t>(i) * w + j];
      c[0] *= m;
      c[1] *= m;
    }
  }
  fftw_execute(plans.inverse);

  SpatialFrequencyInput out{image, Tensor<double>({h, w})};
  double energy = 0, imag_max = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.highpass[i] = buf.data[i][0] / static_cast<double>(n);
    energy += out.highpass[i] * out.highpass[i];
    imag_max = std::max(imag_max, std::abs(buf.data[i][1]) / static_cast<double>(n));
  }
  const double rms = std::sqrt(energy / n);
  if (imag_max > 1e-5 * std::max(rms, 1.0)) {
    throw std::runtime_error("highpass_filter: imaginary residue exceeds tolerance");
  }
  return out;
}

SpatialFrequencyInput highpass_filter(const Tensor<double>& image, double sigma) {
  if (image.rank() != 2) throw std::invalid_argument("highpass_filter expects an [H,W] image");
  return highpass_filter(image, *cached_mask(image.dim(0), image.dim(1), sigma));
}

Tensor<double> normalize_image(const Tensor<double>& image) {
  const std::size_t n = image.size();
  if (n == 0) throw std::invalid_argument("normalize_image: empty image");
  double mean = 0;
  for (double v : image.values()) mean += v;
  mean /= n;
  double var = 0;
  for (double v : image.values()) var += (v - mean) * (v - mean);
  var /= n;
  Tensor<double> out(image.shape());
  const double inv = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
  for (std::size_t i = 0; i < n; ++i) out[i] = (image[i] - mean) * inv;
  return out;
}

SpatialFrequencyInput spatial_frequency_input(const Tensor<double>& raw, double sigma) {
  return highpass_filter(normalize_image(raw), sigma);
}

}  // namespace metadec
