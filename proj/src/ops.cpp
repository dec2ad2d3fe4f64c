#include "metadec/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>

namespace metadec::ops {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatR<T>>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;

[[noreturn]] void shape_error(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_rank(const char* op, const Shape& s, int rank) {
  if (static_cast<int>(s.size()) != rank) {
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

/// Gradient buffer of input i, or nullptr when that input needs none.
template <typename T>
Tensor<T>* input_grad(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->ensure_grad() : nullptr;
}

template <typename T>
const Tensor<T>& input_value(Node<T>& self, std::size_t i) {
  return self.inputs[i]->value;
}

template <typename T>
void im2col(const T* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const int hw = ho * wo;
  for (int c = 0; c < ci; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * hw;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride + ki - pad;
          T* dst = row + oh * wo;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + ih * w;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride + kj - pad;
            dst[ow] = (iw >= 0 && iw < w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int ci, int h, int w, int k, int stride, int pad, int ho, int wo,
                T* dx) {
  const int hw = ho * wo;
  for (int c = 0; c < ci; ++c) {
    T* dxc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * hw;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= h) continue;
          const T* src = row + oh * wo;
          T* dst = dxc + ih * w;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride + kj - pad;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    shape_error("add", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    shape_error("mul", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    const auto& av = input_value(self, 0);
    const auto& bv = input_value(self, 1);
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i] * factor;
  return make_result<T>(std::move(out), {a}, [n, factor](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  return make_result<T>(std::move(out), {x}, [n](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        if (self.value[i] > T(0)) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(x.value()[i]);
  return make_result<T>(std::move(out), {x}, [n](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        const T s = self.value[i];
        (*g)[i] += self.grad[i] * s * (T(1) - s);
      }
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt2pi = T(0.39894228040143267794);
  Tensor<T> out(x.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x.value()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return make_result<T>(std::move(out), {x}, [n, inv_sqrt2, inv_sqrt2pi](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& xv = input_value(self, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        (*g)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (auto& v : g->values()) v += self.grad[0];
    }
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  if (x.size() != w.size()) shape_error("weighted_sum", "size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += x.value()[i] * w[i];
  return make_result<T>(Tensor<T>({1}, acc), {x}, [w](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < w.size(); ++i) (*g)[i] += self.grad[0] * w[i];
    }
  });
}

// ---------------------------------------------------------------- convolution

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias,
              int stride, int groups) {
  require_rank("conv2d", x.shape(), 4);
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool per_sample = weight.value().rank() == 5;
  if (!per_sample) require_rank("conv2d weight", weight.shape(), 4);
  const int off = per_sample ? 1 : 0;
  if (per_sample && weight.dim(0) != n) shape_error("conv2d", "per-sample weight batch mismatch");
  const int co = weight.dim(off), cig = weight.dim(off + 1), k = weight.dim(off + 2);
  if (weight.dim(off + 3) != k || k % 2 == 0) shape_error("conv2d", "kernel must be odd and square");
  const bool depthwise = groups != 1;
  if (depthwise && (groups != ci || co != ci || cig != 1)) {
    shape_error("conv2d", "only groups == 1 or depthwise (groups == channels) supported");
  }
  if (!depthwise && cig != ci) {
    shape_error("conv2d", "weight expects " + std::to_string(cig) + " input channels, got " +
                              std::to_string(ci));
  }
  if (bias && (bias->size() != static_cast<std::size_t>(co))) shape_error("conv2d", "bias size");
  if (stride < 1) shape_error("conv2d", "stride must be positive");
  const int pad = k / 2;
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  const int hw = ho * wo;
  const std::size_t wsz = static_cast<std::size_t>(co) * cig * k * k;
  const std::size_t xsz = static_cast<std::size_t>(ci) * h * w;
  const std::size_t osz = static_cast<std::size_t>(co) * hw;

  Tensor<T> out({n, co, ho, wo});
  const T* xv = x.value().data();
  const T* wv = weight.value().data();
  if (!depthwise) {
    std::vector<T> col(static_cast<std::size_t>(ci) * k * k * hw);
    for (int b = 0; b < n; ++b) {
      im2col(xv + b * xsz, ci, h, w, k, stride, pad, ho, wo, col.data());
      CMap<T> wm(wv + (per_sample ? b * wsz : 0), co, ci * k * k);
      CMap<T> cm(col.data(), ci * k * k, hw);
      Map<T> om(out.data() + b * osz, co, hw);
      om.noalias() = wm * cm;
    }
  } else {
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < ci; ++c) {
        const T* xc = xv + b * xsz + static_cast<std::size_t>(c) * h * w;
        const T* kc = wv + (per_sample ? b * wsz : 0) + static_cast<std::size_t>(c) * k * k;
        T* oc = out.data() + b * osz + static_cast<std::size_t>(c) * hw;
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow) {
            T acc = 0;
            for (int ki = 0; ki < k; ++ki) {
              const int ih = oh * stride + ki - pad;
              if (ih < 0 || ih >= h) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int iw = ow * stride + kj - pad;
                if (iw < 0 || iw >= w) continue;
                acc += kc[ki * k + kj] * xc[ih * w + iw];
              }
            }
            oc[oh * wo + ow] = acc;
          }
        }
      }
    }
  }
  if (bias) {
    const T* bv = bias->value().data();
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < co; ++c) {
        T* oc = out.data() + b * osz + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) oc[i] += bv[c];
      }
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const T* xv = input_value(self, 0).data();
    const T* wv = input_value(self, 1).data();
    const T* gv = self.grad.data();
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gw = input_grad(self, 1);
    if (self.inputs.size() > 2) {
      if (auto* gb = input_grad(self, 2)) {
        for (int b = 0; b < n; ++b) {
          for (int c = 0; c < co; ++c) {
            const T* gc = gv + b * osz + static_cast<std::size_t>(c) * hw;
            T acc = 0;
            for (int i = 0; i < hw; ++i) acc += gc[i];
            (*gb)[c] += acc;
          }
        }
      }
    }
    if (!gx && !gw) return;
    if (!depthwise) {
      std::vector<T> col(static_cast<std::size_t>(ci) * k * k * hw);
      std::vector<T> dcol(gx ? col.size() : 0);
      for (int b = 0; b < n; ++b) {
        CMap<T> gm(gv + b * osz, co, hw);
        CMap<T> wm(wv + (per_sample ? b * wsz : 0), co, ci * k * k);
        if (gw) {
          im2col(xv + b * xsz, ci, h, w, k, stride, pad, ho, wo, col.data());
          CMap<T> cm(col.data(), ci * k * k, hw);
          Map<T> gwm(gw->data() + (per_sample ? b * wsz : 0), co, ci * k * k);
          gwm.noalias() += gm * cm.transpose();
        }
        if (gx) {
          Map<T> dcm(dcol.data(), ci * k * k, hw);
          dcm.noalias() = wm.transpose() * gm;
          col2im_add(dcol.data(), ci, h, w, k, stride, pad, ho, wo, gx->data() + b * xsz);
        }
      }
    } else {
      for (int b = 0; b < n; ++b) {
        for (int c = 0; c < ci; ++c) {
          const std::size_t xo = b * xsz + static_cast<std::size_t>(c) * h * w;
          const std::size_t ko = (per_sample ? b * wsz : 0) + static_cast<std::size_t>(c) * k * k;
          const T* xc = xv + xo;
          const T* kc = wv + ko;
          const T* gc = gv + b * osz + static_cast<std::size_t>(c) * hw;
          for (int oh = 0; oh < ho; ++oh) {
            for (int ow = 0; ow < wo; ++ow) {
              const T go = gc[oh * wo + ow];
              if (go == T(0)) continue;
              for (int ki = 0; ki < k; ++ki) {
                const int ih = oh * stride + ki - pad;
                if (ih < 0 || ih >= h) continue;
                for (int kj = 0; kj < k; ++kj) {
                  const int iw = ow * stride + kj - pad;
                  if (iw < 0 || iw >= w) continue;
                  if (gw) (*gw)[ko + ki * k + kj] += go * xc[ih * w + iw];
                  if (gx) (*gx)[xo + ih * w + iw] += go * kc[ki * k + kj];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> conv1d_depthwise(const Var<T>& x, const Var<T>& weight) {
  require_rank("conv1d_depthwise", x.shape(), 3);
  require_rank("conv1d_depthwise weight", weight.shape(), 3);
  const int n = x.dim(0), c = x.dim(1), len = x.dim(2), k = weight.dim(2);
  if (weight.dim(0) != n || weight.dim(1) != c || k % 2 == 0) {
    shape_error("conv1d_depthwise", "weight " + shape_string(weight.shape()) + " for input " +
                                        shape_string(x.shape()));
  }
  const int pad = k / 2;
  Tensor<T> out({n, c, len});
  for (int r = 0; r < n * c; ++r) {
    const T* xr = x.value().data() + static_cast<std::size_t>(r) * len;
    const T* kr = weight.value().data() + static_cast<std::size_t>(r) * k;
    T* orow = out.data() + static_cast<std::size_t>(r) * len;
    for (int i = 0; i < len; ++i) {
      T acc = 0;
      for (int j = 0; j < k; ++j) {
        const int s = i + j - pad;
        if (s >= 0 && s < len) acc += kr[j] * xr[s];
      }
      orow[i] = acc;
    }
  }
  return make_result<T>(std::move(out), {x, weight}, [=](Node<T>& self) {
    const auto& xv = input_value(self, 0);
    const auto& wv = input_value(self, 1);
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gw = input_grad(self, 1);
    for (int r = 0; r < n * c; ++r) {
      const std::size_t xo = static_cast<std::size_t>(r) * len;
      const std::size_t ko = static_cast<std::size_t>(r) * k;
      for (int i = 0; i < len; ++i) {
        const T go = self.grad[xo + i];
        for (int j = 0; j < k; ++j) {
          const int s = i + j - pad;
          if (s < 0 || s >= len) continue;
          if (gw) (*gw)[ko + j] += go * xv[xo + s];
          if (gx) (*gx)[xo + s] += go * wv[ko + j];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- normalization

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                  T eps) {
  require_rank("batch_norm", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c) ||
      running_mean.size() != static_cast<std::size_t>(c) ||
      running_var.size() != static_cast<std::size_t>(c)) {
    shape_error("batch_norm", "parameter size does not match " + std::to_string(c) + " channels");
  }
  const std::size_t count = static_cast<std::size_t>(n) * hw;
  std::vector<T> mean(c), invstd(c);
  const T* xv = x.value().data();
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0, s2 = 0;
      for (int b = 0; b < n; ++b) {
        const T* p = xv + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / count;
      for (int b = 0; b < n; ++b) {
        const T* p = xv + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s2 += (p[i] - m) * (p[i] - m);
      }
      const double var = s2 / count;
      mean[ch] = static_cast<T>(m);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? s2 / (count - 1) : var;
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * static_cast<T>(m);
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * static_cast<T>(unbiased);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      invstd[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor<T> out(x.shape());
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t o = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        out[o + i] = gv[ch] * (xv[o + i] - mean[ch]) * invstd[ch] + bv[ch];
      }
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const T* xv = input_value(self, 0).data();
    const T* gv = input_value(self, 1).data();
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gg = input_grad(self, 1);
    Tensor<T>* gb = input_grad(self, 2);
    for (int ch = 0; ch < c; ++ch) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (int b = 0; b < n; ++b) {
        const std::size_t o = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          const T dy = self.grad[o + i];
          sum_dy += dy;
          sum_dy_xhat += dy * (xv[o + i] - mean[ch]) * invstd[ch];
        }
      }
      if (gg) (*gg)[ch] += sum_dy_xhat;
      if (gb) (*gb)[ch] += sum_dy;
      if (!gx) continue;
      const T gscale = gv[ch] * invstd[ch];
      for (int b = 0; b < n; ++b) {
        const std::size_t o = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          if (training) {
            const T xhat = (xv[o + i] - mean[ch]) * invstd[ch];
            (*gx)[o + i] += gscale * (self.grad[o + i] - sum_dy / T(count) -
                                      xhat * sum_dy_xhat / T(count));
          } else {
            (*gx)[o + i] += gscale * self.grad[o + i];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_rank("instance_norm", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape pshape{n, c};
  if (gamma.shape() != pshape || beta.shape() != pshape) {
    shape_error("instance_norm", "affine parameters must be " + shape_string(pshape));
  }
  const int rows = n * c;
  std::vector<T> mean(rows), invstd(rows);
  const T* xv = x.value().data();
  Tensor<T> out(x.shape());
  for (int r = 0; r < rows; ++r) {
    const T* p = xv + static_cast<std::size_t>(r) * hw;
    double s = 0, s2 = 0;
    for (int i = 0; i < hw; ++i) s += p[i];
    const double m = s / hw;
    for (int i = 0; i < hw; ++i) s2 += (p[i] - m) * (p[i] - m);
    mean[r] = static_cast<T>(m);
    invstd[r] = static_cast<T>(1.0 / std::sqrt(s2 / hw + eps));
    const T g = gamma.value()[r], bb = beta.value()[r];
    T* o = out.data() + static_cast<std::size_t>(r) * hw;
    for (int i = 0; i < hw; ++i) o[i] = g * (p[i] - mean[r]) * invstd[r] + bb;
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const T* xv = input_value(self, 0).data();
    const auto& gv = input_value(self, 1);
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gg = input_grad(self, 1);
    Tensor<T>* gb = input_grad(self, 2);
    for (int r = 0; r < rows; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * hw;
      T sum_dy = 0, sum_dy_xhat = 0;
      for (int i = 0; i < hw; ++i) {
        const T dy = self.grad[o + i];
        sum_dy += dy;
        sum_dy_xhat += dy * (xv[o + i] - mean[r]) * invstd[r];
      }
      if (gg) (*gg)[r] += sum_dy_xhat;
      if (gb) (*gb)[r] += sum_dy;
      if (!gx) continue;
      const T gscale = gv[r] * invstd[r];
      for (int i = 0; i < hw; ++i) {
        const T xhat = (xv[o + i] - mean[r]) * invstd[r];
        (*gx)[o + i] += gscale * (self.grad[o + i] - sum_dy / T(hw) - xhat * sum_dy_xhat / T(hw));
      }
    }
  });
}

// ---------------------------------------------------------------- pooling & broadcasting

template <typename T>
Var<T> global_max_pool(const Var<T>& x) {
  require_rank("global_max_pool", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  std::vector<int> arg(static_cast<std::size_t>(n) * c);
  for (int r = 0; r < n * c; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * hw;
    int best = 0;
    for (int i = 1; i < hw; ++i) {
      if (p[i] > p[best]) best = i;
    }
    arg[r] = best;
    out[r] = p[best];
  }
  return make_result<T>(std::move(out), {x}, [arg, hw](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t r = 0; r < arg.size(); ++r) (*g)[r * hw + arg[r]] += self.grad[r];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank("global_avg_pool", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (int r = 0; r < n * c; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * hw;
    T acc = 0;
    for (int i = 0; i < hw; ++i) acc += p[i];
    out[r] = acc / T(hw);
  }
  return make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int r = 0; r < n * c; ++r) {
        const T v = self.grad[r] / T(hw);
        for (int i = 0; i < hw; ++i) (*g)[static_cast<std::size_t>(r) * hw + i] += v;
      }
    }
  });
}

template <typename T>
Var<T> mean_over_width(const Var<T>& x) {
  require_rank("mean_over_width", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, h});
  for (int r = 0; r < n * c * h; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * w;
    T acc = 0;
    for (int i = 0; i < w; ++i) acc += p[i];
    out[r] = acc / T(w);
  }
  return make_result<T>(std::move(out), {x}, [n, c, h, w](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int r = 0; r < n * c * h; ++r) {
        const T v = self.grad[r] / T(w);
        for (int i = 0; i < w; ++i) (*g)[static_cast<std::size_t>(r) * w + i] += v;
      }
    }
  });
}

template <typename T>
Var<T> mean_over_height(const Var<T>& x) {
  require_rank("mean_over_height", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({n, c, w});
  for (int r = 0; r < n * c; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * h * w;
    T* o = out.data() + static_cast<std::size_t>(r) * w;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) o[j] += p[i * w + j];
    }
    for (int j = 0; j < w; ++j) o[j] /= T(h);
  }
  return make_result<T>(std::move(out), {x}, [n, c, h, w](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int r = 0; r < n * c; ++r) {
        const T* go = self.grad.data() + static_cast<std::size_t>(r) * w;
        T* gi = g->data() + static_cast<std::size_t>(r) * h * w;
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) gi[i * w + j] += go[j] / T(h);
        }
      }
    }
  });
}

template <typename T>
Var<T> outer_add(const Var<T>& col, const Var<T>& row) {
  require_rank("outer_add col", col.shape(), 3);
  require_rank("outer_add row", row.shape(), 3);
  const int n = col.dim(0), c = col.dim(1), h = col.dim(2), w = row.dim(2);
  if (row.dim(0) != n || row.dim(1) != c) shape_error("outer_add", "batch/channel mismatch");
  Tensor<T> out({n, c, h, w});
  for (int r = 0; r < n * c; ++r) {
    const T* cv = col.value().data() + static_cast<std::size_t>(r) * h;
    const T* rv = row.value().data() + static_cast<std::size_t>(r) * w;
    T* o = out.data() + static_cast<std::size_t>(r) * h * w;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) o[i * w + j] = cv[i] + rv[j];
    }
  }
  return make_result<T>(std::move(out), {col, row}, [n, c, h, w](Node<T>& self) {
    Tensor<T>* gc = input_grad(self, 0);
    Tensor<T>* gr = input_grad(self, 1);
    for (int r = 0; r < n * c; ++r) {
      const T* go = self.grad.data() + static_cast<std::size_t>(r) * h * w;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const T v = go[i * w + j];
          if (gc) (*gc)[static_cast<std::size_t>(r) * h + i] += v;
          if (gr) (*gr)[static_cast<std::size_t>(r) * w + j] += v;
        }
      }
    }
  });
}

template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  require_rank("scale_channels", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.shape() != Shape{n, c}) shape_error("scale_channels", "scale must be [N,C]");
  Tensor<T> out(x.shape());
  for (int r = 0; r < n * c; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * hw;
    T* o = out.data() + static_cast<std::size_t>(r) * hw;
    for (int i = 0; i < hw; ++i) o[i] = p[i] * s.value()[r];
  }
  return make_result<T>(std::move(out), {x, s}, [n, c, hw](Node<T>& self) {
    const auto& xv = input_value(self, 0);
    const auto& sv = input_value(self, 1);
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gs = input_grad(self, 1);
    for (int r = 0; r < n * c; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * hw;
      T acc = 0;
      for (int i = 0; i < hw; ++i) {
        if (gx) (*gx)[o + i] += self.grad[o + i] * sv[r];
        acc += self.grad[o + i] * xv[o + i];
      }
      if (gs) (*gs)[r] += acc;
    }
  });
}

namespace {

struct LerpAxis {
  std::vector<int> lo, hi;
  std::vector<double> wlo, whi;
};

LerpAxis bilinear_axis(int in, int out) {
  LerpAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.wlo.resize(out);
  a.whi.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    const double l1 = src - i0;
    a.lo[o] = i0;
    a.hi[o] = i1;
    a.wlo[o] = 1.0 - l1;
    a.whi[o] = l1;
  }
  return a;
}

}  // namespace

template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& x) {
  require_rank("upsample_bilinear2x", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  const LerpAxis ay = bilinear_axis(h, ho);
  const LerpAxis ax = bilinear_axis(w, wo);
  Tensor<T> out({n, c, ho, wo});
  for (int r = 0; r < n * c; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * h * w;
    T* o = out.data() + static_cast<std::size_t>(r) * ho * wo;
    for (int i = 0; i < ho; ++i) {
      const T* r0 = p + ay.lo[i] * w;
      const T* r1 = p + ay.hi[i] * w;
      const T wy0 = T(ay.wlo[i]), wy1 = T(ay.whi[i]);
      for (int j = 0; j < wo; ++j) {
        const T wx0 = T(ax.wlo[j]), wx1 = T(ax.whi[j]);
        o[i * wo + j] = wy0 * (wx0 * r0[ax.lo[j]] + wx1 * r0[ax.hi[j]]) +
                        wy1 * (wx0 * r1[ax.lo[j]] + wx1 * r1[ax.hi[j]]);
      }
    }
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    Tensor<T>* g = input_grad(self, 0);
    if (!g) return;
    for (int r = 0; r < n * c; ++r) {
      T* gi = g->data() + static_cast<std::size_t>(r) * h * w;
      const T* go = self.grad.data() + static_cast<std::size_t>(r) * ho * wo;
      for (int i = 0; i < ho; ++i) {
        T* r0 = gi + ay.lo[i] * w;
        T* r1 = gi + ay.hi[i] * w;
        const T wy0 = T(ay.wlo[i]), wy1 = T(ay.whi[i]);
        for (int j = 0; j < wo; ++j) {
          const T v = go[i * wo + j];
          const T wx0 = T(ax.wlo[j]), wx1 = T(ax.whi[j]);
          r0[ax.lo[j]] += wy0 * wx0 * v;
          r0[ax.hi[j]] += wy0 * wx1 * v;
          r1[ax.lo[j]] += wy1 * wx0 * v;
          r1[ax.hi[j]] += wy1 * wx1 * v;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- layout ops

template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int end) {
  require_rank("slice_channels", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin < 0 || end > c || begin >= end) shape_error("slice_channels", "bad channel range");
  const int cs = end - begin;
  Tensor<T> out({n, cs, x.dim(2), x.dim(3)});
  for (int b = 0; b < n; ++b) {
    const T* src = x.value().data() + (static_cast<std::size_t>(b) * c + begin) * hw;
    std::copy(src, src + static_cast<std::size_t>(cs) * hw,
              out.data() + static_cast<std::size_t>(b) * cs * hw);
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int b = 0; b < n; ++b) {
        T* dst = g->data() + (static_cast<std::size_t>(b) * c + begin) * hw;
        const T* src = self.grad.data() + static_cast<std::size_t>(b) * cs * hw;
        for (std::size_t i = 0; i < static_cast<std::size_t>(cs) * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) shape_error("concat_channels", "no inputs");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  const int hw = h * w;
  std::vector<int> offsets;
  int total = 0;
  for (const auto& x : xs) {
    require_rank("concat_channels", x.shape(), 4);
    if (x.dim(0) != n || x.dim(2) != h || x.dim(3) != w) {
      shape_error("concat_channels", "inputs differ in batch or spatial size");
    }
    offsets.push_back(total);
    total += x.dim(1);
  }
  Tensor<T> out({n, total, h, w});
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const int ck = xs[k].dim(1);
    for (int b = 0; b < n; ++b) {
      const T* src = xs[k].value().data() + static_cast<std::size_t>(b) * ck * hw;
      std::copy(src, src + static_cast<std::size_t>(ck) * hw,
                out.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * hw);
    }
  }
  return make_result<T>(std::move(out), xs, [=](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto* g = input_grad(self, k);
      if (!g) continue;
      const int ck = self.inputs[k]->value.dim(1);
      for (int b = 0; b < n; ++b) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * hw;
        T* dst = g->data() + static_cast<std::size_t>(b) * ck * hw;
        for (std::size_t i = 0; i < static_cast<std::size_t>(ck) * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> pad_to(const Var<T>& x, int ho, int wo) {
  require_rank("pad_to", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (ho < h || wo < w) shape_error("pad_to", "target smaller than input");
  if (ho == h && wo == w) return x;
  Tensor<T> out({n, c, ho, wo});
  for (int r = 0; r < n * c; ++r) {
    for (int i = 0; i < h; ++i) {
      const T* src = x.value().data() + (static_cast<std::size_t>(r) * h + i) * w;
      std::copy(src, src + w, out.data() + (static_cast<std::size_t>(r) * ho + i) * wo);
    }
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int r = 0; r < n * c; ++r) {
        for (int i = 0; i < h; ++i) {
          const T* src = self.grad.data() + (static_cast<std::size_t>(r) * ho + i) * wo;
          T* dst = g->data() + (static_cast<std::size_t>(r) * h + i) * w;
          for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  require_rank("to_tokens", x.shape(), 4);
  const int n = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3);
  Tensor<T> out({n, l, c});
  for (int b = 0; b < n; ++b) {
    CMap<T> src(x.value().data() + static_cast<std::size_t>(b) * c * l, c, l);
    Map<T> dst(out.data() + static_cast<std::size_t>(b) * c * l, l, c);
    dst = src.transpose();
  }
  return make_result<T>(std::move(out), {x}, [n, c, l](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int b = 0; b < n; ++b) {
        CMap<T> src(self.grad.data() + static_cast<std::size_t>(b) * c * l, l, c);
        Map<T> dst(g->data() + static_cast<std::size_t>(b) * c * l, c, l);
        dst += src.transpose();
      }
    }
  });
}

template <typename T>
Var<T> extract_patches(const Var<T>& x, int patch) {
  require_rank("extract_patches", x.shape(), 4);
  if (patch < 1) shape_error("extract_patches", "patch must be positive");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int gh = (h + patch - 1) / patch, gw = (w + patch - 1) / patch;
  const int width = c * patch * patch;
  const int l = gh * gw;
  Tensor<T> out({n, l, width});
  // token (gi, gj), feature (ch, pi, pj) <- x[ch, gi*patch+pi, gj*patch+pj]
  auto visit = [=](auto&& fn) {
    for (int b = 0; b < n; ++b) {
      for (int gi = 0; gi < gh; ++gi) {
        for (int gj = 0; gj < gw; ++gj) {
          const std::size_t tok = (static_cast<std::size_t>(b) * l + gi * gw + gj) * width;
          for (int ch = 0; ch < c; ++ch) {
            for (int pi = 0; pi < patch; ++pi) {
              const int y = gi * patch + pi;
              if (y >= h) continue;
              for (int pj = 0; pj < patch; ++pj) {
                const int xx = gj * patch + pj;
                if (xx >= w) continue;
                fn(tok + (static_cast<std::size_t>(ch) * patch + pi) * patch + pj,
                   ((static_cast<std::size_t>(b) * c + ch) * h + y) * w + xx);
              }
            }
          }
        }
      }
    }
  };
  const T* xv = x.value().data();
  visit([&](std::size_t o, std::size_t i) { out[o] = xv[i]; });
  return make_result<T>(std::move(out), {x}, [visit](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      visit([&](std::size_t o, std::size_t i) { (*g)[i] += self.grad[o]; });
    }
  });
}

template <typename T>
Var<T> concat_tokens(const std::vector<Var<T>>& xs) {
  if (xs.empty()) shape_error("concat_tokens", "no inputs");
  const int n = xs[0].dim(0), c = xs[0].dim(2);
  std::vector<int> offsets;
  int total = 0;
  for (const auto& x : xs) {
    require_rank("concat_tokens", x.shape(), 3);
    if (x.dim(0) != n || x.dim(2) != c) shape_error("concat_tokens", "batch/width mismatch");
    offsets.push_back(total);
    total += x.dim(1);
  }
  Tensor<T> out({n, total, c});
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const int lk = xs[k].dim(1);
    for (int b = 0; b < n; ++b) {
      const T* src = xs[k].value().data() + static_cast<std::size_t>(b) * lk * c;
      std::copy(src, src + static_cast<std::size_t>(lk) * c,
                out.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * c);
    }
  }
  return make_result<T>(std::move(out), xs, [=](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto* g = input_grad(self, k);
      if (!g) continue;
      const int lk = self.inputs[k]->value.dim(1);
      for (int b = 0; b < n; ++b) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * c;
        T* dst = g->data() + static_cast<std::size_t>(b) * lk * c;
        for (std::size_t i = 0; i < static_cast<std::size_t>(lk) * c; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> broadcast_batch(const Var<T>& x, int n) {
  Shape shape{n};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  Tensor<T> out(shape);
  const std::size_t sz = x.size();
  for (int b = 0; b < n; ++b) {
    std::copy(x.value().data(), x.value().data() + sz, out.data() + b * sz);
  }
  return make_result<T>(std::move(out), {x}, [n, sz](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < sz; ++i) (*g)[i] += self.grad[b * sz + i];
      }
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, int begin, int end) {
  require_rank("slice_rows", x.shape(), 3);
  const int n = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (begin < 0 || end > l || begin >= end) shape_error("slice_rows", "bad row range");
  return take_block(x, begin, end - begin, c);
}

template <typename T>
Var<T> take_block(const Var<T>& x, int row0, int rows, int cols) {
  require_rank("take_block", x.shape(), 3);
  const int n = x.dim(0), r = x.dim(1), p = x.dim(2);
  if (row0 < 0 || rows < 1 || row0 + rows > r || cols < 1 || cols > p) {
    shape_error("take_block", "block rows [" + std::to_string(row0) + "," +
                                  std::to_string(row0 + rows) + ") x " + std::to_string(cols) +
                                  " outside " + shape_string(x.shape()));
  }
  Tensor<T> out({n, rows, cols});
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < rows; ++i) {
      const T* src = x.value().data() + (static_cast<std::size_t>(b) * r + row0 + i) * p;
      std::copy(src, src + cols, out.data() + (static_cast<std::size_t>(b) * rows + i) * cols);
    }
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int b = 0; b < n; ++b) {
        for (int i = 0; i < rows; ++i) {
          T* dst = g->data() + (static_cast<std::size_t>(b) * r + row0 + i) * p;
          const T* src = self.grad.data() + (static_cast<std::size_t>(b) * rows + i) * cols;
          for (int j = 0; j < cols; ++j) dst[j] += src[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int begin, int len) {
  require_rank("slice_cols", x.shape(), 2);
  const int n = x.dim(0), k = x.dim(1);
  if (begin < 0 || len < 1 || begin + len > k) shape_error("slice_cols", "bad column range");
  Tensor<T> out({n, len});
  for (int b = 0; b < n; ++b) {
    const T* src = x.value().data() + static_cast<std::size_t>(b) * k + begin;
    std::copy(src, src + len, out.data() + static_cast<std::size_t>(b) * len);
  }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (int b = 0; b < n; ++b) {
        for (int j = 0; j < len; ++j) {
          (*g)[static_cast<std::size_t>(b) * k + begin + j] +=
              self.grad[static_cast<std::size_t>(b) * len + j];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- dense layers

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias) {
  require_rank("linear weight", weight.shape(), 2);
  const int cin = x.dim(-1);
  const int cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    shape_error("linear", "weight " + shape_string(weight.shape()) + " for input " +
                              shape_string(x.shape()));
  }
  if (bias && bias->size() != static_cast<std::size_t>(cout)) shape_error("linear", "bias size");
  const int m = static_cast<int>(x.size() / cin);
  Shape oshape = x.shape();
  oshape.back() = cout;
  Tensor<T> out(oshape);
  CMap<T> xm(x.value().data(), m, cin);
  CMap<T> wm(weight.value().data(), cout, cin);
  Map<T> om(out.data(), m, cout);
  om.noalias() = xm * wm.transpose();
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->value().data(), cout);
    om.rowwise() += bv;
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<T>(std::move(out), std::move(inputs), [m, cin, cout](Node<T>& self) {
    CMap<T> gm(self.grad.data(), m, cout);
    if (auto* gx = input_grad(self, 0)) {
      CMap<T> wm(input_value(self, 1).data(), cout, cin);
      Map<T> gxm(gx->data(), m, cin);
      gxm.noalias() += gm * wm;
    }
    if (auto* gw = input_grad(self, 1)) {
      CMap<T> xm(input_value(self, 0).data(), m, cin);
      Map<T> gwm(gw->data(), cout, cin);
      gwm.noalias() += gm.transpose() * xm;
    }
    if (self.inputs.size() > 2) {
      if (auto* gb = input_grad(self, 2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gbv(gb->data(), cout);
        gbv += gm.colwise().sum();
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int c = x.dim(-1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    shape_error("layer_norm", "affine size mismatch");
  }
  const int m = static_cast<int>(x.size() / c);
  Tensor<T> out(x.shape());
  std::vector<T> mean(m), invstd(m);
  for (int r = 0; r < m; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * c;
    double s = 0, s2 = 0;
    for (int i = 0; i < c; ++i) s += p[i];
    const double mu = s / c;
    for (int i = 0; i < c; ++i) s2 += (p[i] - mu) * (p[i] - mu);
    mean[r] = static_cast<T>(mu);
    invstd[r] = static_cast<T>(1.0 / std::sqrt(s2 / c + eps));
    T* o = out.data() + static_cast<std::size_t>(r) * c;
    for (int i = 0; i < c; ++i) {
      o[i] = (p[i] - mean[r]) * invstd[r] * gamma.value()[i] + beta.value()[i];
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const T* xv = input_value(self, 0).data();
    const auto& gv = input_value(self, 1);
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gg = input_grad(self, 1);
    Tensor<T>* gb = input_grad(self, 2);
    std::vector<T> dxhat(c);
    for (int r = 0; r < m; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * c;
      T sum_d = 0, sum_dx = 0;
      for (int i = 0; i < c; ++i) {
        const T xhat = (xv[o + i] - mean[r]) * invstd[r];
        const T dy = self.grad[o + i];
        if (gg) (*gg)[i] += dy * xhat;
        if (gb) (*gb)[i] += dy;
        dxhat[i] = dy * gv[i];
        sum_d += dxhat[i];
        sum_dx += dxhat[i] * xhat;
      }
      if (!gx) continue;
      for (int i = 0; i < c; ++i) {
        const T xhat = (xv[o + i] - mean[r]) * invstd[r];
        (*gx)[o + i] += invstd[r] * (dxhat[i] - sum_d / T(c) - xhat * sum_dx / T(c));
      }
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
  require_rank("attention q", q.shape(), 3);
  require_rank("attention k", k.shape(), 3);
  require_rank("attention v", v.shape(), 3);
  const int n = q.dim(0), lq = q.dim(1), c = q.dim(2), lk = k.dim(1);
  if (k.shape() != v.shape() || k.dim(0) != n || k.dim(2) != c) {
    shape_error("attention", "q/k/v shapes inconsistent");
  }
  if (heads < 1 || c % heads != 0) shape_error("attention", "width not divisible by heads");
  const int d = c / heads;
  const T scale_factor = T(1) / std::sqrt(T(d));
  using Strided = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
  // Query rows are processed in blocks so the probability tile stays in cache.
  // Only the per-row log-sum-exp is kept; backward recomputes the tile.
  constexpr int kBlock = 64;

  auto lse = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * heads * lq);
  Tensor<T> out({n, lq, c});
  MatR<T> tile(std::min(kBlock, lq), lk);
  for (int b = 0; b < n; ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      const std::size_t qoff = static_cast<std::size_t>(b) * lq * c + hd * d;
      const std::size_t koff = static_cast<std::size_t>(b) * lk * c + hd * d;
      Strided km(k.value().data() + koff, lk, d, Eigen::OuterStride<>(c));
      Strided vm(v.value().data() + koff, lk, d, Eigen::OuterStride<>(c));
      T* lrow = lse->data() + (static_cast<std::size_t>(b) * heads + hd) * lq;
      for (int r0 = 0; r0 < lq; r0 += kBlock) {
        const int rows = std::min(kBlock, lq - r0);
        Strided qm(q.value().data() + qoff + static_cast<std::size_t>(r0) * c, rows, d,
                   Eigen::OuterStride<>(c));
        auto pm = tile.topRows(rows);
        pm.noalias() = (scale_factor * qm) * km.transpose();
        for (int i = 0; i < rows; ++i) {
          auto row = pm.row(i);
          const T mx = row.maxCoeff();
          row = (row.array() - mx).exp();
          const T total = row.sum();
          row /= total;
          lrow[r0 + i] = mx + std::log(total);
        }
        StridedMut om(out.data() + qoff + static_cast<std::size_t>(r0) * c, rows, d,
                      Eigen::OuterStride<>(c));
        om.noalias() = pm * vm;
      }
    }
  }
  return make_result<T>(std::move(out), {q, k, v}, [=](Node<T>& self) {
    Tensor<T>* gq = input_grad(self, 0);
    Tensor<T>* gk = input_grad(self, 1);
    Tensor<T>* gv = input_grad(self, 2);
    const auto& qv = input_value(self, 0);
    const auto& kv = input_value(self, 1);
    const auto& vv = input_value(self, 2);
    const T* ov = self.value.data();
    MatR<T> tile(std::min(kBlock, lq), lk), dtile(std::min(kBlock, lq), lk);
    for (int b = 0; b < n; ++b) {
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t qoff = static_cast<std::size_t>(b) * lq * c + hd * d;
        const std::size_t koff = static_cast<std::size_t>(b) * lk * c + hd * d;
        Strided km(kv.data() + koff, lk, d, Eigen::OuterStride<>(c));
        Strided vm(vv.data() + koff, lk, d, Eigen::OuterStride<>(c));
        const T* lrow = lse->data() + (static_cast<std::size_t>(b) * heads + hd) * lq;
        for (int r0 = 0; r0 < lq; r0 += kBlock) {
          const int rows = std::min(kBlock, lq - r0);
          const std::size_t roff = qoff + static_cast<std::size_t>(r0) * c;
          Strided qm(qv.data() + roff, rows, d, Eigen::OuterStride<>(c));
          Strided go(self.grad.data() + roff, rows, d, Eigen::OuterStride<>(c));
          Strided om(ov + roff, rows, d, Eigen::OuterStride<>(c));
          auto pm = tile.topRows(rows);
          pm.noalias() = (scale_factor * qm) * km.transpose();
          for (int i = 0; i < rows; ++i) pm.row(i) = (pm.row(i).array() - lrow[r0 + i]).exp();
          if (gv) {
            StridedMut gvm(gv->data() + koff, lk, d, Eigen::OuterStride<>(c));
            gvm.noalias() += pm.transpose() * go;
          }
          if (!gq && !gk) continue;
          auto dp = dtile.topRows(rows);
          dp.noalias() = go * vm.transpose();
          // softmax backward: dS = P ⊙ (dP - rowdot(dO, O))
          for (int i = 0; i < rows; ++i) {
            const T dot = go.row(i).dot(om.row(i));
            dp.row(i) = (pm.row(i).array() * (dp.row(i).array() - dot)).matrix();
          }
          if (gq) {
            StridedMut gqm(gq->data() + roff, rows, d, Eigen::OuterStride<>(c));
            gqm.noalias() += (scale_factor * dp) * km;
          }
          if (gk) {
            StridedMut gkm(gk->data() + koff, lk, d, Eigen::OuterStride<>(c));
            gkm.noalias() += (scale_factor * dp.transpose()) * qm;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------- loss

template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const Tensor<T>& target, T lambda, T dice_eps) {
  require_rank("segmentation_loss", logits.shape(), 4);
  if (logits.shape() != target.shape()) {
    shape_error("segmentation_loss", "logits " + shape_string(logits.shape()) + " vs target " +
                                         shape_string(target.shape()));
  }
  const int n = logits.dim(0);
  const std::size_t per = logits.size() / n;
  const std::size_t total = logits.size();
  const T* z = logits.value().data();
  std::vector<T> prob(total);
  double bce = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const T zi = z[i], ti = target[i];
    bce += std::max(zi, T(0)) - zi * ti + std::log1p(std::exp(-std::abs(zi)));
    prob[i] = sigmoid_scalar(zi);
  }
  bce /= static_cast<double>(total);
  std::vector<T> inter(n), denom(n);
  double dice = 0;
  for (int b = 0; b < n; ++b) {
    double in = 0, sp = 0, st = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      in += prob[i] * target[i];
      sp += prob[i];
      st += target[i];
    }
    inter[b] = static_cast<T>(in);
    denom[b] = static_cast<T>(sp + st + dice_eps);
    dice += 1.0 - (2.0 * in + dice_eps) / (sp + st + dice_eps);
  }
  dice /= n;
  const T value = static_cast<T>(bce + lambda * dice);
  return make_result<T>(Tensor<T>({1}, value), {logits},
                        [=, prob = std::move(prob)](Node<T>& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    const T up = self.grad[0];
    for (int b = 0; b < n; ++b) {
      const T num = T(2) * inter[b] + dice_eps;
      const T den2 = denom[b] * denom[b];
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        const T p = prob[i];
        const T dbce = (p - target[i]) / T(total);
        const T ddice_dp = -(T(2) * target[i] * denom[b] - num) / den2 / T(n);
        (*g)[i] += up * (dbce + lambda * ddice_dp * p * (T(1) - p));
      }
    }
  });
}

#define METADEC_INSTANTIATE(T)                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                            \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                            \
  template Var<T> scale(const Var<T>&, T);                                                      \
  template Var<T> relu(const Var<T>&);                                                          \
  template Var<T> sigmoid(const Var<T>&);                                                       \
  template Var<T> gelu(const Var<T>&);                                                          \
  template Var<T> reshape(const Var<T>&, Shape);                                                \
  template Var<T> sum(const Var<T>&);                                                           \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, int, int); \
  template Var<T> conv1d_depthwise(const Var<T>&, const Var<T>&);                               \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&,           \
                             Tensor<T>&, bool, T, T);                                           \
  template Var<T> instance_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                \
  template Var<T> global_max_pool(const Var<T>&);                                               \
  template Var<T> global_avg_pool(const Var<T>&);                                               \
  template Var<T> mean_over_width(const Var<T>&);                                               \
  template Var<T> mean_over_height(const Var<T>&);                                              \
  template Var<T> outer_add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale_channels(const Var<T>&, const Var<T>&);                                 \
  template Var<T> upsample_bilinear2x(const Var<T>&);                                           \
  template Var<T> slice_channels(const Var<T>&, int, int);                                      \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                  \
  template Var<T> pad_to(const Var<T>&, int, int);                                              \
  template Var<T> to_tokens(const Var<T>&);                                                     \
  template Var<T> concat_tokens(const std::vector<Var<T>>&);                                    \
  template Var<T> extract_patches(const Var<T>&, int);                                          \
  template Var<T> broadcast_batch(const Var<T>&, int);                                          \
  template Var<T> slice_rows(const Var<T>&, int, int);                                          \
  template Var<T> take_block(const Var<T>&, int, int, int);                                     \
  template Var<T> slice_cols(const Var<T>&, int, int);                                          \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);           \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                   \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int);                  \
  template Var<T> segmentation_loss(const Var<T>&, const Tensor<T>&, T, T);

METADEC_INSTANTIATE(float)
METADEC_INSTANTIATE(double)

#undef METADEC_INSTANTIATE

}  // namespace metadec::ops
