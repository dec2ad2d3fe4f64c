#pragma once

#include <optional>
#include <vector>

#include "metadec/autograd.hpp"

// Differentiable tensor operations. Image tensors are NCHW, token tensors are
// [N, L, C]. Every op is instantiated for float (training) and double
// (gradient checks).
namespace metadec::ops {

// Elementwise.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

// Reductions used by tests and probes.
template <typename T> Var<T> sum(const Var<T>& x);
/// Σ x·w for a constant weight tensor of equal size.
template <typename T> Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w);

/// Convolution with "same"-style zero padding of kernel/2 on every side.
/// The weight is either shared [Co, Ci/groups, k, k] or per-sample
/// [N, Co, Ci/groups, k, k]. groups must be 1 or Ci (depthwise).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias,
              int stride = 1, int groups = 1);

/// Per-sample depthwise 1D convolution along the last axis, x [N,C,L], w [N,C,k].
template <typename T> Var<T> conv1d_depthwise(const Var<T>& x, const Var<T>& weight);

/// Batch normalization over (N,H,W) with shared affine parameters [C].
/// In training mode batch statistics are used and the running estimates in
/// `running_mean` / `running_var` are updated; otherwise the running estimates
/// are used.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                  T momentum = T(0.1), T eps = T(1e-5));

/// Per-image normalization over (H,W) with per-sample affine parameters [N,C].
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     T eps = T(1e-5));

template <typename T> Var<T> global_max_pool(const Var<T>& x);  // [N,C,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);  // [N,C,H,W] -> [N,C]
template <typename T> Var<T> mean_over_width(const Var<T>& x);  // -> [N,C,H]
template <typename T> Var<T> mean_over_height(const Var<T>& x); // -> [N,C,W]
/// out[n,c,h,w] = col[n,c,h] + row[n,c,w]
template <typename T> Var<T> outer_add(const Var<T>& col, const Var<T>& row);
/// out[n,c,h,w] = x[n,c,h,w] * s[n,c]
template <typename T> Var<T> scale_channels(const Var<T>& x, const Var<T>& s);

/// Bilinear ×2 upsampling with half-pixel centers (align_corners = false).
template <typename T> Var<T> upsample_bilinear2x(const Var<T>& x);

template <typename T> Var<T> slice_channels(const Var<T>& x, int begin, int end);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& xs);
/// Zero-pads bottom/right so the spatial size becomes (h, w).
template <typename T> Var<T> pad_to(const Var<T>& x, int h, int w);

/// [N,C,H,W] -> [N,H*W,C], row-major over the grid.
template <typename T> Var<T> to_tokens(const Var<T>& x);
/// Non-overlapping p×p patches as tokens: [N,C,H,W] -> [N, gh*gw, C*p*p] with
/// gh = ceil(H/p), gw = ceil(W/p); the bottom/right remainder is zero-padded.
template <typename T> Var<T> extract_patches(const Var<T>& x, int patch);
template <typename T> Var<T> concat_tokens(const std::vector<Var<T>>& xs);
/// [L,C] -> [N,L,C]
template <typename T> Var<T> broadcast_batch(const Var<T>& x, int n);
/// [N,L,C] -> [N,end-begin,C]
template <typename T> Var<T> slice_rows(const Var<T>& x, int begin, int end);
/// [N,R,P] -> [N,rows,cols]: rows [row0,row0+rows) and the first `cols` columns.
template <typename T> Var<T> take_block(const Var<T>& x, int row0, int rows, int cols);
/// [N,K] -> [N,len]: columns [begin, begin+len).
template <typename T> Var<T> slice_cols(const Var<T>& x, int begin, int len);

/// x [..., Cin] · W^T + b, W [Cout, Cin].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Multi-head scaled dot-product attention on already-projected q [N,Lq,C],
/// k/v [N,Lk,C]; C is split into `heads` contiguous slices.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads);

/// Segmentation objective from logits [N,1,H,W] and a binary target of the
/// same shape: mean pixel BCE plus lambda times the per-image smoothed Dice
/// loss averaged over the batch.
template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const Tensor<T>& target, T lambda,
                         T dice_eps = T(1));

}  // namespace metadec::ops
