#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadec/autograd.hpp"
#include "metadec/config.hpp"

namespace metadec {

enum class UnitKind { conv3_full, conv5_depthwise, conv3_depthwise, conv1_pointwise, attention_conv1d };

std::string to_string(UnitKind k);

/// One generated layer of the meta-decoder.
struct GeneratedUnit {
  int stage = 0;
  std::string branch;
  UnitKind kind = UnitKind::conv3_full;
  int out_channels = 0;
  int in_channels = 0;  // input channels seen by each kernel (1 for depthwise)
  bool has_bn = false;

  int kernel_size() const;
  int kernel_elems() const;  // in_channels * k^2 (k for the 1D attention convs)
};

struct DecoderSchema {
  int width = 0;  // C_dec
  std::vector<GeneratedUnit> units;
};

/// Per-stage unit list of the three meta-decoder designs:
///   basic:             main conv3 (+BN)
///   multiscale:        basic, dw3 ‖ dw5, compress pw (C→C/2, +BN), restore pw (C/2→C, +BN)
///   spatial_attention: multiscale, plus 1D position convs along H and W
DecoderSchema make_schema(DecoderVariant variant, int width, int stages);

struct RowSlot {
  int unit = 0;
  int kernel = 0;
  friend bool operator==(const RowSlot&, const RowSlot&) = default;
};

/// Row/column bookkeeping of the N_q × P parameter matrix.
struct DecoderLayout {
  int num_rows = 0;   // N_q
  int row_width = 0;  // P = C_dec · 9
  std::vector<RowSlot> row_map;
  std::vector<int> unit_row_begin;
  std::vector<int> unit_bn_begin;  // -1 for units without BN
  int bn_param_count = 0;

  friend bool operator==(const DecoderLayout&, const DecoderLayout&) = default;
};

DecoderLayout compute_layout(const DecoderSchema& schema);
DecoderLayout compute_layout(const DecoderSchema& schema, const ModelConfig& cfg);

/// Layout table as CSV (one row per unit plus a total row).
std::string layout_csv(const DecoderSchema& schema, const DecoderLayout& layout);

/// Generated parameters bound to a schema for one batch of inputs.
template <typename T>
struct MaterializedDecoder {
  struct UnitParams {
    Var<T> weight;  // [N, out, in, k, k], or [N, C, k] for attention_conv1d
    Var<T> gamma;   // [N, out] when the unit carries BN
    Var<T> beta;
  };
  std::vector<UnitParams> units;
  std::uint64_t provenance = 0;
  int batch = 0;
};

/// Binds rows of `params` [N, N_q, P] to the schema's kernels by prefix slicing and
/// BN affine parameters to consecutive (γ..., β...) runs of `norm` [N, bn_param_count].
template <typename T>
MaterializedDecoder<T> materialize_decoder(const DecoderLayout& layout, const DecoderSchema& schema,
                                           const Var<T>& params, const Var<T>& norm,
                                           std::uint64_t provenance);

/// Inverse of materialize_decoder for the kernels: writes every kernel back to its
/// row prefix of an [N, N_q, P] matrix, leaving slack columns zero.
template <typename T>
Tensor<T> flatten_decoder(const MaterializedDecoder<T>& dec, const DecoderLayout& layout,
                          const DecoderSchema& schema);

}  // namespace metadec
