#include "metadec/layout.hpp"

#include <sstream>
#include <stdexcept>

#include "metadec/ops.hpp"

namespace metadec {

std::string to_string(UnitKind k) {
  switch (k) {
    case UnitKind::conv3_full: return "conv3_full";
    case UnitKind::conv5_depthwise: return "conv5_depthwise";
    case UnitKind::conv3_depthwise: return "conv3_depthwise";
    case UnitKind::conv1_pointwise: return "conv1_pointwise";
    case UnitKind::attention_conv1d: return "attention_conv1d";
  }
  return "?";
}

int GeneratedUnit::kernel_size() const {
  switch (kind) {
    case UnitKind::conv3_full:
    case UnitKind::conv3_depthwise:
    case UnitKind::attention_conv1d: return 3;
    case UnitKind::conv5_depthwise: return 5;
    case UnitKind::conv1_pointwise: return 1;
  }
  return 0;
}

int GeneratedUnit::kernel_elems() const {
  const int k = kernel_size();
  return kind == UnitKind::attention_conv1d ? in_channels * k : in_channels * k * k;
}

DecoderSchema make_schema(DecoderVariant variant, int width, int stages) {
  if (width < 1 || stages < 1) throw std::invalid_argument("make_schema: bad width or stages");
  if (variant != DecoderVariant::basic && width % 2 != 0) {
    throw std::invalid_argument("make_schema: multiscale variants need an even width");
  }
  DecoderSchema s;
  s.width = width;
  const int half = width / 2;
  for (int st = 0; st < stages; ++st) {
    s.units.push_back({st, "main", UnitKind::conv3_full, width, width, true});
    if (variant == DecoderVariant::basic) continue;
    s.units.push_back({st, "dw3", UnitKind::conv3_depthwise, width, 1, false});
    s.units.push_back({st, "dw5", UnitKind::conv5_depthwise, width, 1, false});
    s.units.push_back({st, "compress", UnitKind::conv1_pointwise, half, width, true});
    s.units.push_back({st, "restore", UnitKind::conv1_pointwise, width, half, true});
    if (variant == DecoderVariant::multiscale) continue;
    s.units.push_back({st, "attn_h", UnitKind::attention_conv1d, width, 1, false});
    s.units.push_back({st, "attn_w", UnitKind::attention_conv1d, width, 1, false});
  }
  return s;
}

DecoderLayout compute_layout(const DecoderSchema& schema) {
  if (schema.width < 1) throw std::invalid_argument("compute_layout: schema width must be >= 1");
  DecoderLayout l;
  l.row_width = schema.width * 9;
  for (std::size_t u = 0; u < schema.units.size(); ++u) {
    const auto& unit = schema.units[u];
    const bool depthwise = unit.kind == UnitKind::conv3_depthwise ||
                           unit.kind == UnitKind::conv5_depthwise ||
                           unit.kind == UnitKind::attention_conv1d;
    if (unit.out_channels < 1 || unit.in_channels < 1 || unit.in_channels > schema.width) {
      throw std::invalid_argument("compute_layout: unit " + std::to_string(u) +
                                  " has invalid channel counts");
    }
    if (depthwise && (unit.in_channels != 1 || unit.out_channels != schema.width)) {
      throw std::invalid_argument("compute_layout: depthwise unit " + std::to_string(u) +
                                  " must map C_dec channels one kernel each");
    }
    if (unit.kernel_elems() > l.row_width) {
      throw std::invalid_argument("compute_layout: unit " + std::to_string(u) + " needs " +
                                  std::to_string(unit.kernel_elems()) +
                                  " parameters per kernel but rows hold " +
                                  std::to_string(l.row_width) + " (cannot pack)");
    }
    l.unit_row_begin.push_back(l.num_rows);
    for (int k = 0; k < unit.out_channels; ++k) {
      l.row_map.push_back({static_cast<int>(u), k});
    }
    l.num_rows += unit.out_channels;
    if (unit.has_bn) {
      l.unit_bn_begin.push_back(l.bn_param_count);
      l.bn_param_count += 2 * unit.out_channels;
    } else {
      l.unit_bn_begin.push_back(-1);
    }
  }
  return l;
}

DecoderLayout compute_layout(const DecoderSchema& schema, const ModelConfig& cfg) {
  if (schema.width != cfg.decoder_width) {
    throw std::invalid_argument("compute_layout: schema width " + std::to_string(schema.width) +
                                " differs from decoder_width " +
                                std::to_string(cfg.decoder_width));
  }
  return compute_layout(schema);
}

std::string layout_csv(const DecoderSchema& schema, const DecoderLayout& layout) {
  std::ostringstream os;
  os << "unit,stage,branch,kind,row_begin,rows,used_width,row_width,slack,bn_params\n";
  for (std::size_t u = 0; u < schema.units.size(); ++u) {
    const auto& unit = schema.units[u];
    os << u << ',' << unit.stage << ',' << unit.branch << ',' << to_string(unit.kind) << ','
       << layout.unit_row_begin[u] << ',' << unit.out_channels << ',' << unit.kernel_elems()
       << ',' << layout.row_width << ',' << layout.row_width - unit.kernel_elems() << ','
       << (unit.has_bn ? 2 * unit.out_channels : 0) << '\n';
  }
  os << "total,,,," << 0 << ',' << layout.num_rows << ",," << layout.row_width << ",,"
     << layout.bn_param_count << '\n';
  return os.str();
}

template <typename T>
MaterializedDecoder<T> materialize_decoder(const DecoderLayout& layout, const DecoderSchema& schema,
                                           const Var<T>& params, const Var<T>& norm,
                                           std::uint64_t provenance) {
  if (params.value().rank() != 3 || params.dim(1) != layout.num_rows ||
      params.dim(2) != layout.row_width) {
    throw std::invalid_argument("materialize_decoder: parameter matrix " +
                                shape_string(params.shape()) + " does not match layout [N," +
                                std::to_string(layout.num_rows) + "," +
                                std::to_string(layout.row_width) + "]");
  }
  const int n = params.dim(0);
  if (norm.value().rank() != 2 || norm.dim(0) != n || norm.dim(1) != layout.bn_param_count) {
    throw std::invalid_argument("materialize_decoder: norm vector " + shape_string(norm.shape()) +
                                " does not match bn_param_count " +
                                std::to_string(layout.bn_param_count));
  }
  if (schema.units.size() != layout.unit_row_begin.size()) {
    throw std::invalid_argument("materialize_decoder: schema and layout disagree");
  }
  MaterializedDecoder<T> dec;
  dec.provenance = provenance;
  dec.batch = n;
  for (std::size_t u = 0; u < schema.units.size(); ++u) {
    const auto& unit = schema.units[u];
    typename MaterializedDecoder<T>::UnitParams p;
    auto block = ops::take_block(params, layout.unit_row_begin[u], unit.out_channels,
                                 unit.kernel_elems());
    const int k = unit.kernel_size();
    if (unit.kind == UnitKind::attention_conv1d) {
      p.weight = ops::reshape(block, {n, unit.out_channels, k});
    } else {
      p.weight = ops::reshape(block, {n, unit.out_channels, unit.in_channels, k, k});
    }
    if (unit.has_bn) {
      const int b = layout.unit_bn_begin[u];
      p.gamma = ops::slice_cols(norm, b, unit.out_channels);
      p.beta = ops::slice_cols(norm, b + unit.out_channels, unit.out_channels);
    }
    dec.units.push_back(std::move(p));
  }
  return dec;
}

template <typename T>
Tensor<T> flatten_decoder(const MaterializedDecoder<T>& dec, const DecoderLayout& layout,
                          const DecoderSchema& schema) {
  Tensor<T> out({dec.batch, layout.num_rows, layout.row_width});
  for (std::size_t u = 0; u < schema.units.size(); ++u) {
    const auto& unit = schema.units[u];
    const int elems = unit.kernel_elems();
    const auto& w = dec.units[u].weight.value();
    for (int b = 0; b < dec.batch; ++b) {
      for (int r = 0; r < unit.out_channels; ++r) {
        const T* src = w.data() + (static_cast<std::size_t>(b) * unit.out_channels + r) * elems;
        T* dst = out.data() + (static_cast<std::size_t>(b) * layout.num_rows +
                               layout.unit_row_begin[u] + r) *
                                  layout.row_width;
        std::copy(src, src + elems, dst);
      }
    }
  }
  return out;
}

template MaterializedDecoder<float> materialize_decoder(const DecoderLayout&, const DecoderSchema&,
                                                        const Var<float>&, const Var<float>&,
                                                        std::uint64_t);
template MaterializedDecoder<double> materialize_decoder(const DecoderLayout&,
                                                         const DecoderSchema&, const Var<double>&,
                                                         const Var<double>&, std::uint64_t);
template Tensor<float> flatten_decoder(const MaterializedDecoder<float>&, const DecoderLayout&,
                                       const DecoderSchema&);
template Tensor<double> flatten_decoder(const MaterializedDecoder<double>&, const DecoderLayout&,
                                        const DecoderSchema&);

}  // namespace metadec
