#include "adfq/quantizers.hpp"

#include <cmath>

namespace adfq {

const char* granularity_name(Granularity g) noexcept {
  switch (g) {
    case Granularity::PerTensor: return "per_tensor";
    case Granularity::PerChannel: return "per_channel";
    case Granularity::PerPatch: return "per_patch";
  }
  return "unknown";
}

Granularity parse_granularity(const std::string& name) {
  if (name == "per_tensor") return Granularity::PerTensor;
  if (name == "per_channel") return Granularity::PerChannel;
  if (name == "per_patch") return Granularity::PerPatch;
  throw FormatError("unknown granularity '" + name + "'");
}

const char* outlier_rule_name(OutlierRule r) noexcept {
  return r == OutlierRule::Magnitude ? "magnitude" : "one_sided";
}

OutlierRule parse_outlier_rule(const std::string& name) {
  if (name == "magnitude") return OutlierRule::Magnitude;
  if (name == "one_sided") return OutlierRule::OneSided;
  throw ConfigError("unknown outlier rule '" + name + "'");
}

void UniformParams::check_shape(Index rows, Index cols) const {
  Index expected = 1;
  if (granularity == Granularity::PerChannel) expected = cols;
  if (granularity == Granularity::PerPatch) expected = rows;
  if (groups() != expected || zero_point.size() != expected) {
    throw DimensionError(std::string(granularity_name(granularity)) + " params with " + std::to_string(groups()) +
                         " groups applied to " + detail::dims(rows, cols) + " tensor");
  }
}

void UniformParams::validate() const {
  if (scale.size() != zero_point.size() || scale.size() == 0) throw PreconditionError("uniform params: bad group count");
  for (Index i = 0; i < scale.size(); ++i) {
    if (!(scale[i] > 0) || !std::isfinite(scale[i])) throw PreconditionError("uniform params: scale must be positive");
    if (!std::isfinite(zero_point[i]) || zero_point[i] != std::round(zero_point[i])) {
      throw PreconditionError("uniform params: zero point must be an integer");
    }
  }
}

UniformParams uq_from_minmax(const Vector& mins, const Vector& maxs, BitWidth k, Granularity g) {
  if (mins.size() != maxs.size() || mins.size() == 0) throw PreconditionError("uq_from_minmax: group count mismatch");
  UniformParams p{g, k, Vector(mins.size()), Vector(mins.size())};
  const double levels = k.max_code();
  for (Index i = 0; i < mins.size(); ++i) {
    if (mins[i] > maxs[i]) throw PreconditionError("uq_from_minmax: min > max");
    if (maxs[i] == mins[i]) {
      p.scale[i] = 1.0;
      p.zero_point[i] = round_half_even(-mins[i]);
    } else {
      p.scale[i] = std::max((maxs[i] - mins[i]) / levels, kMinScale);
      p.zero_point[i] = round_half_even(-mins[i] / p.scale[i]);
    }
  }
  return p;
}

UniformParams uq_calibrate(const Matrix& x, BitWidth k, Granularity g) {
  const Grouping grouping =
      g == Granularity::PerTensor ? Grouping::Tensor : (g == Granularity::PerPatch ? Grouping::Row : Grouping::Column);
  const auto mm = reduce_minmax(x, grouping);
  return uq_from_minmax(mm.mins, mm.maxs, k, g);
}

UniformQuantized uq_quantize(const Matrix& x, const UniformParams& p) {
  p.check_shape(x.rows(), x.cols());
  UniformQuantized q{IntMatrix(x.rows(), x.cols()), p};
  const int max_code = p.bits.max_code();
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const Index g = p.group_of(r, c);
      const double code = clamp_code(round_half_even(x(r, c) / p.scale[g]) + p.zero_point[g], max_code);
      q.codes(r, c) = static_cast<std::int32_t>(code);
    }
  }
  return q;
}

Matrix uq_dequantize(const UniformQuantized& q) {
  const auto& p = q.params;
  p.check_shape(q.codes.rows(), q.codes.cols());
  Matrix out(q.codes.rows(), q.codes.cols());
  for (Index r = 0; r < out.rows(); ++r) {
    for (Index c = 0; c < out.cols(); ++c) {
      const Index g = p.group_of(r, c);
      out(r, c) = p.scale[g] * (static_cast<double>(q.codes(r, c)) - p.zero_point[g]);
    }
  }
  return out;
}

Matrix uq_fake_quant(const Matrix& x, const UniformParams& p) { return uq_dequantize(uq_quantize(x, p)); }

void Log2Params::validate() const {
  if (!(scale > 0) || !std::isfinite(scale)) throw PreconditionError("log2 params: scale must be positive");
  if (!(epsilon > 0)) throw PreconditionError("log2 params: epsilon must be positive");
  if (!std::isfinite(shift)) throw PreconditionError("log2 params: shift must be finite");
}

namespace {

IntMatrix log2_codes(const Matrix& x, const Log2Params& p) {
  IntMatrix codes(x.rows(), x.cols());
  const int max_code = p.bits.max_code();
  for (Index i = 0; i < x.size(); ++i) {
    const double v = p.shifted ? x.data()[i] - p.shift + p.epsilon : x.data()[i];
    codes.data()[i] = static_cast<std::int32_t>(clamp_code(log2_code_unclamped(v, p.scale), max_code));
  }
  return codes;
}

}  // namespace

Log2Params log2_from_max(double max_value, BitWidth k) {
  Log2Params p{std::max(max_value, kMinScale), k, 0.0, kDefaultShiftEpsilon, false};
  return p;
}

Log2Params shift_log2_from_minmax(double min_value, double max_value, BitWidth k, double epsilon) {
  if (!(epsilon > 0)) throw PreconditionError("shift-log2: epsilon must be positive");
  if (min_value > max_value) throw PreconditionError("shift-log2: min > max");
  return Log2Params{max_value - min_value + epsilon, k, min_value, epsilon, true};
}

Log2Quantized lq_quantize(const Matrix& x, BitWidth k) {
  if (x.size() == 0) throw PreconditionError("lq_quantize: empty input");
  if (!(x.minCoeff() > 0)) throw DomainError("lq_quantize: all elements must be strictly positive");
  Log2Params p = log2_from_max(x.maxCoeff(), k);
  return {log2_codes(x, p), p};
}

Log2Quantized lq_quantize_static(const Matrix& x, const Log2Params& p) {
  p.validate();
  return {log2_codes(x, p), p};
}

Matrix lq_dequantize(const IntMatrix& codes, const Log2Params& p) {
  Matrix out(codes.rows(), codes.cols());
  for (Index i = 0; i < codes.size(); ++i) {
    const double v = p.scale * std::exp2(-static_cast<double>(codes.data()[i]));
    out.data()[i] = p.shifted ? v + p.shift - p.epsilon : v;
  }
  return out;
}

Matrix lq_fake_quant(const Matrix& x, const Log2Params& p) { return lq_dequantize(lq_quantize_static(x, p)); }

Log2Quantized shift_log2_quantize(const Matrix& x, BitWidth k, double epsilon) {
  if (x.size() == 0) throw PreconditionError("shift_log2_quantize: empty input");
  const Log2Params p = shift_log2_from_minmax(x.minCoeff(), x.maxCoeff(), k, epsilon);
  return {log2_codes(x, p), p};
}

OutlierSplit outlier_split(const Matrix& x, const OutlierConfig& cfg) {
  cfg.validate();
  OutlierSplit split{x, SparseOutlierMatrix(x.rows(), x.cols())};
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const double v = x(r, c);
      if (cfg.is_outlier(v)) {
        split.sparse.push_back_ordered(r, c, v);
        split.dense(r, c) = 0.0;
      }
    }
  }
  return split;
}

Index outlier_count(const Matrix& x, const OutlierConfig& cfg) {
  Index n = 0;
  for (Index i = 0; i < x.size(); ++i) n += cfg.is_outlier(x.data()[i]) ? 1 : 0;
  return n;
}

double outlier_ratio(const Matrix& x, const OutlierConfig& cfg) {
  if (x.size() == 0) return 0.0;
  return static_cast<double>(outlier_count(x, cfg)) / static_cast<double>(x.size());
}

Matrix poq_linear_forward(const Matrix& x, const Matrix& w_dequantized, const RowVector& bias,
                          const UniformParams& act_params, const OutlierConfig& cfg) {
  if (act_params.granularity != Granularity::PerPatch) {
    throw PreconditionError("poq_linear_forward: activation params must be per-patch");
  }
  if (bias.size() != w_dequantized.cols()) throw DimensionError("poq_linear_forward: bias size mismatch");
  const OutlierSplit split = outlier_split(x, cfg);
  Matrix y = gemm(uq_fake_quant(split.dense, act_params), w_dequantized);
  spmm_accumulate(split.sparse, w_dequantized, y);
  y.rowwise() += bias;
  return y;
}

Matrix poq_linear_forward(const Matrix& x, const UniformQuantized& w_quantized, const RowVector& bias,
                          const UniformParams& act_params, const OutlierConfig& cfg) {
  return poq_linear_forward(x, uq_dequantize(w_quantized), bias, act_params, cfg);
}

}  // namespace adfq
