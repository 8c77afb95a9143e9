#pragma once

#include <cmath>
#include <limits>

#include "adfq/kernels.hpp"
#include "adfq/tensor.hpp"

namespace adfq {

/// Quantization bit width k, 2 <= k <= 8.
class BitWidth {
 public:
  explicit BitWidth(int k) : k_(k) {
    if (k < 2 || k > 8) throw PreconditionError("bit width must be in [2, 8], got " + std::to_string(k));
  }
  int bits() const noexcept { return k_; }
  /// Largest code, 2^k - 1.
  int max_code() const noexcept { return (1 << k_) - 1; }
  friend bool operator==(BitWidth, BitWidth) = default;

 private:
  int k_;
};

/// Round to nearest, ties to even.
inline double round_half_even(double v) { return std::nearbyint(v); }

inline double clamp_code(double q, int max_code) { return std::clamp(q, 0.0, static_cast<double>(max_code)); }

enum class Granularity { PerTensor, PerChannel, PerPatch };

const char* granularity_name(Granularity g) noexcept;
Granularity parse_granularity(const std::string& name);

/// Affine uniform quantizer state. Per-channel groups are matrix columns,
/// per-patch groups are rows (one per token).
struct UniformParams {
  Granularity granularity = Granularity::PerTensor;
  BitWidth bits{8};
  Vector scale;
  Vector zero_point;

  Index groups() const noexcept { return scale.size(); }
  Index group_of(Index row, Index col) const noexcept {
    switch (granularity) {
      case Granularity::PerChannel: return col;
      case Granularity::PerPatch: return row;
      case Granularity::PerTensor: break;
    }
    return 0;
  }
  /// Throws unless the group count fits an x of the given extents.
  void check_shape(Index rows, Index cols) const;
  void validate() const;

  friend bool operator==(const UniformParams&, const UniformParams&) = default;
};

/// Floor applied to every trainable or calibrated scale.
inline constexpr double kMinScale = 1e-12;

/// Scale/zero-point from extrema. A degenerate group (max == min) gets
/// s = 1, z = round(-min).
UniformParams uq_from_minmax(const Vector& mins, const Vector& maxs, BitWidth k, Granularity g);
UniformParams uq_calibrate(const Matrix& x, BitWidth k, Granularity g);

struct UniformQuantized {
  IntMatrix codes;
  UniformParams params;
};

UniformQuantized uq_quantize(const Matrix& x, const UniformParams& p);
Matrix uq_dequantize(const UniformQuantized& q);
/// quantize followed by dequantize.
Matrix uq_fake_quant(const Matrix& x, const UniformParams& p);

/// Log2 quantizer state. With `shifted` set the quantizer operates on
/// x - shift + epsilon and adds shift - epsilon back on dequantization.
struct Log2Params {
  double scale = 1.0;
  BitWidth bits{4};
  double shift = 0.0;
  double epsilon = 1e-8;
  bool shifted = false;

  void validate() const;
  friend bool operator==(const Log2Params&, const Log2Params&) = default;
};

inline constexpr double kDefaultShiftEpsilon = 1e-8;

struct Log2Quantized {
  IntMatrix codes;
  Log2Params params;
};

/// Plain log2 quantizer with s = max(x). Requires x > 0 everywhere.
Log2Quantized lq_quantize(const Matrix& x, BitWidth k);
/// Log2 quantization with fixed (calibrated) params. Inputs whose shifted
/// value is not positive map to the deepest code.
Log2Quantized lq_quantize_static(const Matrix& x, const Log2Params& p);
Matrix lq_dequantize(const IntMatrix& codes, const Log2Params& p);
inline Matrix lq_dequantize(const Log2Quantized& q) { return lq_dequantize(q.codes, q.params); }
Matrix lq_fake_quant(const Matrix& x, const Log2Params& p);

/// Shift-Log2: m = min(x), x' = x - m + eps, log2-quantize x'.
Log2Quantized shift_log2_quantize(const Matrix& x, BitWidth k, double epsilon = kDefaultShiftEpsilon);

Log2Params log2_from_max(double max_value, BitWidth k);
Log2Params shift_log2_from_minmax(double min_value, double max_value, BitWidth k,
                                  double epsilon = kDefaultShiftEpsilon);

/// Per-element code of the log2 quantizer before clamping, or +inf when the
/// (shifted) input is not positive.
inline double log2_code_unclamped(double shifted_x, double scale) {
  if (!(shifted_x > 0)) return std::numeric_limits<double>::infinity();
  return round_half_even(-std::log2(shifted_x / scale));
}

enum class OutlierRule { Magnitude, OneSided };

const char* outlier_rule_name(OutlierRule r) noexcept;
OutlierRule parse_outlier_rule(const std::string& name);

struct OutlierConfig {
  double alpha = std::numeric_limits<double>::infinity();
  OutlierRule rule = OutlierRule::Magnitude;

  bool is_outlier(double v) const noexcept { return rule == OutlierRule::Magnitude ? std::abs(v) >= alpha : v >= alpha; }
  void validate() const {
    if (!(alpha > 0)) throw PreconditionError("outlier threshold alpha must be positive");
  }
  friend bool operator==(const OutlierConfig&, const OutlierConfig&) = default;
};

inline constexpr double kDefaultAlphaQkv = 5.0;
inline constexpr double kDefaultAlphaFc1 = 10.0;

struct OutlierSplit {
  Matrix dense;                // input with outlier positions zeroed
  SparseOutlierMatrix sparse;  // the outliers, full precision
};

OutlierSplit outlier_split(const Matrix& x, const OutlierConfig& cfg);
Index outlier_count(const Matrix& x, const OutlierConfig& cfg);
double outlier_ratio(const Matrix& x, const OutlierConfig& cfg);

/// Linear layer with an outlier-aware per-patch quantized input:
/// gemm(fq(dense), w) + spmm(sparse, w) + bias.
Matrix poq_linear_forward(const Matrix& x, const Matrix& w_dequantized, const RowVector& bias,
                          const UniformParams& act_params, const OutlierConfig& cfg);
Matrix poq_linear_forward(const Matrix& x, const UniformQuantized& w_quantized, const RowVector& bias,
                          const UniformParams& act_params, const OutlierConfig& cfg);

}  // namespace adfq
