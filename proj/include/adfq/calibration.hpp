#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "json.hpp"

#include "adfq/bundle.hpp"
#include "adfq/vit.hpp"

namespace adfq {

/// Which quantizer goes where. The three toggles switch the outlier-aware
/// per-patch quantizer (QKV and FC1 inputs), the shift-log2 quantizer (FC2
/// input) and the second-stage optimization.
struct QuantPolicy {
  bool poq = true;
  bool slq = true;
  bool amo = true;
  double alpha_qkv = kDefaultAlphaQkv;
  double alpha_fc1 = kDefaultAlphaFc1;
  OutlierRule rule = OutlierRule::Magnitude;
  double epsilon = kDefaultShiftEpsilon;
  std::map<SiteKind, QuantizerKind> overrides;

  QuantizerKind kind_for(SiteKind site) const;
  /// Threshold used for splitting and for the reported outlier ratio.
  OutlierConfig outlier_for(SiteKind site) const;
  Granularity granularity_for(SiteKind site) const;
  void validate() const;

  friend bool operator==(const QuantPolicy&, const QuantPolicy&) = default;
};

inline constexpr Index kHistogramBins = 2048;

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::uint64_t> counts;

  std::uint64_t total() const;
  /// Bin of v; the top edge belongs to the last bin.
  Index bin_of(double v) const;
  double bin_left(Index b) const;
  double bin_right(Index b) const;

  friend bool operator==(const Histogram&, const Histogram&) = default;
};

/// Statistics of one activation site in one block.
struct SiteStats {
  SiteKind site = SiteKind::QkvInput;
  QuantizerKind kind = QuantizerKind::Uniform;
  Granularity granularity = Granularity::PerTensor;
  OutlierConfig outlier;
  Vector mins, maxs;        // per group, after the outlier split for per-patch sites
  double raw_min = 0.0;     // over every element before any split
  double raw_max = 0.0;
  Histogram histogram;      // raw values, empty until a range is fixed
  std::uint64_t outlier_count = 0;
  std::uint64_t element_count = 0;
  std::uint64_t sample_count = 0;

  double outlier_ratio() const { return element_count == 0 ? 0.0 : double(outlier_count) / double(element_count); }
  friend bool operator==(const SiteStats&, const SiteStats&) = default;
};

struct CalibStats {
  std::vector<std::array<SiteStats, kSitesPerBlock>> blocks;

  const SiteStats& at(std::size_t block, SiteKind site) const { return blocks.at(block)[site_index(site)]; }
  friend bool operator==(const CalibStats&, const CalibStats&) = default;
};

/// Histogram ranges per block and site, as (lo, hi).
using HistogramRanges = std::vector<std::array<std::pair<double, double>, kSitesPerBlock>>;

HistogramRanges histogram_ranges(const CalibStats& stats);

/// Combines statistics of disjoint sample sets. Histograms must share ranges.
CalibStats merge(const CalibStats& a, const CalibStats& b);

/// Runs every sample through the full-precision model and gathers site
/// statistics. Without `ranges`, a second pass fills histograms over the
/// observed range; with them, histograms use the given ranges directly.
CalibStats collect_stats(const ViTModel& model, const std::vector<Tensor>& samples, const QuantPolicy& policy,
                         const HistogramRanges* ranges = nullptr);

nlohmann::json stats_to_json(const CalibStats& stats);

/// AdaRound state for a fresh weight quantizer: h(v) equals the fractional
/// residual clipped to (0.01, 0.99); hardened decisions are nearest rounding.
WeightQuant init_weight_quant(const Matrix& w, BitWidth bits);

/// First stage: quantizer parameters from calibration statistics.
QuantBundle init_bundle(const CalibStats& stats, const ViTModel& model, const QuantPolicy& policy, int bits_w,
                        int bits_a);

}  // namespace adfq
