#include "adfq/calibration.hpp"

#include <algorithm>
#include <cmath>

namespace adfq {

using nlohmann::json;

// ---- bundle types -------------------------------------------------------

const char* site_name(SiteKind kind) noexcept {
  switch (kind) {
    case SiteKind::QkvInput: return "qkv_input";
    case SiteKind::Query: return "query";
    case SiteKind::Key: return "key";
    case SiteKind::AttnProbs: return "attn_probs";
    case SiteKind::Value: return "value";
    case SiteKind::ProjInput: return "proj_input";
    case SiteKind::Fc1Input: return "fc1_input";
    case SiteKind::Fc2Input: return "fc2_input";
  }
  return "unknown";
}

SiteKind parse_site(const std::string& name) {
  for (SiteKind k : kAllSites) {
    if (name == site_name(k)) return k;
  }
  throw ConfigError("unknown site '" + name + "'");
}

const char* quantizer_kind_name(QuantizerKind kind) noexcept {
  switch (kind) {
    case QuantizerKind::Uniform: return "uniform";
    case QuantizerKind::OutlierPerPatch: return "outlier_per_patch";
    case QuantizerKind::Log2: return "log2";
    case QuantizerKind::ShiftLog2: return "shift_log2";
  }
  return "unknown";
}

QuantizerKind parse_quantizer_kind(const std::string& name) {
  for (QuantizerKind k : {QuantizerKind::Uniform, QuantizerKind::OutlierPerPatch, QuantizerKind::Log2,
                          QuantizerKind::ShiftLog2}) {
    if (name == quantizer_kind_name(k)) return k;
  }
  throw ConfigError("unknown quantizer kind '" + name + "'");
}

Matrix ActQuant::fake_quant(const Matrix& x) const {
  switch (kind) {
    case QuantizerKind::Uniform: return uq_fake_quant(x, uniform);
    case QuantizerKind::OutlierPerPatch: {
      const OutlierSplit split = outlier_split(x, outlier);
      return uq_fake_quant(split.dense, uniform) + split.sparse.densify();
    }
    case QuantizerKind::Log2:
    case QuantizerKind::ShiftLog2: return lq_fake_quant(x, log2);
  }
  return x;
}

Vector WeightQuant::effective_zero_point() const {
  return use_zero_point ? params.zero_point : Vector(Vector::Zero(params.zero_point.size()));
}

namespace {

template <typename F>
void for_each_code(const WeightQuant& wq, const Matrix& w, F&& f) {
  wq.params.check_shape(w.rows(), w.cols());
  if (wq.round_up.rows() != w.rows() || wq.round_up.cols() != w.cols()) {
    throw DimensionError("weight quantizer rounding state " + detail::dims(wq.round_up.rows(), wq.round_up.cols()) +
                         " does not match weight " + detail::dims(w.rows(), w.cols()));
  }
  const Vector z = wq.effective_zero_point();
  const int max_code = wq.params.bits.max_code();
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const double s = wq.params.scale[c];
      const double code = clamp_code(std::floor(w(r, c) / s) + z[c] + wq.round_up(r, c), max_code);
      f(r, c, code, s, z[c]);
    }
  }
}

}  // namespace

Matrix WeightQuant::dequantized(const Matrix& w) const {
  Matrix out(w.rows(), w.cols());
  for_each_code(*this, w, [&out](Index r, Index c, double code, double s, double z) { out(r, c) = s * (code - z); });
  return out;
}

IntMatrix WeightQuant::codes(const Matrix& w) const {
  IntMatrix out(w.rows(), w.cols());
  for_each_code(*this, w, [&out](Index r, Index c, double code, double, double) {
    out(r, c) = static_cast<std::int32_t>(code);
  });
  return out;
}

void WeightQuant::harden() {
  round_up = v.unaryExpr([](double x) { return ad::rectified_sigmoid(x) >= 0.5 ? 1.0 : 0.0; });
}

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

template <typename M>
void snap(M& m) {
  m = m.unaryExpr([](double v) { return to_f32(v); });
}

void snap(UniformParams& p) {
  snap(p.scale);
  snap(p.zero_point);
}

}  // namespace

void QuantBundle::snap_to_storage_precision() {
  for (auto& b : blocks) {
    for (auto& a : b.acts) {
      snap(a.uniform);
      a.log2.scale = to_f32(a.log2.scale);
      a.log2.shift = to_f32(a.log2.shift);
    }
    for (WeightQuant* w : {&b.qkv, &b.proj, &b.fc1, &b.fc2}) {
      snap(w->params);
      snap(w->v);
      snap(w->round_up);
    }
  }
}

// ---- policy ---------------------------------------------------------------

QuantizerKind QuantPolicy::kind_for(SiteKind site) const {
  if (auto it = overrides.find(site); it != overrides.end()) return it->second;
  switch (site) {
    case SiteKind::QkvInput:
    case SiteKind::Fc1Input: return poq ? QuantizerKind::OutlierPerPatch : QuantizerKind::Uniform;
    case SiteKind::Fc2Input: return slq ? QuantizerKind::ShiftLog2 : QuantizerKind::Uniform;
    case SiteKind::AttnProbs: return QuantizerKind::Log2;
    default: return QuantizerKind::Uniform;
  }
}

OutlierConfig QuantPolicy::outlier_for(SiteKind site) const {
  OutlierConfig cfg;
  cfg.rule = rule;
  if (kind_for(site) == QuantizerKind::OutlierPerPatch) cfg.alpha = site == SiteKind::QkvInput ? alpha_qkv : alpha_fc1;
  return cfg;
}

Granularity QuantPolicy::granularity_for(SiteKind site) const {
  return kind_for(site) == QuantizerKind::OutlierPerPatch ? Granularity::PerPatch : Granularity::PerTensor;
}

void QuantPolicy::validate() const {
  if (!(alpha_qkv > 0)) throw ConfigError("alpha_qkv must be positive");
  if (!(alpha_fc1 > 0)) throw ConfigError("alpha_fc1 must be positive");
  if (!(epsilon > 0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be positive and finite");
  for (const auto& [site, kind] : overrides) {
    if (kind == QuantizerKind::OutlierPerPatch && site != SiteKind::QkvInput && site != SiteKind::Fc1Input) {
      throw ConfigError(std::string("outlier-aware quantizer is only available at qkv_input and fc1_input, not ") +
                        site_name(site));
    }
  }
}

// ---- histograms -----------------------------------------------------------

std::uint64_t Histogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

Index Histogram::bin_of(double v) const {
  const Index bins = static_cast<Index>(counts.size());
  if (!(hi > lo)) return 0;
  const double pos = (v - lo) / (hi - lo) * static_cast<double>(bins);
  return std::clamp<Index>(static_cast<Index>(std::floor(pos)), 0, bins - 1);
}

double Histogram::bin_left(Index b) const {
  const auto bins = static_cast<double>(counts.size());
  return lo + (hi - lo) * static_cast<double>(b) / bins;
}

double Histogram::bin_right(Index b) const { return b + 1 == static_cast<Index>(counts.size()) ? hi : bin_left(b + 1); }

// ---- statistics -----------------------------------------------------------

namespace {

SiteStats empty_site(SiteKind site, const QuantPolicy& policy) {
  SiteStats s;
  s.site = site;
  s.kind = policy.kind_for(site);
  s.granularity = policy.granularity_for(site);
  s.outlier = policy.outlier_for(site);
  s.raw_min = std::numeric_limits<double>::infinity();
  s.raw_max = -std::numeric_limits<double>::infinity();
  return s;
}

void accumulate(SiteStats& s, const Matrix& x) {
  s.raw_min = std::min(s.raw_min, x.minCoeff());
  s.raw_max = std::max(s.raw_max, x.maxCoeff());
  s.element_count += static_cast<std::uint64_t>(x.size());
  s.sample_count += 1;

  MinMax<double> mm;
  if (s.granularity == Granularity::PerPatch) {
    s.outlier_count += static_cast<std::uint64_t>(outlier_count(x, s.outlier));
    mm = reduce_minmax(outlier_split(x, s.outlier).dense, Grouping::Row);
  } else {
    if (std::isfinite(s.outlier.alpha)) s.outlier_count += static_cast<std::uint64_t>(outlier_count(x, s.outlier));
    mm = reduce_minmax(x, s.granularity == Granularity::PerChannel ? Grouping::Column : Grouping::Tensor);
  }
  if (s.mins.size() == 0) {
    s.mins = mm.mins;
    s.maxs = mm.maxs;
  } else {
    if (s.mins.size() != mm.mins.size()) throw DimensionError(std::string("site ") + site_name(s.site) + ": group count changed");
    s.mins = s.mins.cwiseMin(mm.mins);
    s.maxs = s.maxs.cwiseMax(mm.maxs);
  }
}

void fill_histogram(SiteStats& s, const Matrix& x) {
  for (Index i = 0; i < x.size(); ++i) s.histogram.counts[static_cast<std::size_t>(s.histogram.bin_of(x.data()[i]))] += 1;
}

template <typename F>
void for_each_tap(const ViTModel& model, const std::vector<Tensor>& samples, F&& f) {
  const InferenceSession session(model, nullptr);
  for (const Tensor& img : samples) {
    const ForwardResult r = session.run(img, TapFilter::all_sites());
    for (std::size_t l = 0; l < r.trace.blocks.size(); ++l) {
      for (SiteKind k : kAllSites) f(l, k, *r.trace.blocks[l].site_input[site_index(k)]);
    }
  }
}

}  // namespace

HistogramRanges histogram_ranges(const CalibStats& stats) {
  HistogramRanges out(stats.blocks.size());
  for (std::size_t l = 0; l < stats.blocks.size(); ++l) {
    for (SiteKind k : kAllSites) {
      const SiteStats& s = stats.blocks[l][site_index(k)];
      out[l][site_index(k)] = {s.raw_min, s.raw_max};
    }
  }
  return out;
}

CalibStats merge(const CalibStats& a, const CalibStats& b) {
  if (a.blocks.empty()) return b;
  if (b.blocks.empty()) return a;
  if (a.blocks.size() != b.blocks.size()) throw DimensionError("merge: block counts differ");
  CalibStats out = a;
  for (std::size_t l = 0; l < a.blocks.size(); ++l) {
    for (SiteKind k : kAllSites) {
      SiteStats& o = out.blocks[l][site_index(k)];
      const SiteStats& y = b.blocks[l][site_index(k)];
      if (o.kind != y.kind || o.granularity != y.granularity || !(o.outlier == y.outlier)) {
        throw PreconditionError(std::string("merge: site ") + site_name(k) + " collected under different policies");
      }
      if (o.histogram.lo != y.histogram.lo || o.histogram.hi != y.histogram.hi ||
          o.histogram.counts.size() != y.histogram.counts.size()) {
        throw PreconditionError(std::string("merge: site ") + site_name(k) + " histograms have different ranges");
      }
      if (o.mins.size() != y.mins.size()) throw DimensionError(std::string("merge: site ") + site_name(k) + " group counts differ");
      o.mins = o.mins.cwiseMin(y.mins);
      o.maxs = o.maxs.cwiseMax(y.maxs);
      o.raw_min = std::min(o.raw_min, y.raw_min);
      o.raw_max = std::max(o.raw_max, y.raw_max);
      for (std::size_t i = 0; i < o.histogram.counts.size(); ++i) o.histogram.counts[i] += y.histogram.counts[i];
      o.outlier_count += y.outlier_count;
      o.element_count += y.element_count;
      o.sample_count += y.sample_count;
    }
  }
  return out;
}

CalibStats collect_stats(const ViTModel& model, const std::vector<Tensor>& samples, const QuantPolicy& policy,
                         const HistogramRanges* ranges) {
  if (samples.empty()) throw PreconditionError("collect_stats: calibration set is empty");
  model.validate();
  policy.validate();
  const auto blocks = static_cast<std::size_t>(model.config.blocks);
  if (ranges != nullptr && ranges->size() != blocks) throw DimensionError("collect_stats: histogram ranges do not match blocks");

  CalibStats stats;
  stats.blocks.resize(blocks);
  for (auto& b : stats.blocks) {
    for (SiteKind k : kAllSites) b[site_index(k)] = empty_site(k, policy);
  }
  for_each_tap(model, samples, [&](std::size_t l, SiteKind k, const Matrix& x) { accumulate(stats.blocks[l][site_index(k)], x); });

  const HistogramRanges observed = histogram_ranges(stats);
  const HistogramRanges& use = ranges != nullptr ? *ranges : observed;
  for (std::size_t l = 0; l < blocks; ++l) {
    for (SiteKind k : kAllSites) {
      Histogram& h = stats.blocks[l][site_index(k)].histogram;
      std::tie(h.lo, h.hi) = use[l][site_index(k)];
      h.counts.assign(static_cast<std::size_t>(kHistogramBins), 0);
    }
  }
  for_each_tap(model, samples, [&](std::size_t l, SiteKind k, const Matrix& x) { fill_histogram(stats.blocks[l][site_index(k)], x); });
  return stats;
}

json stats_to_json(const CalibStats& stats) {
  json blocks = json::array();
  for (const auto& b : stats.blocks) {
    json sites = json::object();
    for (const SiteStats& s : b) {
      sites[site_name(s.site)] = {
          {"kind", quantizer_kind_name(s.kind)},
          {"granularity", granularity_name(s.granularity)},
          {"alpha", std::isinf(s.outlier.alpha) ? json(nullptr) : json(s.outlier.alpha)},
          {"min", s.raw_min},
          {"max", s.raw_max},
          {"group_min", std::vector<double>(s.mins.begin(), s.mins.end())},
          {"group_max", std::vector<double>(s.maxs.begin(), s.maxs.end())},
          {"outlier_count", s.outlier_count},
          {"element_count", s.element_count},
          {"outlier_ratio", s.outlier_ratio()},
          {"sample_count", s.sample_count},
      };
    }
    blocks.push_back(std::move(sites));
  }
  return {{"blocks", std::move(blocks)}};
}

// ---- first stage ----------------------------------------------------------

WeightQuant init_weight_quant(const Matrix& w, BitWidth bits) {
  WeightQuant wq;
  wq.params = uq_calibrate(w, bits, Granularity::PerChannel);
  wq.v.resize(w.rows(), w.cols());
  wq.round_up.resize(w.rows(), w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const double u = w(r, c) / wq.params.scale[c];
      const double f = std::floor(u);
      wq.v(r, c) = ad::rectified_sigmoid_inverse(std::clamp(u - f, 0.01, 0.99));
      wq.round_up(r, c) = round_half_even(u) - f;
    }
  }
  return wq;
}

QuantBundle init_bundle(const CalibStats& stats, const ViTModel& model, const QuantPolicy& policy, int bits_w,
                        int bits_a) {
  policy.validate();
  const BitWidth kw(bits_w);
  const BitWidth ka(bits_a);
  if (static_cast<Index>(stats.blocks.size()) != model.config.blocks) {
    throw ConfigError("statistics cover " + std::to_string(stats.blocks.size()) + " blocks, model has " +
                      std::to_string(model.config.blocks));
  }
  QuantBundle bundle;
  bundle.bits_w = bits_w;
  bundle.bits_a = bits_a;
  for (std::size_t l = 0; l < stats.blocks.size(); ++l) {
    BlockQuant b;
    for (SiteKind k : kAllSites) {
      const SiteStats& s = stats.blocks[l][site_index(k)];
      const std::string where = "block " + std::to_string(l) + " site " + site_name(k);
      if (s.sample_count == 0 || s.mins.size() == 0) throw ConfigError(where + ": no statistics");
      if (s.kind != policy.kind_for(k) || s.granularity != policy.granularity_for(k) || !(s.outlier == policy.outlier_for(k))) {
        throw ConfigError(where + ": statistics were collected under a different policy");
      }
      ActQuant& a = b.site(k);
      a.kind = s.kind;
      switch (s.kind) {
        case QuantizerKind::OutlierPerPatch:
          if (s.mins.size() != model.config.num_patches()) throw ConfigError(where + ": per-patch group count != n");
          a.outlier = s.outlier;
          [[fallthrough]];
        case QuantizerKind::Uniform:
          a.uniform = uq_from_minmax(s.mins, s.maxs, ka, s.granularity);
          break;
        case QuantizerKind::Log2:
          a.log2 = log2_from_max(s.raw_max, ka);
          break;
        case QuantizerKind::ShiftLog2:
          a.log2 = shift_log2_from_minmax(s.raw_min, s.raw_max, ka, policy.epsilon);
          break;
      }
    }
    const BlockWeights& w = model.blocks[l];
    b.qkv = init_weight_quant(w.qkv_w, kw);
    b.proj = init_weight_quant(w.proj_w, kw);
    b.fc1 = init_weight_quant(w.fc1_w, kw);
    b.fc2 = init_weight_quant(w.fc2_w, kw);
    bundle.blocks.push_back(std::move(b));
  }
  return bundle;
}

}  // namespace adfq
