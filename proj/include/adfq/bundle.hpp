#pragma once

#include <array>
#include <string>
#include <vector>

#include "adfq/quantizers.hpp"

namespace adfq {

/// Activation quantization sites inside one transformer block, in forward
/// order. Each site quantizes the input of a matrix multiplication.
enum class SiteKind { QkvInput, Query, Key, AttnProbs, Value, ProjInput, Fc1Input, Fc2Input };

inline constexpr std::size_t kSitesPerBlock = 8;
inline constexpr std::array<SiteKind, kSitesPerBlock> kAllSites = {
    SiteKind::QkvInput, SiteKind::Query,     SiteKind::Key,      SiteKind::AttnProbs,
    SiteKind::Value,    SiteKind::ProjInput, SiteKind::Fc1Input, SiteKind::Fc2Input};

const char* site_name(SiteKind kind) noexcept;
SiteKind parse_site(const std::string& name);
inline std::size_t site_index(SiteKind kind) noexcept { return static_cast<std::size_t>(kind); }
/// Sites belonging to the attention module (the rest feed the MLP).
inline bool is_attention_site(SiteKind kind) noexcept { return site_index(kind) <= site_index(SiteKind::ProjInput); }

enum class QuantizerKind { Uniform, OutlierPerPatch, Log2, ShiftLog2 };

const char* quantizer_kind_name(QuantizerKind kind) noexcept;
QuantizerKind parse_quantizer_kind(const std::string& name);

/// One activation quantizer. `uniform` is live for Uniform and
/// OutlierPerPatch, `log2` for Log2 and ShiftLog2, `outlier` for
/// OutlierPerPatch only.
struct ActQuant {
  QuantizerKind kind = QuantizerKind::Uniform;
  UniformParams uniform;
  Log2Params log2;
  OutlierConfig outlier;

  bool uses_uniform() const noexcept { return kind == QuantizerKind::Uniform || kind == QuantizerKind::OutlierPerPatch; }
  /// Non-graph fake quantization, as applied by the forward pass.
  Matrix fake_quant(const Matrix& x) const;

  friend bool operator==(const ActQuant&, const ActQuant&) = default;
};

/// Per-output-channel weight quantizer with AdaRound state.
struct WeightQuant {
  UniformParams params;     // per-channel: one group per output column
  Matrix v;                 // soft rounding variables
  Matrix round_up;          // hardened rounding decision per weight, 0 or 1
  bool use_zero_point = true;

  Vector effective_zero_point() const;
  /// Dequantized weights using the hardened decisions.
  Matrix dequantized(const Matrix& w) const;
  /// Integer codes using the hardened decisions.
  IntMatrix codes(const Matrix& w) const;
  /// round_up := h(v) >= 0.5.
  void harden();

  friend bool operator==(const WeightQuant&, const WeightQuant&) = default;
};

struct BlockQuant {
  std::array<ActQuant, kSitesPerBlock> acts;
  WeightQuant qkv;
  WeightQuant proj;
  WeightQuant fc1;
  WeightQuant fc2;

  ActQuant& site(SiteKind k) { return acts[site_index(k)]; }
  const ActQuant& site(SiteKind k) const { return acts[site_index(k)]; }

  friend bool operator==(const BlockQuant&, const BlockQuant&) = default;
};

/// Quantizer state for a whole model: one entry per site per block plus
/// one weight quantizer per block linear layer.
struct QuantBundle {
  int bits_w = 4;
  int bits_a = 4;
  std::vector<BlockQuant> blocks;

  std::size_t activation_entries() const noexcept { return blocks.size() * kSitesPerBlock; }
  /// Rounds every stored real to binary32, the on-disk precision.
  void snap_to_storage_precision();

  friend bool operator==(const QuantBundle&, const QuantBundle&) = default;
};

}  // namespace adfq
