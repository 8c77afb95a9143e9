#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "adfq/calibration.hpp"
#include "adfq/reconstruction.hpp"
#include "adfq/vit.hpp"

namespace adfq {

struct Dataset {
  std::vector<Tensor> images;
  std::vector<Index> labels;  // empty when unlabeled
  std::string provenance;

  std::size_t size() const noexcept { return images.size(); }
  bool labeled() const noexcept { return !labels.empty(); }
  /// Throws unless every image is h x w x c and labels are in range.
  void validate(const ViTConfig& config) const;
  Dataset slice(std::size_t begin, std::size_t end) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Spatial partition used by the synthetic labelling rule: rows x cols
/// regions with rows the largest divisor of the class count not above its
/// square root.
std::pair<Index, Index> label_grid(Index num_classes);
/// Class of an image: argmax of mean intensity over the label grid regions
/// (first maximum wins).
Index region_label(const Tensor& image, Index num_classes);

Dataset gen_synthetic_dataset(const ViTConfig& config, std::size_t count, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& manifest);
Dataset load_dataset(const std::filesystem::path& manifest);

struct TrainConfig {
  int epochs = 5;
  double lr = 1e-3;
  int batch = 16;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainResult {
  ViTModel model;
  std::vector<double> epoch_loss;  // mean training cross-entropy per epoch
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

double accuracy(const ViTModel& model, const Dataset& data);
TrainResult train_toy(const ViTModel& model, const Dataset& data, const TrainConfig& cfg);

struct QuantizeResult {
  QuantBundle bundle;
  CalibStats stats;
  std::vector<ModuleResult> modules;  // empty when the second stage is off
};

/// Statistics, first-stage initialization, then (when policy.amo) module-wise
/// optimization. The returned bundle is snapped to storage precision.
QuantizeResult quantize_model(const ViTModel& model, const std::vector<Tensor>& calib, const QuantPolicy& policy,
                              int bits_w, int bits_a, const OptimConfig& cfg);

/// Plain per-tensor min-max activations (log2 on attention probabilities),
/// per-channel nearest-rounded weights, built straight from the taps.
QuantBundle naive_baseline_bundle(const ViTModel& model, const std::vector<Tensor>& calib, int bits_w, int bits_a);

struct SiteError {
  std::size_t block = 0;
  SiteKind site = SiteKind::QkvInput;
  QuantizerKind kind = QuantizerKind::Uniform;
  double mse = 0.0;
  double nmse = 0.0;
  double outlier_ratio = 0.0;

  friend bool operator==(const SiteError&, const SiteError&) = default;
};

struct EvalReport {
  std::size_t samples = 0;
  double logits_nmse = 0.0;
  double cosine_mean = 1.0;
  double top1_agreement = 1.0;
  std::optional<double> fp_accuracy;
  std::optional<double> quant_accuracy;
  std::vector<SiteError> sites;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json traces = nlohmann::json::array();

  nlohmann::json to_json() const;
};

inline constexpr const char* kReportSchemaId = "adfq-eval-report/1";

EvalReport evaluate(const ViTModel& model, const QuantBundle* bundle, const Dataset& data);

nlohmann::json module_traces_to_json(const std::vector<ModuleResult>& modules);

/// Settings echoed into every report: bits, thresholds, toggles, optimizer.
nlohmann::json echo_config(const QuantPolicy& policy, int bits_w, int bits_a, const OptimConfig& cfg);

struct AblationRow {
  bool poq = true, slq = true, amo = true;
  EvalReport report;
};

struct SweepRow {
  std::string layer;  // "qkv" or "fc1"
  double alpha = 0.0;
  double outlier_ratio = 0.0;  // over every block's site of that layer
  double top1_agreement = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // 8 toggle combinations, all-enabled first
  std::vector<SweepRow> sweep;
};

inline const std::vector<double> kDefaultAlphaSweep = {2, 3, 4, 5, 6, 8, 10, 15, 20};

/// Toggle grid plus a first-stage alpha sweep of each outlier-aware layer
/// with the other layer's threshold held at its base value.
AblationResult ablate(const ViTModel& model, const std::vector<Tensor>& calib, const Dataset& eval_data,
                      const QuantPolicy& base, int bits_w, int bits_a, const OptimConfig& cfg,
                      const std::vector<double>& alpha_sweep);

}  // namespace adfq
