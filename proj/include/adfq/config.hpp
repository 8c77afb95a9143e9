#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "adfq/calibration.hpp"
#include "adfq/pipeline.hpp"
#include "adfq/reconstruction.hpp"
#include "adfq/vit.hpp"

namespace adfq {

inline constexpr std::size_t kDeskCalibSamples = 64;
inline constexpr std::size_t kPaperCalibSamples = 1024;

struct RunPaths {
  std::string model, data, calib, bundle, out;
  friend bool operator==(const RunPaths&, const RunPaths&) = default;
};

/// Everything a command needs. Sub-seeds are derived from `seed`.
struct RunConfig {
  ViTConfig model;
  int bits_w = 4;
  int bits_a = 4;
  QuantPolicy policy;
  OptimConfig optim;
  TrainConfig train;
  std::size_t train_samples = 2000;
  std::size_t calib_samples = kDeskCalibSamples;
  std::size_t eval_samples = 256;
  std::vector<double> alpha_sweep = kDefaultAlphaSweep;
  std::uint64_t seed = 0;
  bool paper_mode = false;
  RunPaths paths;

  /// Defaults, with the published iteration count and calibration-set size
  /// when `paper_mode` is set.
  static RunConfig defaults(bool paper_mode);
  void validate() const;

  std::uint64_t model_seed() const noexcept { return mix_seed(seed, 1); }
  std::uint64_t train_data_seed() const noexcept { return mix_seed(seed, 2); }
  std::uint64_t calib_seed() const noexcept { return mix_seed(seed, 3); }
  std::uint64_t eval_seed() const noexcept { return mix_seed(seed, 4); }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json config_to_json(const RunConfig& c);
/// Unknown keys are rejected. `force_paper_mode` applies the paper defaults
/// even if the document does not ask for them; explicit keys still win.
RunConfig run_config_from_json(const nlohmann::json& j, bool force_paper_mode = false);
RunConfig load_run_config(const std::filesystem::path& path, bool force_paper_mode = false);

}  // namespace adfq
