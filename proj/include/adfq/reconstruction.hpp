#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "adfq/autodiff.hpp"
#include "adfq/bundle.hpp"
#include "adfq/vit.hpp"

namespace adfq {

inline constexpr int kDeskIterations = 300;
inline constexpr int kPaperIterations = 3000;

struct OptimConfig {
  double lr_weights = 3e-3;
  double lr_activations = 4e-5;
  int iterations = kDeskIterations;  // per module
  int batch = 8;
  double lambda = 0.01;
  double beta_start = 10.0;
  double beta_end = 2.0;
  std::uint64_t seed = 0;
  bool quantized_inputs = false;  // feed modules the quantized upstream activations

  void validate() const;
  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

/// sum((y_fp - y_q)^2).
ad::Var loss_output(const Matrix& y_fp, const ad::Var& y_q);
/// sum(1 - |2 h(v) - 1|^beta).
ad::Var loss_round(const ad::Var& v, double beta);
/// KL(p_fp || p_q) per row, averaged over heads and rows.
ad::Var loss_attention(const std::vector<Matrix>& p_fp, const std::vector<ad::Var>& p_q);

/// Linear from beta_start at step 0 to beta_end at step total - 1.
double beta_at(int step, int total, double beta_start = 10.0, double beta_end = 2.0);

struct AdamState {
  struct Slot {
    std::string name;
    Matrix m, v;
    double lr = 0.0;
    double floor = -std::numeric_limits<double>::infinity();
  };

  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Slot> slots;

  /// Registers a leaf; returns its slot index.
  std::size_t add(std::string name, Index rows, Index cols, double lr,
                  double floor = -std::numeric_limits<double>::infinity());
};

/// One bias-corrected Adam update of every registered leaf. Values are
/// clamped below at the slot floor afterwards. A non-finite gradient aborts
/// with NumericalError naming the leaf, before anything is modified.
void adam_step(AdamState& state, const std::vector<Matrix*>& params, const std::vector<Matrix>& grads);

enum class ModuleKind { Mha, Mlp };
const char* module_kind_name(ModuleKind k) noexcept;

struct TraceEntry {
  int step = 0;
  double loss_output = 0.0;     // batch mean
  double loss_round = 0.0;      // unweighted
  double loss_attention = 0.0;  // batch mean, zero for MLP
  double beta = 0.0;

  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

/// Reference data for one calibration sample of one module.
struct ModuleSample {
  Matrix input;
  Matrix output;
  std::vector<Matrix> probs;  // MHA only, per head
};

struct ModuleResult {
  std::size_t block = 0;
  ModuleKind kind = ModuleKind::Mha;
  std::vector<TraceEntry> trace;
  double hard_loss_before = 0.0;  // mean L_o (+ L_as) with hardened weights over all samples
  double hard_loss_after = 0.0;

  friend bool operator==(const ModuleResult&, const ModuleResult&) = default;
};

nlohmann::json trace_to_json(const std::vector<TraceEntry>& trace);

/// Mean over samples of L_o (+ L_as for MHA) using hardened weights and the
/// current activation params.
double module_hard_loss(ModuleKind kind, const BlockWeights& w, const ViTConfig& config, const BlockQuant& slice,
                        const std::vector<ModuleSample>& data);

/// Optimizes the rounding variables and uniform activation scales of one
/// module, then hardens its weight quantizers.
ModuleResult optimize_module(ModuleKind kind, std::size_t block, const BlockWeights& w, const ViTConfig& config,
                             BlockQuant& slice, const std::vector<ModuleSample>& data, const OptimConfig& cfg);

/// Blocks in order, attention then MLP inside each block.
std::vector<ModuleResult> run_all_modules(const ViTModel& model, QuantBundle& bundle, const std::vector<Tensor>& calib,
                                          const OptimConfig& cfg);

}  // namespace adfq
