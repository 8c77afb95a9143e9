#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace adfq {

inline constexpr double kSmoothTolerance = 1e-6;
inline constexpr double kSteTolerance = 1e-4;

struct GradAuditCase {
  std::string op_class;  // e.g. "layernorm", "fake_quant_uniform", "module_mha"
  std::string name;
  bool ste = false;
  double error = 0.0;
  double tolerance = 0.0;

  bool passed() const noexcept { return error <= tolerance; }
};

/// Central-difference audit over random graphs: every differentiable
/// kernel, every quantizer node, and miniature quantized MHA and MLP modules
/// with the full reconstruction loss. `repeats` random instances per class.
std::vector<GradAuditCase> gradient_audit(std::uint64_t seed, int repeats = 3);

}  // namespace adfq
