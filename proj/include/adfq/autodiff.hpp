#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "adfq/quantizers.hpp"
#include "adfq/tensor.hpp"

/// Reverse-mode gradients over 2-D matrices.
///
/// Quantizer nodes use straight-through estimators: rounding residuals and
/// clamp decisions are treated as constants, so the backward pass of every
/// quantizer is the exact derivative of the forward with those decisions
/// frozen. A RoundingTape in Replay mode evaluates exactly that frozen
/// function, which is what finite-difference audits compare against.
namespace adfq::ad {

struct NodeImpl;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<NodeImpl> node) : node_(std::move(node)) {}

  const Matrix& value() const;
  /// Accumulated gradient; zeros when nothing flowed into this node.
  Matrix grad() const;
  bool requires_grad() const;
  const std::string& op() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  bool valid() const noexcept { return static_cast<bool>(node_); }

  NodeImpl* impl() const noexcept { return node_.get(); }
  const std::shared_ptr<NodeImpl>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<NodeImpl> node_;
};

/// Trainable (or frozen) leaf.
Var leaf(Matrix value, bool trainable = true);
Var constant(Matrix value);

/// Populates gradients of every node reachable from `loss` (a 1x1 node).
void backward(const Var& loss);

// Differentiable kernels.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// a + broadcast of a 1 x cols row.
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double factor);
Var transpose(const Var& a);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_cols(const std::vector<Var>& parts);
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var gelu(const Var& x);
Var softmax_rows(const Var& x);
/// 1 x cols mean over rows.
Var mean_rows(const Var& x);
Var sum(const Var& x);

/// sum((y - reference)^2).
Var squared_error(const Matrix& reference, const Var& y);
/// Sum over rows of KL(reference_row || renormalized q_row). Reference terms
/// with p = 0 contribute 0; q is clamped below at 1e-12 before renormalizing.
Var kl_rows_sum(const Matrix& reference, const Var& q);
/// -log softmax(logits)[label] for a 1 x C logits row.
Var cross_entropy(const Var& logits, Index label);

inline constexpr double kZeta = 1.1;
inline constexpr double kGamma = -0.1;

/// Rectified sigmoid clamp(0, 1, sigmoid(v) * (zeta - gamma) + gamma).
double rectified_sigmoid(double v);
/// Inverse of the unclamped rectified sigmoid for h in (0, 1).
double rectified_sigmoid_inverse(double h);
Var rectified_sigmoid(const Var& v);

/// sum(1 - |2 h(v) - 1|^beta).
Var round_loss(const Var& v, double beta);

/// Records rounding residuals and clamp/outlier decisions of quantizer
/// nodes (Record), or re-applies them in call order (Replay).
class RoundingTape {
 public:
  enum class Mode { Record, Replay };

  struct Entry {
    Matrix residual;   // round(u) - u for unclamped elements
    Matrix clamped;    // clamped code, NaN when unclamped
    Matrix outlier;    // 1 where the element was routed to the sparse path
  };

  explicit RoundingTape(Mode mode = Mode::Record) : mode_(mode) {}

  Mode mode() const noexcept { return mode_; }
  void set_mode(Mode m) noexcept {
    mode_ = m;
    cursor_ = 0;
  }
  void rewind() noexcept { cursor_ = 0; }
  std::size_t size() const noexcept { return entries_.size(); }

  Entry& record(Index rows, Index cols);
  const Entry& replay(Index rows, Index cols);

 private:
  Mode mode_;
  std::vector<Entry> entries_;
  std::size_t cursor_ = 0;
};

/// Uniform fake quantization y = s * (clamp(round(x/s) + z) - z).
/// `scale` holds one value per group as a groups x 1 column. Gradients:
/// dy/dx = 1 inside the clamp range, 0 outside; dy/ds = (q - z) - x/s
/// inside, (q - z) at the clamped extremes.
Var fake_quant_uniform(const Var& x, const Var& scale, const Vector& zero_point, BitWidth bits,
                       Granularity granularity, RoundingTape* tape = nullptr);

/// Log2 / Shift-Log2 fake quantization with fixed params. Inside the code
/// range dy/dx = 2^(u - q), u = -log2(x'/s); clamped elements pass no gradient.
Var fake_quant_log2(const Var& x, const Log2Params& params, RoundingTape* tape = nullptr);

/// AdaRound soft weight s * (clamp(floor(w/s) + z + h(v)) - z), per output
/// column s and z. Only v receives gradient.
Var soft_weight(const Matrix& w, const Vector& scale, const Vector& zero_point, const Var& v, BitWidth bits);

/// Outlier-aware per-patch linear layer:
/// gemm(fq(dense part of x), w) + spmm(outliers of x, w) + bias.
Var poq_linear(const Var& x, const Var& scale, const Vector& zero_point, BitWidth bits, const OutlierConfig& cfg,
               const Var& w, const Var& bias, RoundingTape* tape = nullptr);

/// Finite-difference audit.
using GraphFn = std::function<Var(const std::vector<Var>& leaves, RoundingTape* tape)>;

struct GradCheckResult {
  std::vector<double> leaf_errors;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_error = 0.0;
  double loss = 0.0;
};

/// Central differences of `f` with rounding decisions frozen at the base point.
GradCheckResult check_gradients(const GraphFn& f, const std::vector<Matrix>& leaf_values, double step = 1e-5);

}  // namespace adfq::ad
