#include "adfq/autodiff.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

#include "adfq/kernels.hpp"

namespace adfq::ad {

struct NodeImpl {
  Matrix value;
  Matrix grad;
  std::string op;
  std::vector<std::shared_ptr<NodeImpl>> parents;
  std::function<void(NodeImpl&)> backward_fn;
  bool requires_grad = false;
};

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kProbFloor = 1e-12;

using BackwardFn = std::function<void(NodeImpl&)>;

Var make_node(std::string op, Matrix value, std::vector<Var> parents, BackwardFn fn) {
  auto node = std::make_shared<NodeImpl>();
  node->value = std::move(value);
  node->op = std::move(op);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.shared());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

template <typename Derived>
void accumulate(NodeImpl& node, const Eigen::MatrixBase<Derived>& g) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

NodeImpl& parent(NodeImpl& self, std::size_t i) { return *self.parents[i]; }

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape " + detail::dims(a.rows(), a.cols()) + " vs " +
                         detail::dims(b.rows(), b.cols()));
  }
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Derivative of the rectified sigmoid; zero where it saturates.
double rectified_sigmoid_grad(double v) {
  const double s = sigmoid(v);
  const double raw = s * (kZeta - kGamma) + kGamma;
  return (raw > 0.0 && raw < 1.0) ? s * (1.0 - s) * (kZeta - kGamma) : 0.0;
}

Index group_index(Granularity g, Index row, Index col) {
  switch (g) {
    case Granularity::PerChannel: return col;
    case Granularity::PerPatch: return row;
    case Granularity::PerTensor: break;
  }
  return 0;
}

void check_scale_groups(const char* op, Granularity g, const Matrix& x, const Matrix& scale, const Vector& zp) {
  Index expected = 1;
  if (g == Granularity::PerChannel) expected = x.cols();
  if (g == Granularity::PerPatch) expected = x.rows();
  if (scale.rows() != expected || scale.cols() != 1 || zp.size() != expected) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(expected) + " scale groups, got " +
                         detail::dims(scale.rows(), scale.cols()));
  }
}

/// One element of the uniform fake quantizer. Returns the dequantized
/// value; `inside` and `ds` describe the STE derivative.
struct UniformElem {
  double y;
  bool inside;
  double ds;  // dy/ds
};

UniformElem uniform_element(double x, double s, double z, int max_code, RoundingTape::Entry* rec,
                            const RoundingTape::Entry* rep, Index r, Index c) {
  const double u = x / s;
  if (rep != nullptr) {
    const double clamped = rep->clamped(r, c);
    if (!std::isnan(clamped)) return {s * (clamped - z), false, clamped - z};
    const double delta = rep->residual(r, c);
    return {s * (u + delta), true, delta};
  }
  const double rounded = round_half_even(u);
  const double unclamped = rounded + z;
  const double q = clamp_code(unclamped, max_code);
  const bool inside = q == unclamped;
  if (rec != nullptr) {
    rec->residual(r, c) = inside ? rounded - u : 0.0;
    rec->clamped(r, c) = inside ? kNaN : q;
  }
  return {s * (q - z), inside, inside ? (q - z) - u : (q - z)};
}

}  // namespace

const Matrix& Var::value() const {
  if (!node_) throw PreconditionError("use of an empty Var");
  return node_->value;
}

Matrix Var::grad() const {
  const Matrix& v = value();
  if (node_->grad.size() == 0) return Matrix::Zero(v.rows(), v.cols());
  return node_->grad;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const std::string& Var::op() const {
  if (!node_) throw PreconditionError("use of an empty Var");
  return node_->op;
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw PreconditionError("scalar() on a " + detail::dims(v.rows(), v.cols()) + " node");
  return v(0, 0);
}

Var leaf(Matrix value, bool trainable) {
  auto node = std::make_shared<NodeImpl>();
  node->value = std::move(value);
  node->op = trainable ? "leaf" : "const";
  node->requires_grad = trainable;
  return Var(std::move(node));
}

Var constant(Matrix value) { return leaf(std::move(value), false); }

void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw PreconditionError("backward: loss must be scalar, got " + detail::dims(loss.rows(), loss.cols()));
  }
  if (!loss.requires_grad()) return;
  // iterative post-order DFS gives a topological order
  std::vector<NodeImpl*> order;
  std::unordered_set<NodeImpl*> visited;
  std::vector<std::pair<NodeImpl*, std::size_t>> stack{{loss.impl(), 0}};
  visited.insert(loss.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeImpl* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.impl()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeImpl* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  return make_node("matmul", gemm(a.value(), b.value()), {a, b}, [](NodeImpl& self) {
    const Matrix& av = parent(self, 0).value;
    const Matrix& bv = parent(self, 1).value;
    if (parent(self, 0).requires_grad) accumulate(parent(self, 0), self.grad * bv.transpose());
    if (parent(self, 1).requires_grad) accumulate(parent(self, 1), av.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a.value(), b.value());
  return make_node("add", a.value() + b.value(), {a, b}, [](NodeImpl& self) {
    accumulate(parent(self, 0), self.grad);
    accumulate(parent(self, 1), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a.value(), b.value());
  return make_node("sub", a.value() - b.value(), {a, b}, [](NodeImpl& self) {
    accumulate(parent(self, 0), self.grad);
    accumulate(parent(self, 1), -self.grad);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: row " + detail::dims(row.rows(), row.cols()) + " vs " +
                         detail::dims(a.rows(), a.cols()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_node("add_row", std::move(out), {a, row}, [](NodeImpl& self) {
    accumulate(parent(self, 0), self.grad);
    accumulate(parent(self, 1), self.grad.colwise().sum());
  });
}

Var scale(const Var& a, double factor) {
  return make_node("scale", a.value() * factor, {a},
                   [factor](NodeImpl& self) { accumulate(parent(self, 0), self.grad * factor); });
}

Var transpose(const Var& a) {
  return make_node("transpose", a.value().transpose(), {a},
                   [](NodeImpl& self) { accumulate(parent(self, 0), self.grad.transpose()); });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: range out of bounds");
  return make_node("slice_cols", a.value().middleCols(start, count), {a}, [start, count](NodeImpl& self) {
    NodeImpl& p = parent(self, 0);
    if (!p.requires_grad) return;
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    p.grad.middleCols(start, count) += self.grad;
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw PreconditionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_node("concat_cols", std::move(out), parts, [offsets](NodeImpl& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      NodeImpl& p = parent(self, i);
      accumulate(p, self.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Matrix out = adfq::layernorm(x.value(), gamma.value(), beta.value(), eps);
  return make_node("layernorm", std::move(out), {x, gamma, beta}, [eps](NodeImpl& self) {
    const Matrix& xv = parent(self, 0).value;
    const RowVector g = parent(self, 1).value.reshaped().transpose();
    const Index d = xv.cols();
    Matrix gx(xv.rows(), d);
    RowVector ggamma = RowVector::Zero(d);
    RowVector gbeta = RowVector::Zero(d);
    for (Index r = 0; r < xv.rows(); ++r) {
      const double mean = xv.row(r).sum() / static_cast<double>(d);
      const RowVector centered = xv.row(r).array() - mean;
      const double inv_std = 1.0 / std::sqrt(centered.squaredNorm() / static_cast<double>(d) + eps);
      const RowVector xhat = centered * inv_std;
      const RowVector gout = self.grad.row(r);
      ggamma += gout.cwiseProduct(xhat);
      gbeta += gout;
      const RowVector gxhat = gout.cwiseProduct(g);
      const double m1 = gxhat.mean();
      const double m2 = gxhat.cwiseProduct(xhat).mean();
      gx.row(r) = inv_std * (gxhat.array() - m1 - xhat.array() * m2).matrix();
    }
    accumulate(parent(self, 0), gx);
    accumulate(parent(self, 1), ggamma.reshaped(parent(self, 1).value.rows(), parent(self, 1).value.cols()));
    accumulate(parent(self, 2), gbeta.reshaped(parent(self, 2).value.rows(), parent(self, 2).value.cols()));
  });
}

Var gelu(const Var& x) {
  return make_node("gelu", adfq::gelu(x.value()), {x}, [](NodeImpl& self) {
    const Matrix& xv = parent(self, 0).value;
    const Matrix d = xv.unaryExpr([](double v) { return normal_cdf(v) + v * normal_pdf(v); });
    accumulate(parent(self, 0), self.grad.cwiseProduct(d));
  });
}

Var softmax_rows(const Var& x) {
  return make_node("softmax_rows", adfq::softmax_rows(x.value()), {x}, [](NodeImpl& self) {
    const Matrix& y = self.value;
    const Vector dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix gx = self.grad;
    gx.colwise() -= dot;
    accumulate(parent(self, 0), gx.cwiseProduct(y));
  });
}

Var mean_rows(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.rows());
  return make_node("mean_rows", x.value().colwise().sum() * inv, {x}, [inv](NodeImpl& self) {
    const Matrix& xv = parent(self, 0).value;
    accumulate(parent(self, 0), (self.grad * inv).replicate(xv.rows(), 1));
  });
}

Var sum(const Var& x) {
  return make_node("sum", Matrix::Constant(1, 1, x.value().sum()), {x}, [](NodeImpl& self) {
    const Matrix& xv = parent(self, 0).value;
    accumulate(parent(self, 0), Matrix::Constant(xv.rows(), xv.cols(), self.grad(0, 0)));
  });
}

Var squared_error(const Matrix& reference, const Var& y) {
  require_same_shape("squared_error", reference, y.value());
  Matrix diff = y.value() - reference;
  const double loss = diff.squaredNorm();
  return make_node("squared_error", Matrix::Constant(1, 1, loss), {y}, [diff = std::move(diff)](NodeImpl& self) {
    accumulate(parent(self, 0), diff * (2.0 * self.grad(0, 0)));
  });
}

Var kl_rows_sum(const Matrix& reference, const Var& q) {
  require_same_shape("kl_rows_sum", reference, q.value());
  const Matrix& qv = q.value();
  Matrix grad(qv.rows(), qv.cols());
  double total = 0.0;
  for (Index r = 0; r < qv.rows(); ++r) {
    const RowVector qc = qv.row(r).cwiseMax(kProbFloor);
    const double s = qc.sum();
    // both sides normalized the same way, so identical rows give exactly 0
    const RowVector pr = reference.row(r);  // same reduction path as qc
    const double ref_sum = pr.sum();
    const RowVector pn = ref_sum > 0.0 ? RowVector(pr / ref_sum) : pr;
    const double p_total = pn.sum();
    for (Index c = 0; c < qv.cols(); ++c) {
      const double p = pn[c];
      if (p > 0.0) total += p * (std::log(p) - std::log(qc[c] / s));
      grad(r, c) = qv(r, c) >= kProbFloor ? -p / qc[c] + p_total / s : 0.0;
    }
  }
  return make_node("kl_rows_sum", Matrix::Constant(1, 1, total), {q}, [grad = std::move(grad)](NodeImpl& self) {
    accumulate(parent(self, 0), grad * self.grad(0, 0));
  });
}

Var cross_entropy(const Var& logits, Index label) {
  if (logits.rows() != 1 || label < 0 || label >= logits.cols()) {
    throw DimensionError("cross_entropy: expects a 1 x C row and a label in range");
  }
  const Matrix p = adfq::softmax_rows(logits.value());
  const double m = logits.value().maxCoeff();
  const double lse = m + std::log((logits.value().array() - m).exp().sum());
  return make_node("cross_entropy", Matrix::Constant(1, 1, lse - logits.value()(0, label)), {logits},
                   [p, label](NodeImpl& self) {
                     Matrix g = p;
                     g(0, label) -= 1.0;
                     accumulate(parent(self, 0), g * self.grad(0, 0));
                   });
}

double rectified_sigmoid(double v) { return std::clamp(sigmoid(v) * (kZeta - kGamma) + kGamma, 0.0, 1.0); }

double rectified_sigmoid_inverse(double h) {
  const double s = (h - kGamma) / (kZeta - kGamma);
  return std::log(s / (1.0 - s));
}

Var rectified_sigmoid(const Var& v) {
  Matrix h = v.value().unaryExpr([](double x) { return rectified_sigmoid(x); });
  return make_node("rectified_sigmoid", std::move(h), {v}, [](NodeImpl& self) {
    const Matrix& vv = parent(self, 0).value;
    accumulate(parent(self, 0), self.grad.cwiseProduct(vv.unaryExpr([](double x) { return rectified_sigmoid_grad(x); })));
  });
}

Var round_loss(const Var& v, double beta) {
  if (!(beta > 0)) throw PreconditionError("round_loss: beta must be positive");
  const Matrix& vv = v.value();
  double total = 0.0;
  Matrix grad(vv.rows(), vv.cols());
  for (Index i = 0; i < vv.size(); ++i) {
    const double h = rectified_sigmoid(vv.data()[i]);
    const double t = 2.0 * h - 1.0;
    const double a = std::abs(t);
    total += 1.0 - std::pow(a, beta);
    const double dh = a > 0.0 ? -beta * std::pow(a, beta - 1.0) * (t > 0 ? 1.0 : -1.0) * 2.0 : 0.0;
    grad.data()[i] = dh * rectified_sigmoid_grad(vv.data()[i]);
  }
  return make_node("round_loss", Matrix::Constant(1, 1, total), {v}, [grad = std::move(grad)](NodeImpl& self) {
    accumulate(parent(self, 0), grad * self.grad(0, 0));
  });
}

RoundingTape::Entry& RoundingTape::record(Index rows, Index cols) {
  if (mode_ != Mode::Record) throw PreconditionError("rounding tape is not recording");
  entries_.push_back({Matrix::Zero(rows, cols), Matrix::Constant(rows, cols, kNaN), Matrix::Zero(rows, cols)});
  return entries_.back();
}

const RoundingTape::Entry& RoundingTape::replay(Index rows, Index cols) {
  if (mode_ != Mode::Replay) throw PreconditionError("rounding tape is not replaying");
  if (cursor_ >= entries_.size()) throw PreconditionError("rounding tape exhausted");
  const Entry& e = entries_[cursor_++];
  if (e.residual.rows() != rows || e.residual.cols() != cols) {
    throw DimensionError("rounding tape entry shape mismatch");
  }
  return e;
}

namespace {

struct TapeSlot {
  RoundingTape::Entry* rec = nullptr;
  const RoundingTape::Entry* rep = nullptr;
};

TapeSlot tape_slot(RoundingTape* tape, Index rows, Index cols) {
  TapeSlot slot;
  if (tape == nullptr) return slot;
  if (tape->mode() == RoundingTape::Mode::Record) {
    slot.rec = &tape->record(rows, cols);
  } else {
    slot.rep = &tape->replay(rows, cols);
  }
  return slot;
}

}  // namespace

Var fake_quant_uniform(const Var& x, const Var& scale, const Vector& zero_point, BitWidth bits,
                       Granularity granularity, RoundingTape* tape) {
  const Matrix& xv = x.value();
  const Matrix& sv = scale.value();
  check_scale_groups("fake_quant_uniform", granularity, xv, sv, zero_point);
  const TapeSlot slot = tape_slot(tape, xv.rows(), xv.cols());
  const int max_code = bits.max_code();
  Matrix y(xv.rows(), xv.cols());
  Matrix pass(xv.rows(), xv.cols());
  Matrix ds(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    for (Index c = 0; c < xv.cols(); ++c) {
      const Index g = group_index(granularity, r, c);
      const UniformElem e = uniform_element(xv(r, c), sv(g, 0), zero_point[g], max_code, slot.rec, slot.rep, r, c);
      y(r, c) = e.y;
      pass(r, c) = e.inside ? 1.0 : 0.0;
      ds(r, c) = e.ds;
    }
  }
  return make_node("fake_quant_uniform", std::move(y), {x, scale},
                   [pass = std::move(pass), ds = std::move(ds), granularity](NodeImpl& self) {
                     accumulate(parent(self, 0), self.grad.cwiseProduct(pass));
                     NodeImpl& sp = parent(self, 1);
                     if (!sp.requires_grad) return;
                     const Matrix contrib = self.grad.cwiseProduct(ds);
                     Matrix gs = Matrix::Zero(sp.value.rows(), 1);
                     switch (granularity) {
                       case Granularity::PerTensor: gs(0, 0) = contrib.sum(); break;
                       case Granularity::PerPatch: gs = contrib.rowwise().sum(); break;
                       case Granularity::PerChannel: gs = contrib.colwise().sum().transpose(); break;
                     }
                     accumulate(sp, gs);
                   });
}

Var fake_quant_log2(const Var& x, const Log2Params& params, RoundingTape* tape) {
  params.validate();
  const Matrix& xv = x.value();
  const TapeSlot slot = tape_slot(tape, xv.rows(), xv.cols());
  const int max_code = params.bits.max_code();
  Matrix y(xv.rows(), xv.cols());
  Matrix dx(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    for (Index c = 0; c < xv.cols(); ++c) {
      const double xp = params.shifted ? xv(r, c) - params.shift + params.epsilon : xv(r, c);
      double v;
      double slope = 0.0;
      if (slot.rep != nullptr) {
        const double clamped = slot.rep->clamped(r, c);
        if (!std::isnan(clamped)) {
          v = params.scale * std::exp2(-clamped);
        } else {
          slope = std::exp2(-slot.rep->residual(r, c));
          v = xp * slope;
        }
      } else {
        const double unclamped = log2_code_unclamped(xp, params.scale);
        const double q = clamp_code(unclamped, max_code);
        const bool inside = q == unclamped;
        v = params.scale * std::exp2(-q);
        if (inside) {
          const double delta = q + std::log2(xp / params.scale);  // q - u
          slope = std::exp2(-delta);
          if (slot.rec != nullptr) slot.rec->residual(r, c) = delta;
        } else if (slot.rec != nullptr) {
          slot.rec->clamped(r, c) = q;
        }
      }
      y(r, c) = params.shifted ? v + params.shift - params.epsilon : v;
      dx(r, c) = slope;
    }
  }
  return make_node("fake_quant_log2", std::move(y), {x}, [dx = std::move(dx)](NodeImpl& self) {
    accumulate(parent(self, 0), self.grad.cwiseProduct(dx));
  });
}

Var soft_weight(const Matrix& w, const Vector& scale, const Vector& zero_point, const Var& v, BitWidth bits) {
  require_same_shape("soft_weight", w, v.value());
  if (scale.size() != w.cols() || zero_point.size() != w.cols()) {
    throw DimensionError("soft_weight: per-channel params must match output columns");
  }
  const double max_code = bits.max_code();
  const Matrix& vv = v.value();
  Matrix y(w.rows(), w.cols());
  Matrix dv(w.rows(), w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const double s = scale[c];
      const double z = zero_point[c];
      const double code = std::floor(w(r, c) / s) + z + rectified_sigmoid(vv(r, c));
      const double q = std::clamp(code, 0.0, max_code);
      y(r, c) = s * (q - z);
      dv(r, c) = q == code ? s * rectified_sigmoid_grad(vv(r, c)) : 0.0;
    }
  }
  return make_node("soft_weight", std::move(y), {v}, [dv = std::move(dv)](NodeImpl& self) {
    accumulate(parent(self, 0), self.grad.cwiseProduct(dv));
  });
}

Var poq_linear(const Var& x, const Var& scale, const Vector& zero_point, BitWidth bits, const OutlierConfig& cfg,
               const Var& w, const Var& bias, RoundingTape* tape) {
  cfg.validate();
  const Matrix& xv = x.value();
  const Matrix& sv = scale.value();
  const Matrix& wv = w.value();
  check_scale_groups("poq_linear", Granularity::PerPatch, xv, sv, zero_point);
  if (xv.cols() != wv.rows()) throw DimensionError("poq_linear: input/weight mismatch");
  if (bias.rows() != 1 || bias.cols() != wv.cols()) throw DimensionError("poq_linear: bias mismatch");

  const TapeSlot slot = tape_slot(tape, xv.rows(), xv.cols());
  const int max_code = bits.max_code();
  SparseOutlierMatrix sparse(xv.rows(), xv.cols());
  Matrix dense = xv;
  Matrix outlier = Matrix::Zero(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    for (Index c = 0; c < xv.cols(); ++c) {
      const bool is_out = slot.rep != nullptr ? slot.rep->outlier(r, c) != 0.0 : cfg.is_outlier(xv(r, c));
      if (!is_out) continue;
      outlier(r, c) = 1.0;
      dense(r, c) = 0.0;
      if (xv(r, c) != 0.0) sparse.push_back_ordered(r, c, xv(r, c));
    }
  }
  if (slot.rec != nullptr) slot.rec->outlier = outlier;

  Matrix a(xv.rows(), xv.cols());
  Matrix pass(xv.rows(), xv.cols());
  Matrix ds(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    for (Index c = 0; c < xv.cols(); ++c) {
      const UniformElem e = uniform_element(dense(r, c), sv(r, 0), zero_point[r], max_code, slot.rec, slot.rep, r, c);
      a(r, c) = e.y;
      pass(r, c) = outlier(r, c) != 0.0 ? 1.0 : (e.inside ? 1.0 : 0.0);
      ds(r, c) = e.ds;
    }
  }
  Matrix y = gemm(a, wv);
  spmm_accumulate(sparse, wv, y);
  y.rowwise() += bias.value().row(0);

  return make_node("poq_linear", std::move(y), {x, scale, w, bias},
                   [a = std::move(a), sparse = std::move(sparse), pass = std::move(pass),
                    ds = std::move(ds)](NodeImpl& self) {
                     const Matrix& g = self.grad;
                     NodeImpl& xp = parent(self, 0);
                     NodeImpl& sp = parent(self, 1);
                     NodeImpl& wp = parent(self, 2);
                     NodeImpl& bp = parent(self, 3);
                     if (xp.requires_grad || sp.requires_grad) {
                       const Matrix ga = g * wp.value.transpose();
                       accumulate(xp, ga.cwiseProduct(pass));
                       if (sp.requires_grad) accumulate(sp, Matrix(ga.cwiseProduct(ds).rowwise().sum()));
                     }
                     if (wp.requires_grad) {
                       Matrix gw = a.transpose() * g;
                       for (const auto& e : sparse.entries()) gw.row(e.col) += e.value * g.row(e.row);
                       accumulate(wp, gw);
                     }
                     accumulate(bp, g.colwise().sum());
                   });
}

GradCheckResult check_gradients(const GraphFn& f, const std::vector<Matrix>& leaf_values, double step) {
  RoundingTape tape(RoundingTape::Mode::Record);
  std::vector<Var> leaves;
  leaves.reserve(leaf_values.size());
  for (const auto& v : leaf_values) leaves.push_back(leaf(v, true));
  const Var loss = f(leaves, &tape);
  backward(loss);

  GradCheckResult result;
  result.loss = loss.scalar();
  tape.set_mode(RoundingTape::Mode::Replay);
  std::vector<Matrix> values = leaf_values;
  auto evaluate = [&]() {
    std::vector<Var> frozen;
    frozen.reserve(values.size());
    for (const auto& v : values) frozen.push_back(constant(v));
    tape.rewind();
    return f(frozen, &tape).scalar();
  };
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Matrix analytic = leaves[i].grad();
    Matrix numeric(analytic.rows(), analytic.cols());
    for (Index j = 0; j < values[i].size(); ++j) {
      const double orig = values[i].data()[j];
      values[i].data()[j] = orig + step;
      const double up = evaluate();
      values[i].data()[j] = orig - step;
      const double down = evaluate();
      values[i].data()[j] = orig;
      numeric.data()[j] = (up - down) / (2.0 * step);
    }
    const double denom = std::max(analytic.norm(), numeric.norm());
    const double err = denom > 0.0 ? (analytic - numeric).norm() / denom : 0.0;
    result.leaf_errors.push_back(err);
    result.max_error = std::max(result.max_error, err);
  }
  return result;
}

}  // namespace adfq::ad
