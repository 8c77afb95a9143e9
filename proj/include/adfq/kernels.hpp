#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "adfq/tensor.hpp"

namespace adfq {

namespace detail {
inline std::string dims(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }
}  // namespace detail

/// Dense product a * b.
template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> gemm(const Eigen::MatrixBase<DerivedA>& a,
                                        const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("gemm: inner dimensions differ (" + detail::dims(a.rows(), a.cols()) + " * " +
                         detail::dims(b.rows(), b.cols()) + ")");
  }
  MatrixX<typename DerivedA::Scalar> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// Coordinate-format sparse matrix holding full-precision outliers.
/// Entries are kept sorted by (row, col); indices are unique and values nonzero.
template <typename Scalar>
class BasicSparseOutlier {
 public:
  struct Entry {
    Index row;
    Index col;
    Scalar value;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  BasicSparseOutlier() = default;
  BasicSparseOutlier(Index rows, Index cols) : rows_(rows), cols_(cols) {}

  /// Builds from unordered triplets, validating every invariant.
  static BasicSparseOutlier from_triplets(Index rows, Index cols, std::vector<Entry> entries) {
    BasicSparseOutlier s(rows, cols);
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); });
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      if (e.row < 0 || e.row >= rows || e.col < 0 || e.col >= cols) {
        throw DimensionError("sparse entry (" + std::to_string(e.row) + "," + std::to_string(e.col) +
                             ") outside " + detail::dims(rows, cols));
      }
      if (e.value == Scalar(0)) throw PreconditionError("sparse entry with zero value");
      if (i > 0 && entries[i - 1].row == e.row && entries[i - 1].col == e.col) {
        throw PreconditionError("duplicate sparse entry");
      }
    }
    s.entries_ = std::move(entries);
    return s;
  }

  /// Appends an entry; caller guarantees row-major order.
  void push_back_ordered(Index row, Index col, Scalar value) { entries_.push_back({row, col, value}); }

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index nnz() const noexcept { return static_cast<Index>(entries_.size()); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  double density() const {
    const double total = static_cast<double>(rows_) * static_cast<double>(cols_);
    return total > 0 ? static_cast<double>(nnz()) / total : 0.0;
  }

  MatrixX<Scalar> densify() const {
    MatrixX<Scalar> out = MatrixX<Scalar>::Zero(rows_, cols_);
    for (const auto& e : entries_) out(e.row, e.col) = e.value;
    return out;
  }

  friend bool operator==(const BasicSparseOutlier&, const BasicSparseOutlier&) = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<Entry> entries_;
};

using SparseOutlierMatrix = BasicSparseOutlier<double>;

/// out += s * b. Entries are visited in row-major order, so the result is
/// deterministic; with no entries `out` is untouched.
template <typename Scalar, typename DerivedB, typename DerivedOut>
void spmm_accumulate(const BasicSparseOutlier<Scalar>& s, const Eigen::MatrixBase<DerivedB>& b,
                     Eigen::MatrixBase<DerivedOut>& out) {
  if (s.cols() != b.rows() || out.rows() != s.rows() || out.cols() != b.cols()) {
    throw DimensionError("spmm: " + detail::dims(s.rows(), s.cols()) + " * " + detail::dims(b.rows(), b.cols()) +
                         " into " + detail::dims(out.rows(), out.cols()));
  }
  for (const auto& e : s.entries()) out.row(e.row) += e.value * b.row(e.col);
}

template <typename Scalar, typename DerivedB>
MatrixX<Scalar> spmm(const BasicSparseOutlier<Scalar>& s, const Eigen::MatrixBase<DerivedB>& b) {
  if (s.cols() != b.rows()) {
    throw DimensionError("spmm: inner dimensions differ (" + detail::dims(s.rows(), s.cols()) + " * " +
                         detail::dims(b.rows(), b.cols()) + ")");
  }
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(s.rows(), b.cols());
  spmm_accumulate(s, b, out);
  return out;
}

inline constexpr double kLayerNormEps = 1e-12;

/// Row-wise LayerNorm with biased variance.
template <typename Derived, typename DerivedG, typename DerivedB>
MatrixX<typename Derived::Scalar> layernorm(const Eigen::MatrixBase<Derived>& x, const Eigen::MatrixBase<DerivedG>& gamma,
                                            const Eigen::MatrixBase<DerivedB>& beta,
                                            typename Derived::Scalar eps = kLayerNormEps) {
  using Scalar = typename Derived::Scalar;
  if (gamma.size() != x.cols() || beta.size() != x.cols()) {
    throw DimensionError("layernorm: affine size " + std::to_string(gamma.size()) + " vs last axis " +
                         std::to_string(x.cols()));
  }
  if (!(eps > 0)) throw PreconditionError("layernorm: eps must be positive");
  MatrixX<Scalar> out(x.rows(), x.cols());
  const Scalar inv_d = Scalar(1) / static_cast<Scalar>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() * inv_d;
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() * inv_d;
    const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
    out.row(r) = (centered * inv_std * gamma.reshaped().transpose().array() + beta.reshaped().transpose().array()).matrix();
  }
  return out;
}

/// Standard normal CDF via erfc.
template <typename Scalar>
Scalar normal_cdf(Scalar x) {
  return Scalar(0.5) * std::erfc(-x / std::numbers::sqrt2_v<Scalar>);
}

template <typename Scalar>
Scalar normal_pdf(Scalar x) {
  return std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
}

/// Exact GELU: x * Phi(x).
template <typename Derived>
MatrixX<typename Derived::Scalar> gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return v * normal_cdf(v); });
}

/// Softmax along each row with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

enum class Axis { Rows = 0, Cols = 1 };

/// Softmax normalizing along `axis` (Cols: each row sums to 1).
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& x, Axis axis = Axis::Cols) {
  if (axis == Axis::Cols) return softmax_rows(x);
  MatrixX<typename Derived::Scalar> t = x.transpose();
  return softmax_rows(t).transpose();
}

enum class Grouping { Tensor, Row, Column };

template <typename Scalar>
struct MinMax {
  VectorX<Scalar> mins;
  VectorX<Scalar> maxs;
};

/// Exact extrema per group (one group, one per row, or one per column).
template <typename Derived>
MinMax<typename Derived::Scalar> reduce_minmax(const Eigen::MatrixBase<Derived>& x, Grouping grouping) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw PreconditionError("reduce_minmax: empty group");
  MinMax<Scalar> mm;
  switch (grouping) {
    case Grouping::Tensor:
      mm.mins = VectorX<Scalar>::Constant(1, x.minCoeff());
      mm.maxs = VectorX<Scalar>::Constant(1, x.maxCoeff());
      break;
    case Grouping::Row:
      mm.mins = x.rowwise().minCoeff();
      mm.maxs = x.rowwise().maxCoeff();
      break;
    case Grouping::Column:
      mm.mins = x.colwise().minCoeff().transpose();
      mm.maxs = x.colwise().maxCoeff().transpose();
      break;
  }
  return mm;
}

}  // namespace adfq
