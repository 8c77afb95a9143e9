#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "adfq/error.hpp"

namespace adfq {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;
using IntMatrix = MatrixX<std::int32_t>;

/// Dense row-major n-dimensional array. Used for images and for on-disk
/// tensors; all math runs on 2-D Matrix views.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<Index> shape);
  Tensor(std::vector<Index> shape, Vector data);

  const std::vector<Index>& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index numel() const noexcept { return data_.size(); }
  Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  const Vector& data() const noexcept { return data_; }
  Vector& data() noexcept { return data_; }

  double at(Index i, Index j, Index k) const { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  double& at(Index i, Index j, Index k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }

  /// Row-major 2-D copy with the given extents (rows * cols == numel).
  Matrix reshaped(Index rows, Index cols) const;

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<Index> shape_;
  Vector data_;
};

std::string shape_string(const std::vector<Index>& shape);

/// Seeded generator. mt19937_64 output is fixed by the standard; the
/// real-valued transforms are implemented here so streams match across
/// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  Index uniform_int(Index n);
  /// Standard normal via Box-Muller (one draw per call).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Matrix normal_matrix(Index rows, Index cols, double stddev = 1.0);
  Matrix uniform_matrix(Index rows, Index cols, double lo, double hi);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Derive an independent stream seed from a base seed and a tag.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) noexcept;

}  // namespace adfq
