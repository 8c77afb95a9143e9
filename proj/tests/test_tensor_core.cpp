#include "doctest.h"

#include <algorithm>

#include "adfq/kernels.hpp"
#include "generators.hpp"
#include "oracles.hpp"

using namespace adfq;

namespace {
double max_rel(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - b.data()[i]);
    worst = std::max(worst, d / std::max(1.0, std::abs(b.data()[i])));
  }
  return worst;
}
}  // namespace

TEST_SUITE("tensor_core") {

TEST_CASE("tensor shape and data length agree") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.all_finite());
  CHECK_THROWS_AS(Tensor({2, 3}, Vector::Zero(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
  Tensor u({2, 3}, Vector::LinSpaced(6, 0, 5));
  const Matrix m = u.reshaped(3, 2);
  CHECK(m(2, 1) == 5.0);
  CHECK(m(1, 0) == 2.0);
}

TEST_CASE("gemm small cases") {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Matrix ones = Matrix::Ones(2, 1);
  Matrix r = gemm(a, ones);
  CHECK(r(0, 0) == 3.0);
  CHECK(r(1, 0) == 7.0);
  Matrix x = Rng(3).normal_matrix(3, 3);
  CHECK(gemm(Matrix::Identity(3, 3), x) == x);
  CHECK(gemm(x, Matrix::Identity(3, 3)) == x);
  CHECK_THROWS_AS(gemm(Matrix(2, 3), Matrix(2, 3)), DimensionError);
}

TEST_CASE("gemm vs triple loop on seeded 8x8") {
  Rng rng(42);
  Matrix a = rng.normal_matrix(8, 8), b = rng.normal_matrix(8, 8);
  CHECK(max_rel(gemm(a, b), oracle::gemm(a, b)) <= 1e-12);
}

TEST_CASE("gemm property: random shapes vs oracle, identity exact") {
  gen::for_all(200, 7, [](Rng& r, int) {
    const Index m = gen::extent(r, 1, 12), k = gen::extent(r, 1, 12), p = gen::extent(r, 1, 12);
    Matrix a = gen::matrix(r, m, k), b = gen::matrix(r, k, p);
    Matrix c = gemm(a, b), o = oracle::gemm(a, b);
    // relative to the magnitude of the summands
    Matrix mag = oracle::gemm(a.cwiseAbs(), b.cwiseAbs());
    for (Index i = 0; i < c.size(); ++i)
      REQUIRE(std::abs(c.data()[i] - o.data()[i]) <= 1e-12 * std::max(mag.data()[i], 1e-300));
    REQUIRE(gemm(a, Matrix::Identity(k, k)) == a);
  });
}

TEST_CASE("spmm cases") {
  Rng rng(1);
  Matrix b = rng.normal_matrix(3, 4);
  SparseOutlierMatrix empty(2, 3);
  CHECK(spmm(empty, b) == Matrix::Zero(2, 4));
  auto one = SparseOutlierMatrix::from_triplets(2, 3, {{0, 0, 2.0}});
  Matrix r = spmm(one, b);
  CHECK(r.row(0) == 2.0 * b.row(0));
  CHECK(r.row(1) == Matrix::Zero(1, 4));
  CHECK_THROWS_AS(spmm(one, Matrix(4, 4)), DimensionError);
}

TEST_CASE("sparse invariants enforced") {
  CHECK_THROWS_AS(SparseOutlierMatrix::from_triplets(2, 2, {{2, 0, 1.0}}), DimensionError);
  CHECK_THROWS_AS(SparseOutlierMatrix::from_triplets(2, 2, {{0, 0, 0.0}}), PreconditionError);
  CHECK_THROWS_AS(SparseOutlierMatrix::from_triplets(2, 2, {{1, 1, 1.0}, {1, 1, 2.0}}), PreconditionError);
}

TEST_CASE("spmm property: equals densify then gemm") {
  gen::for_all(100, 11, [](Rng& r, int c) {
    const Index m = gen::extent(r, 1, 60), k = gen::extent(r, 1, 60), p = gen::extent(r, 1, 10);
    const double density = c == 0 ? 0.005 : r.uniform(0.0, 0.3);
    std::vector<SparseOutlierMatrix::Entry> es;
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < k; ++j)
        if (r.uniform() < density) es.push_back({i, j, r.normal() * 100.0 + 1e-3});
    auto s = SparseOutlierMatrix::from_triplets(m, k, es);
    Matrix b = gen::matrix(r, k, p);
    Matrix got = spmm(s, b), want = oracle::gemm(s.densify(), b);
    Matrix mag = oracle::gemm(s.densify().cwiseAbs(), b.cwiseAbs());
    for (Index i = 0; i < got.size(); ++i)
      REQUIRE(std::abs(got.data()[i] - want.data()[i]) <= 1e-12 * std::max(mag.data()[i], 1e-300));
  });
}

TEST_CASE("spmm on 0.5% density 200x200") {
  Rng r(5);
  std::vector<SparseOutlierMatrix::Entry> es;
  for (Index i = 0; i < 200; ++i)
    for (Index j = 0; j < 200; ++j)
      if (r.uniform() < 0.005) es.push_back({i, j, r.normal() + 3.0});
  auto s = SparseOutlierMatrix::from_triplets(200, 200, es);
  Matrix b = r.normal_matrix(200, 16);
  CHECK(max_rel(spmm(s, b), oracle::gemm(s.densify(), b)) <= 1e-12);
}

TEST_CASE("layernorm cases") {
  Matrix g = Matrix::Ones(1, 4), z = Matrix::Zero(1, 4);
  Matrix c = Matrix::Constant(1, 4, 3.5);
  CHECK(layernorm(c, g, z) == Matrix::Zero(1, 4));
  Matrix x(1, 2);
  x << 1, -1;
  Matrix y = layernorm(x, Matrix::Ones(1, 2), Matrix::Zero(1, 2), 1e-300);
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y(0, 1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(layernorm(x, g, z), DimensionError);
  CHECK_THROWS_AS(layernorm(x, Matrix::Ones(1, 2), Matrix::Zero(1, 2), 0.0), PreconditionError);
}

TEST_CASE("layernorm statistics on random rows") {
  Rng r(9);
  Matrix x = r.normal_matrix(5, 32, 3.0);
  x.array() += 4.0;
  Matrix y = layernorm(x, Matrix::Ones(1, 32), Matrix::Zero(1, 32), 1e-12);
  for (Index i = 0; i < y.rows(); ++i) {
    const double mean = y.row(i).mean();
    const double var = (y.row(i).array() - mean).square().mean();
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(std::abs(var - 1.0) <= 1e-6);
  }
}

TEST_CASE("layernorm property: oracle agreement and shift invariance") {
  gen::for_all(150, 13, [](Rng& r, int) {
    const Index d = gen::extent(r, 2, 24);
    Matrix x = gen::matrix(r, gen::extent(r, 1, 6), d);
    Matrix g = r.normal_matrix(1, d), b = r.normal_matrix(1, d);
    Matrix y = layernorm(x, g, b, 1e-6);
    Matrix o = oracle::layernorm(x, g, b, 1e-6);
    REQUIRE((y - o).cwiseAbs().maxCoeff() <= 1e-9);
  });
  // shift invariance on rows whose spread is not swamped by the shift
  gen::for_all(150, 14, [](Rng& r, int) {
    const Index d = gen::extent(r, 2, 24);
    Matrix x = r.normal_matrix(gen::extent(r, 1, 6), d, r.uniform(0.1, 10.0));
    Matrix g = r.normal_matrix(1, d), b = r.normal_matrix(1, d);
    Matrix xs = x.array() + r.uniform(-10.0, 10.0);
    REQUIRE((layernorm(xs, g, b) - layernorm(x, g, b)).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, g.cwiseAbs().maxCoeff()));
  });
}

TEST_CASE("layernorm exact shift invariance with representable shift") {
  Rng r(15);
  Matrix x = r.normal_matrix(4, 16);
  Matrix g = Matrix::Ones(1, 16), b = Matrix::Zero(1, 16);
  Matrix xs = x.array() + 3.0;
  CHECK((layernorm(xs, g, b) - layernorm(x, g, b)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("gelu cases") {
  Matrix x(1, 3);
  x << 0.0, 10.0, -1.0;
  Matrix y = gelu(x);
  CHECK(y(0, 0) == 0.0);
  CHECK(std::abs(y(0, 1) - 10.0) <= 1e-9);
  CHECK(std::abs(y(0, 2) - oracle::gelu(-1.0)) <= 1e-15);
  // -1 * Phi(-1) to 16 digits
  CHECK(std::abs(y(0, 2) - (-0.15865525393145705)) <= 1e-15);
}

TEST_CASE("gelu property vs series erf") {
  gen::for_all(500, 17, [](Rng& r, int) {
    const double v = r.uniform(-8.0, 8.0);
    Matrix x = Matrix::Constant(1, 1, v);
    REQUIRE(std::abs(gelu(x)(0, 0) - oracle::gelu(v)) <= 1e-13 * std::max(1.0, std::abs(v)));
  });
}

TEST_CASE("softmax cases") {
  Matrix a(1, 2);
  a << 0, 0;
  CHECK(softmax_rows(a) == Matrix::Constant(1, 2, 0.5));
  Matrix b(1, 2);
  b << 1000, 0;
  Matrix sb = softmax_rows(b);
  CHECK(sb.allFinite());
  CHECK(sb(0, 0) == 1.0);
  CHECK(sb(0, 1) <= 1e-300);
  Rng r(21);
  Matrix c = r.normal_matrix(1, 4);
  CHECK((softmax_rows(c) - oracle::softmax_rows(c)).cwiseAbs().maxCoeff() <= 1e-12);
  Matrix col = softmax(c.transpose().eval(), Axis::Rows);
  CHECK((col.transpose() - oracle::softmax_rows(c)).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("softmax property: simplex and shift invariance") {
  gen::for_all(200, 23, [](Rng& r, int) {
    Matrix x = gen::any_matrix(r, 6, 12);
    x = x.cwiseMax(-300.0).cwiseMin(300.0);
    Matrix p = softmax_rows(x);
    REQUIRE(p.minCoeff() >= 0.0);
    for (Index i = 0; i < p.rows(); ++i) REQUIRE(std::abs(p.row(i).sum() - 1.0) <= 1e-12);
    Matrix xs = x.array() + r.uniform(-5.0, 5.0);
    REQUIRE((softmax_rows(xs) - p).cwiseAbs().maxCoeff() <= 1e-12);
  });
}

TEST_CASE("reduce_minmax cases and sort oracle") {
  Matrix x(2, 2);
  x << 1, 5, 2, 4;
  auto mm = reduce_minmax(x, Grouping::Row);
  CHECK(mm.mins(0) == 1);
  CHECK(mm.mins(1) == 2);
  CHECK(mm.maxs(0) == 5);
  CHECK(mm.maxs(1) == 4);
  auto c = reduce_minmax(Matrix::Constant(3, 3, 2.0), Grouping::Tensor);
  CHECK(c.mins(0) == c.maxs(0));
  CHECK_THROWS_AS(reduce_minmax(Matrix(0, 0), Grouping::Tensor), PreconditionError);

  gen::for_all(100, 29, [](Rng& r, int) {
    Matrix m = gen::any_matrix(r, 7, 7);
    auto sorted = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return std::pair{v.front(), v.back()};
    };
    auto rows = reduce_minmax(m, Grouping::Row);
    auto cols = reduce_minmax(m, Grouping::Column);
    auto all = reduce_minmax(m, Grouping::Tensor);
    for (Index i = 0; i < m.rows(); ++i) {
      std::vector<double> v(m.row(i).data(), m.row(i).data() + m.cols());
      auto [lo, hi] = sorted(v);
      REQUIRE(rows.mins(i) == lo);
      REQUIRE(rows.maxs(i) == hi);
    }
    for (Index j = 0; j < m.cols(); ++j) {
      std::vector<double> v;
      for (Index i = 0; i < m.rows(); ++i) v.push_back(m(i, j));
      auto [lo, hi] = sorted(v);
      REQUIRE(cols.mins(j) == lo);
      REQUIRE(cols.maxs(j) == hi);
    }
    auto [lo, hi] = sorted(std::vector<double>(m.data(), m.data() + m.size()));
    REQUIRE(all.mins(0) == lo);
    REQUIRE(all.maxs(0) == hi);
  });
}

TEST_CASE("kernels are bit-deterministic") {
  Rng r(31);
  Matrix a = r.normal_matrix(17, 33), b = r.normal_matrix(33, 9);
  Matrix g = r.normal_matrix(1, 33), bb = r.normal_matrix(1, 33);
  CHECK(gemm(a, b) == gemm(a, b));
  CHECK(layernorm(a, g, bb) == layernorm(a, g, bb));
  CHECK(gelu(a) == gelu(a));
  CHECK(softmax_rows(a) == softmax_rows(a));
}

TEST_CASE("rng streams are reproducible and seed-dependent") {
  Rng a(123), b(123), c(124);
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  CHECK(a.normal() != c.normal());
  CHECK(mix_seed(1, 2) != mix_seed(1, 3));
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  // mt19937_64 fixed point: 10000th output for the default seed
  std::mt19937_64 e;
  e.discard(9999);
  CHECK(e() == 9981545732273789042ULL);
  Rng u(77);
  for (int i = 0; i < 1000; ++i) {
    const Index k = u.uniform_int(7);
    REQUIRE(k >= 0);
    REQUIRE(k < 7);
  }
}

}  // TEST_SUITE
