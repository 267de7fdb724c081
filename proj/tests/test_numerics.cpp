#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cm3/numerics.hpp"

using namespace cm3;

namespace {

SpMat<double> random_sparse(Index rows, Index cols, double density, Rng& rng) {
  std::vector<Eigen::Triplet<double>> tri;
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      if (rng.uniform() < density) tri.emplace_back(i, j, rng.uniform(-1.0, 1.0));
    }
  }
  SpMat<double> m(rows, cols);
  m.setFromTriplets(tri.begin(), tri.end());
  return m;
}

MatD random_dense(Index rows, Index cols, Rng& rng) {
  MatD m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  }
  return m;
}

}  // namespace

TEST_CASE("spmm identity leaves dense unchanged") {
  SpMat<double> eye(3, 3);
  eye.setIdentity();
  Rng rng(1);
  const MatD b = random_dense(3, 2, rng);
  CHECK((spmm(eye, b) - b).norm() == doctest::Approx(0.0));
}

TEST_CASE("spmm of all-zero sparse is the zero matrix") {
  SpMat<double> z(4, 3);
  Rng rng(2);
  const MatD b = random_dense(3, 5, rng);
  CHECK(spmm(z, b).isZero(0.0));
}

TEST_CASE("spmm matches densify-and-multiply oracle") {
  Rng rng(3);
  const SpMat<double> a = random_sparse(5, 5, 0.4, rng);
  const MatD b = random_dense(5, 3, rng);
  const MatD dense_oracle = MatD(a) * b;
  CHECK((spmm(a, b) - dense_oracle).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("spmm rejects mismatched inner dimensions") {
  SpMat<double> a(3, 4);
  MatD b = MatD::Zero(3, 2);
  CHECK_THROWS_AS(spmm(a, b), ConfigError);
}

TEST_CASE("spmm distributes over dense addition") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const SpMat<double> a = random_sparse(6, 6, 0.5, rng);
    const MatD b = random_dense(6, 4, rng);
    const MatD c = random_dense(6, 4, rng);
    const MatD lhs = spmm(a, MatD(b + c));
    const MatD rhs = spmm(a, b) + spmm(a, c);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("l2_normalize_rows basic rows") {
  MatD m(2, 2);
  m << 3.0, 4.0, 0.0, 0.0;
  const MatD out = l2_normalize_rows(m);
  CHECK(out(0, 0) == doctest::Approx(0.6));
  CHECK(out(0, 1) == doctest::Approx(0.8));
  CHECK(out.row(1).isZero(0.0));
}

TEST_CASE("l2_normalize_rows random matrix yields unit or zero rows") {
  Rng rng(5);
  const MatD m = random_dense(100, 64, rng);
  const MatD out = l2_normalize_rows(m);
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    const bool unit = n >= 1.0 - 1e-6 && n <= 1.0 + 1e-6;
    CHECK((unit || n == 0.0));
  }
}

TEST_CASE("l2_normalize_rows is idempotent on non-degenerate rows") {
  Rng rng(6);
  const MatD m = random_dense(20, 8, rng);
  const MatD once = l2_normalize_rows(m);
  const MatD twice = l2_normalize_rows(once);
  CHECK((once - twice).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("log_mean_exp of constant zeros is zero") {
  std::vector<double> v{0.0, 0.0, 0.0};
  CHECK(log_mean_exp(v) == doctest::Approx(0.0));
}

TEST_CASE("log_mean_exp survives values that would overflow exp") {
  std::vector<double> v{1000.0, 1000.0};
  CHECK(log_mean_exp(v) == doctest::Approx(1000.0));
}

TEST_CASE("log_mean_exp matches extended-precision direct evaluation") {
  Rng rng(7);
  std::vector<double> v(50);
  for (auto& x : v) x = rng.uniform(-10.0, 10.0);
  long double acc = 0.0L;
  for (double x : v) acc += expl(static_cast<long double>(x));
  const double oracle = static_cast<double>(logl(acc / 50.0L));
  CHECK(std::abs(log_mean_exp(v) - oracle) < 1e-10);
}

TEST_CASE("log_mean_exp shift identity") {
  Rng rng(8);
  std::vector<double> v(30), shifted(30);
  const double c = 123.456;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = rng.uniform(-5.0, 5.0);
    shifted[i] = v[i] + c;
  }
  CHECK(log_mean_exp(shifted) == doctest::Approx(log_mean_exp(v) + c).epsilon(1e-12));
}

TEST_CASE("log_mean_exp rejects an empty sequence") {
  std::vector<double> v;
  CHECK_THROWS_AS(log_mean_exp(v), InvalidInputError);
}

TEST_CASE("beta_sample alpha=1 reduces to the uniform distribution") {
  Rng rng(9);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += beta_sample(rng, 1.0);
  CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("beta_sample stays strictly inside (0,1)") {
  Rng rng(10);
  for (double alpha : {0.2, 0.5, 1.0, 3.0}) {
    for (int i = 0; i < 2000; ++i) {
      const double s = beta_sample(rng, alpha);
      CHECK(s > 0.0);
      CHECK(s < 1.0);
    }
  }
}

TEST_CASE("beta_sample variance matches 1/(4(2a+1)) at alpha=0.5") {
  Rng rng(11);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double s = beta_sample(rng, 0.5);
    sum += s;
    sq += s * s;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(var - 0.125) < 0.01);
}

TEST_CASE("beta_sample rejects non-positive alpha") {
  Rng rng(12);
  CHECK_THROWS_AS(beta_sample(rng, 0.0), ConfigError);
  CHECK_THROWS_AS(beta_sample(rng, -1.0), ConfigError);
}

TEST_CASE("seeded Rng streams are bit-reproducible") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1234), d(1234);
  for (int i = 0; i < 100; ++i) {
    CHECK(c.uniform() == d.uniform());
    CHECK(c.normal() == d.normal());
  }
  Rng e(55), f(55);
  CHECK(e.fork(3).next_u64() == f.fork(3).next_u64());
  CHECK(e.fork(3).next_u64() != e.fork(4).next_u64());
}
