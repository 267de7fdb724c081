#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cm3/fusion.hpp"

using namespace cm3;

namespace {

MatD random_dense(Index rows, Index cols, Rng& rng) {
  MatD m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  }
  return m;
}

Vec<double> random_unit(Index d, Rng& rng) {
  Vec<double> v(d);
  for (Index i = 0; i < d; ++i) v(i) = rng.normal();
  return v / v.norm();
}

double angle_between(const Vec<double>& a, const Vec<double>& b) {
  return std::acos(std::clamp(a.dot(b), -1.0, 1.0));
}

}  // namespace

TEST_CASE("project_modality with identity weights normalizes non-negative rows") {
  MatD x(1, 3);
  x << 1.0, 2.0, 2.0;
  const MatD w1 = MatD::Identity(3, 3);
  const MatD b1 = MatD::Zero(1, 3);
  const MatD w2 = MatD::Identity(3, 3);
  const MatD out = project_modality(x, w1, b1, w2, 0.01);
  CHECK(out(0, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(out(0, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(out(0, 2) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("project_modality preserves the zero-row degenerate case") {
  MatD x = MatD::Zero(2, 3);
  x.row(1) << 1.0, 0.0, 0.0;
  const MatD w1 = MatD::Identity(3, 3);
  const MatD b1 = MatD::Zero(1, 3);
  const MatD w2 = MatD::Identity(3, 3);
  const MatD out = project_modality(x, w1, b1, w2, 0.01);
  CHECK(out.row(0).isZero(0.0));
  CHECK(out.row(1).norm() == doctest::Approx(1.0));
}

TEST_CASE("project_modality yields unit rows on random inputs") {
  Rng rng(1);
  const MatD x = random_dense(50, 10, rng);
  const MatD w1 = random_dense(10, 16, rng);
  const MatD b1 = random_dense(1, 16, rng);
  const MatD w2 = random_dense(16, 8, rng);
  const MatD out = project_modality(x, w1, b1, w2, 0.01);
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    CHECK((std::abs(n - 1.0) < 1e-6 || n == 0.0));
  }
}

TEST_CASE("project_modality rejects inconsistent shapes") {
  MatD x = MatD::Zero(2, 3);
  MatD w1 = MatD::Zero(4, 5);  // wrong input dim
  MatD b1 = MatD::Zero(1, 5);
  MatD w2 = MatD::Zero(5, 2);
  CHECK_THROWS_AS(project_modality(x, w1, b1, w2, 0.01), ConfigError);
}

TEST_CASE("slerp endpoints are forced by the definition") {
  Rng rng(2);
  const Vec<double> a = random_unit(8, rng);
  const Vec<double> b = random_unit(8, rng);
  CHECK((slerp(a, b, 1.0) - a).norm() < 1e-12);
  CHECK((slerp(a, b, 0.0) - b).norm() < 1e-12);
}

TEST_CASE("slerp halves the orthogonal pair symmetrically") {
  Vec<double> a(2), b(2);
  a << 1.0, 0.0;
  b << 0.0, 1.0;
  const Vec<double> mid = slerp(a, b, 0.5);
  CHECK(mid(0) == doctest::Approx(std::sqrt(2.0) / 2.0));
  CHECK(mid(1) == doctest::Approx(std::sqrt(2.0) / 2.0));
}

TEST_CASE("slerp of random unit pairs in R^64 stays on the sphere") {
  Rng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Vec<double> a = random_unit(64, rng);
    const Vec<double> b = random_unit(64, rng);
    const double lambda = rng.uniform();
    worst = std::max(worst, std::abs(slerp(a, b, lambda).norm() - 1.0));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("slerp rejects inputs off the sphere") {
  Rng rng(4);
  const Vec<double> a = random_unit(4, rng);
  Vec<double> b = random_unit(4, rng);
  b *= 1.01;
  CHECK_THROWS_AS(slerp(a, b, 0.5), InvalidInputError);
}

TEST_CASE("slerp swap symmetry") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const Vec<double> a = random_unit(16, rng);
    const Vec<double> b = random_unit(16, rng);
    const double lambda = rng.uniform();
    CHECK((slerp(a, b, lambda) - slerp(b, a, 1.0 - lambda)).norm() < 1e-9);
  }
}

TEST_CASE("slerp geodesic property") {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const Vec<double> a = random_unit(16, rng);
    const Vec<double> b = random_unit(16, rng);
    const double theta = angle_between(a, b);
    if (theta < 1e-2 || theta > M_PI - 1e-2) continue;
    const double lambda = rng.uniform(0.05, 0.95);
    const Vec<double> r = slerp(a, b, lambda);
    CHECK(angle_between(a, r) == doctest::Approx((1.0 - lambda) * theta).epsilon(1e-6));
  }
}

TEST_CASE("near-parallel fallback stays continuous with normalized lerp") {
  Rng rng(7);
  const Vec<double> a = random_unit(8, rng);
  // rotate a by a tiny angle towards an orthogonal direction
  Vec<double> dir = random_unit(8, rng);
  dir = (dir - dir.dot(a) * a).normalized();
  for (double eps : {1e-5, 3e-5, 1e-6}) {
    const Vec<double> b = (std::cos(eps) * a + std::sin(eps) * dir).normalized();
    const Vec<double> s = slerp(a, b, 0.37);
    Vec<double> lin = 0.37 * a + 0.63 * b;
    lin.normalize();
    CHECK((s - lin).norm() < 1e-5);
  }
}

TEST_CASE("fuse of a single modality is the identity") {
  Rng rng(8);
  const Vec<double> v = random_unit(12, rng);
  FusionConfig cfg;
  Rng sampler(9);
  CHECK((fuse<double>({v}, cfg, sampler) - v).norm() == 0.0);
}

TEST_CASE("fuse of identical modalities is a fixed point") {
  Rng rng(10);
  const Vec<double> v = random_unit(12, rng);
  FusionConfig cfg;
  Rng sampler(11);
  const Vec<double> out = fuse<double>({v, v, v}, cfg, sampler);
  CHECK((out - v).norm() < 1e-9);
}

TEST_CASE("fuse chain matches the unrolled two-call oracle") {
  Rng rng(12);
  const Vec<double> v0 = random_unit(10, rng);
  const Vec<double> v1 = random_unit(10, rng);
  const Vec<double> v2 = random_unit(10, rng);
  FusionConfig cfg;
  cfg.lambda_policy = LambdaPolicy::Fixed;
  cfg.fixed_lambda = 0.5;
  Rng sampler(13);
  const Vec<double> got = fuse<double>({v0, v1, v2}, cfg, sampler);
  const Vec<double> oracle = slerp(v2, slerp(v1, v0, 0.5), 0.5);
  CHECK((got - oracle).norm() < 1e-9);
}

TEST_CASE("fuse rejects an empty modality list") {
  FusionConfig cfg;
  Rng sampler(14);
  CHECK_THROWS_AS(fuse<double>({}, cfg, sampler), InvalidInputError);
}

TEST_CASE("hypersphere closure holds for chains of length 1 to 5") {
  Rng rng(15);
  double worst = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int m = 1 + static_cast<int>(rng.index(5));
    std::vector<Vec<double>> vs;
    for (int k = 0; k < m; ++k) vs.push_back(random_unit(16, rng));
    FusionConfig cfg;
    cfg.lambda_policy = LambdaPolicy::Fixed;
    cfg.fixed_lambda = rng.uniform();
    Rng sampler(trial);
    worst = std::max(worst, std::abs(fuse<double>(vs, cfg, sampler).norm() - 1.0));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("fuse_rows matches vector-level fuse row by row") {
  Rng rng(16);
  const Index n = 7, d = 9;
  MatD a(n, d), b(n, d);
  for (Index i = 0; i < n; ++i) {
    a.row(i) = random_unit(d, rng).transpose();
    b.row(i) = random_unit(d, rng).transpose();
  }
  const MatD fused = fuse_rows<double>({&a, &b}, 0.3);
  for (Index i = 0; i < n; ++i) {
    const Vec<double> oracle =
        slerp<double>(b.row(i).transpose(), a.row(i).transpose(), 0.3);
    CHECK((fused.row(i).transpose() - oracle).norm() < 1e-12);
  }
}

TEST_CASE("fuse_rows_linear is the plain convex combination") {
  Rng rng(17);
  MatD a = random_dense(4, 5, rng);
  MatD b = random_dense(4, 5, rng);
  const MatD out = fuse_rows_linear<double>({&a, &b}, 0.25);
  CHECK((out - (0.25 * b + 0.75 * a)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sample_lambda honours the policy") {
  FusionConfig cfg;
  cfg.lambda_policy = LambdaPolicy::Fixed;
  cfg.fixed_lambda = 0.42;
  Rng rng(18);
  CHECK(sample_lambda(cfg, rng) == 0.42);
  cfg.lambda_policy = LambdaPolicy::SamplePerStep;
  cfg.alpha = 1.0;
  const double s = sample_lambda(cfg, rng);
  CHECK(s > 0.0);
  CHECK(s < 1.0);
}

TEST_CASE("fusion config validation") {
  FusionConfig cfg;
  cfg.alpha = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = FusionConfig{};
  cfg.fixed_lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = FusionConfig{};
  cfg.singular_tol = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
