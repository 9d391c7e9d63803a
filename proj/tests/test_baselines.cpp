#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "stiefkv/baselines.hpp"

using namespace stiefkv;
using namespace stiefkv::baselines;
namespace la = stiefkv::linalg;

namespace {

// Frobenius distance between the projectors of two bases (0 iff same span).
double subspace_distance(const Matrix &a, const Matrix &b) {
  return la::frobenius_norm(la::sub(la::projector(a), la::projector(b)));
}

double score_residual(const Matrix &q, const Matrix &k, const Matrix &pq, const Matrix &pk) {
  return la::frobenius_norm(
      la::sub(la::matmul_nt(q, k), la::matmul_nt(la::matmul(q, pq), la::matmul(k, pk))));
}

} // namespace

TEST_CASE("ksvd_basis") {
  Matrix k = Matrix::from_rows({{1, 0}, {2, 0}});
  Matrix p = ksvd_basis(k, 1);
  CHECK(std::abs(std::abs(p(0, 0)) - 1.0) < 1e-15);
  CHECK(std::abs(p(1, 0)) < 1e-15);
  CHECK(reconstruction_error_sq(k, p) < 1e-28);

  Matrix big = oracle::gaussian(32, 8, 1);
  CHECK(reconstruction_error_sq(big, ksvd_basis(big, 8)) < 1e-20);

  auto sv = oracle::gram_singular_values(big);
  const double discarded = sv[4] * sv[4] + sv[5] * sv[5] + sv[6] * sv[6] + sv[7] * sv[7];
  CHECK(std::abs(reconstruction_error_sq(big, ksvd_basis(big, 4)) - discarded) / discarded < 1e-8);

  CHECK_THROWS_AS(ksvd_basis(Matrix(4, 3), 2), DegenerateInputError);
  CHECK_THROWS_AS(ksvd_basis(big, 0), DimensionError);
  CHECK_THROWS_AS(ksvd_basis(big, 9), DimensionError);
}

TEST_CASE("Eckart-Young optimality against random bases") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Matrix k = oracle::gaussian(40, 8, 500 + seed);
    const std::size_t r = 1 + seed % 7;
    Matrix p = ksvd_basis(k, r);
    const double best = reconstruction_error_sq(k, p);
    Rng rng(seed);
    for (int trial = 0; trial < 100; ++trial)
      CHECK(best <= reconstruction_error_sq(k, la::random_orthonormal(8, r, rng)) + 1e-10);
  }
}

TEST_CASE("baseline bases are orthonormal and monotone in rank") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Matrix k = oracle::gaussian(20, 6, 10 + seed);
    Matrix q = oracle::gaussian(20, 6, 20 + seed);
    double prev_k = INFINITY, prev_e = INFINITY;
    for (std::size_t r = 1; r <= 6; ++r) {
      Matrix pk = ksvd_basis(k, r);
      Matrix pe = eigen_basis(k, q, r);
      CHECK(la::orthonormality_residual(pk) < 1e-10);
      CHECK(la::orthonormality_residual(pe) < 1e-10);
      const double ek = reconstruction_error_sq(k, pk);
      const double ee = reconstruction_error_sq(la::concat_rows(std::vector<Matrix>{k, q}), pe);
      CHECK(ek <= prev_k + 1e-12);
      CHECK(ee <= prev_e + 1e-12);
      prev_k = ek;
      prev_e = ee;
    }
  }
}

TEST_CASE("eigen_basis reductions") {
  Matrix k = oracle::gaussian(30, 8, 3);
  for (std::size_t r : {1u, 4u, 8u}) {
    CHECK(eigen_basis(k, k, r) == ksvd_basis(k, r));
    CHECK(eigen_basis(k, Matrix(5, 8), r) == ksvd_basis(k, r));
  }

  SUBCASE("a heavily scaled query block pulls the basis toward it") {
    Matrix q = oracle::gaussian(30, 8, 4);
    const Matrix target = ksvd_basis(q, 3);
    const double d1 = subspace_distance(eigen_basis(k, q, 3), target);
    const double d100 = subspace_distance(eigen_basis(k, la::scale(q, 100.0), 3), target);
    CHECK(d100 < d1);
    CHECK(d100 < 1e-2);
  }
}

TEST_CASE("eigen_value_basis delegates to ksvd_basis") {
  Matrix v = oracle::gaussian(25, 6, 9);
  CHECK(eigen_value_basis(v, 3) == ksvd_basis(v, 3));
  Matrix rank1 = la::matmul_nt(oracle::gaussian(10, 1, 1), oracle::gaussian(6, 1, 2));
  CHECK(reconstruction_error_sq(rank1, eigen_value_basis(rank1, 1)) <
        1e-20 * std::pow(la::frobenius_norm(rank1), 2));
  CHECK(reconstruction_error_sq(v, eigen_value_basis(v, 6)) < 1e-20);
}

TEST_CASE("kqsvd_factors") {
  SUBCASE("full rank reproduces the scores") {
    Matrix q = oracle::gaussian(8, 8, 1);
    Matrix k = oracle::gaussian(8, 8, 2);
    auto f = kqsvd_factors(q, k, 8);
    CHECK(score_residual(q, k, f.p_q, f.p_k) / la::frobenius_norm(la::matmul_nt(q, k)) < 1e-8);
  }

  SUBCASE("rank-one scores") {
    Matrix a = oracle::gaussian(12, 1, 3);
    Matrix b = oracle::gaussian(12, 1, 4);
    auto f = kqsvd_factors(a, b, 1);
    CHECK(score_residual(a, b, f.p_q, f.p_k) / la::frobenius_norm(la::matmul_nt(a, b)) < 1e-12);
  }

  SUBCASE("beats a shared K-SVD basis on the score residual") {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Matrix q = oracle::gaussian(32, 8, 100 + seed);
      Matrix k = oracle::gaussian(32, 8, 200 + seed);
      auto f = kqsvd_factors(q, k, 4);
      Matrix pk = ksvd_basis(k, 4);
      if (score_residual(q, k, f.p_q, f.p_k) <= score_residual(q, k, pk, pk))
        ++wins;
    }
    CHECK(wins >= 9);
  }

  SUBCASE("residual equals the truncated singular tail") {
    Matrix q = oracle::gaussian(20, 6, 7);
    Matrix k = oracle::gaussian(20, 6, 8);
    auto f = kqsvd_factors(q, k, 3);
    auto sv = oracle::gram_singular_values(la::matmul_nt(q, k));
    double tail = 0.0;
    for (std::size_t i = 3; i < sv.size(); ++i)
      tail += sv[i] * sv[i];
    CHECK(std::abs(std::pow(score_residual(q, k, f.p_q, f.p_k), 2) - tail) / tail < 1e-8);
  }

  Matrix ok = oracle::gaussian(10, 4, 1);
  Matrix deficient = la::matmul_nt(oracle::gaussian(10, 2, 2), oracle::gaussian(4, 2, 3));
  CHECK_THROWS_AS(kqsvd_factors(ok, deficient, 2), RankDeficiencyError);
  CHECK_THROWS_AS(kqsvd_factors(oracle::gaussian(3, 4, 1), ok, 2), DimensionError);
}

TEST_CASE("kqsvd_value_basis") {
  Matrix v = oracle::gaussian(30, 6, 11);
  for (std::size_t r = 1; r <= 6; ++r) {
    Matrix p = kqsvd_value_basis(v, Matrix::identity(6), r);
    CHECK(la::orthonormality_residual(p) < 1e-10);
    CHECK(subspace_distance(p, ksvd_basis(v, r)) < 1e-8);
  }

  Matrix w = oracle::gaussian(6, 10, 12);
  Matrix full = kqsvd_value_basis(v, w, 6);
  Matrix vw = la::matmul(v, w);
  CHECK(la::relative_error(vw, la::matmul(la::matmul(v, la::projector(full)), w)) < 1e-8);

  SUBCASE("annihilated coordinates are ignored") {
    Matrix half = w;
    for (std::size_t i = 3; i < 6; ++i)
      for (std::size_t j = 0; j < 10; ++j)
        half(i, j) = 0.0;
    Matrix p = kqsvd_value_basis(v, half, 3);
    Matrix kept = la::slice_cols(Matrix::identity(6), 0, 3);
    CHECK(subspace_distance(p, kept) < 1e-8);
    CHECK(la::relative_error(la::matmul(v, half),
                             la::matmul(la::matmul(v, la::projector(p)), half)) < 1e-8);
  }
}

TEST_CASE("kind tags") {
  for (auto k : {BaselineKind::k_svd, BaselineKind::eigen, BaselineKind::kq_svd})
    CHECK(parse_kind(kind_name(k)) == k);
  CHECK_THROWS_AS(parse_kind("pca"), UsageError);
}
