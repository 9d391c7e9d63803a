#pragma once

// Test-only reference implementations. Nothing in here calls into the
// library's factorisations; Eigen is used where a mature solver is needed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "stiefkv/linalg.hpp"

namespace oracle {

using stiefkv::Matrix;

inline Matrix triple_loop_matmul(const Matrix &a, const Matrix &b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k)
        s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Eigen::MatrixXd to_eigen(const Matrix &a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      m(i, j) = a(i, j);
  return m;
}

inline Matrix from_eigen(const Eigen::MatrixXd &m) {
  Matrix a(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      a(i, j) = m(i, j);
  return a;
}

/// Singular values as square roots of the eigenvalues of A^T A, descending.
inline std::vector<double> gram_singular_values(const Matrix &a) {
  Eigen::MatrixXd m = to_eigen(a);
  Eigen::MatrixXd g = m.transpose() * m;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  std::vector<double> s;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
    s.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  std::sort(s.rbegin(), s.rend());
  return s;
}

/// Orthogonal projector onto the column span of a full-column-rank matrix:
/// A (A^T A)^{-1} A^T.
inline Matrix span_projector(const Matrix &a) {
  Eigen::MatrixXd m = to_eigen(a);
  Eigen::MatrixXd p = m * (m.transpose() * m).inverse() * m.transpose();
  return from_eigen(p);
}

inline double max_abs_diff(const Matrix &a, const Matrix &b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

inline Matrix gaussian(std::size_t r, std::size_t c, std::uint64_t seed) {
  stiefkv::Rng rng(seed);
  return stiefkv::linalg::random_gaussian(r, c, rng);
}

} // namespace oracle
