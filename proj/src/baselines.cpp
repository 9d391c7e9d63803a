#include "stiefkv/baselines.hpp"

#include <cmath>

namespace stiefkv::baselines {

namespace la = linalg;

std::string_view kind_name(BaselineKind kind) {
  switch (kind) {
  case BaselineKind::k_svd:
    return "k_svd";
  case BaselineKind::eigen:
    return "eigen";
  case BaselineKind::kq_svd:
    return "kq_svd";
  }
  return "?";
}

BaselineKind parse_kind(std::string_view name) {
  if (name == "k_svd")
    return BaselineKind::k_svd;
  if (name == "eigen")
    return BaselineKind::eigen;
  if (name == "kq_svd")
    return BaselineKind::kq_svd;
  throw UsageError("unknown baseline '" + std::string(name) + "' (expected k_svd, eigen, kq_svd)");
}

namespace {

void check_rank(std::size_t r, std::size_t d, const char *who) {
  if (r == 0 || r > d)
    throw DimensionError(std::string(who) + ": rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(d) + "]");
}

// Leading eigenvectors of a Gram matrix. Each column is signed so that its
// largest-magnitude entry is positive, which makes the result independent of
// the eigensolver's sign choices.
Matrix top_eigenvectors(const Matrix &gram, std::size_t r) {
  la::EigenResult e = la::symmetric_eigen(gram);
  Matrix p = la::slice_cols(e.vectors, 0, r);
  for (std::size_t j = 0; j < r; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.rows(); ++i)
      if (std::abs(p(i, j)) > std::abs(p(best, j)))
        best = i;
    if (p(best, j) < 0.0)
      for (std::size_t i = 0; i < p.rows(); ++i)
        p(i, j) = -p(i, j);
  }
  return p;
}

// U_r Sigma_r^{1/2}.
Matrix sqrt_scaled(const Matrix &u, const std::vector<double> &sigma, std::size_t r) {
  Matrix out(u.rows(), r);
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < r; ++j)
      out(i, j) = u(i, j) * std::sqrt(sigma[j]);
  return out;
}

} // namespace

Matrix ksvd_basis(const Matrix &k, std::size_t r) {
  check_rank(r, k.cols(), "ksvd_basis");
  if (k.rows() == 0 || la::frobenius_norm(k) == 0.0)
    throw DegenerateInputError("ksvd_basis: key matrix is all zero");
  return top_eigenvectors(la::matmul_tn(k, k), r);
}

Matrix eigen_basis(const Matrix &k, const Matrix &q, std::size_t r) {
  if (k.cols() != q.cols())
    throw DimensionError("eigen_basis: K and Q must share d_h");
  check_rank(r, k.cols(), "eigen_basis");
  if (la::frobenius_norm(k) == 0.0 && la::frobenius_norm(q) == 0.0)
    throw DegenerateInputError("eigen_basis: stacked matrix is all zero");
  // Gram of [K; Q] is K^T K + Q^T Q.
  return top_eigenvectors(la::add(la::matmul_tn(k, k), la::matmul_tn(q, q)), r);
}

Matrix eigen_value_basis(const Matrix &v, std::size_t r) { return ksvd_basis(v, r); }

KqFactors kqsvd_factors(const Matrix &q, const Matrix &k, std::size_t r) {
  if (q.cols() != k.cols())
    throw DimensionError("kqsvd_factors: Q and K must share d_h");
  const std::size_t d = q.cols();
  check_rank(r, d, "kqsvd_factors");
  if (q.rows() < d || k.rows() < d)
    throw DimensionError("kqsvd_factors: need at least d_h rows in Q and K");
  // Q = Q1 R_q, K = Q2 R_k, so Q K^T = Q1 (R_q R_k^T) Q2^T and the
  // least-squares maps Q^+ and K^+ reduce to R_q^{-1} Q1^T and R_k^{-1} Q2^T.
  const la::QrResult fq = la::qr_decompose(q);
  const la::QrResult fk = la::qr_decompose(k);
  const la::SvdResult s = la::svd(la::matmul_nt(fq.r, fk.r));
  KqFactors out;
  out.p_q = la::solve_upper(fq.r, sqrt_scaled(s.u, s.sigma, r));
  out.p_k = la::solve_upper(fk.r, sqrt_scaled(s.v, s.sigma, r));
  return out;
}

Matrix kqsvd_value_basis(const Matrix &v, const Matrix &w_o_head, std::size_t r) {
  const std::size_t d = v.cols();
  if (w_o_head.rows() != d)
    throw DimensionError("kqsvd_value_basis: W_O head block must have d_h rows");
  check_rank(r, d, "kqsvd_value_basis");
  if (v.rows() < d)
    throw DimensionError("kqsvd_value_basis: need at least d_h rows in V");
  const la::QrResult fv = la::qr_decompose(v);
  const la::SvdResult s = la::svd(la::matmul(fv.r, w_o_head));
  Matrix back = la::solve_upper(fv.r, la::slice_cols(s.u, 0, r));
  return la::qr_decompose(back).q;
}

double reconstruction_error_sq(const Matrix &k, const Matrix &p) {
  const double e = la::frobenius_norm(la::sub(k, la::matmul_nt(la::matmul(k, p), p)));
  return e * e;
}

} // namespace stiefkv::baselines
