#include "stiefkv/detail/householder.hpp"

#include <cmath>

namespace stiefkv::detail {

HouseholderTrace householder_qr(const Matrix &a, bool keep_trace) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n)
    throw DimensionError("qr: need rows >= cols, got " + std::to_string(m) + "x" +
                         std::to_string(n));
  HouseholderTrace t;
  t.m = m;
  t.n = n;
  t.u.assign(n, std::vector<double>(m, 0.0));
  t.tau.assign(n, 0.0);
  t.alpha.assign(n, 0.0);
  t.sign.assign(n, 1.0);

  const double tol = linalg::kQrRankTolerance * linalg::frobenius_norm(a);
  Matrix w = a;
  for (std::size_t k = 0; k < n; ++k) {
    if (keep_trace)
      t.a_steps.push_back(w);
    double ss = 0.0;
    for (std::size_t i = k; i < m; ++i)
      ss += w(i, k) * w(i, k);
    const double alpha = std::sqrt(ss);
    if (alpha <= tol)
      throw RankDeficiencyError("qr: column " + std::to_string(k) +
                                    " is numerically dependent (|r_kk| = " +
                                    std::to_string(alpha) + ")",
                                k);
    const double s = w(k, k) >= 0.0 ? 1.0 : -1.0;
    auto &u = t.u[k];
    for (std::size_t i = k; i < m; ++i)
      u[i] = w(i, k);
    u[k] += s * alpha;
    double uu = 0.0;
    for (std::size_t i = k; i < m; ++i)
      uu += u[i] * u[i];
    const double tau = 2.0 / uu;
    t.alpha[k] = alpha;
    t.sign[k] = s;
    t.tau[k] = tau;
    for (std::size_t j = k; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = k; i < m; ++i)
        d += u[i] * w(i, j);
      const double f = tau * d;
      for (std::size_t i = k; i < m; ++i)
        w(i, j) -= f * u[i];
    }
  }

  // B_n = first n columns of I; B_k = H_k B_{k+1}.
  Matrix b(m, n);
  for (std::size_t j = 0; j < n; ++j)
    b(j, j) = 1.0;
  if (keep_trace)
    t.b_steps.assign(n, Matrix());
  for (std::size_t k = n; k-- > 0;) {
    if (keep_trace)
      t.b_steps[k] = b;
    const auto &u = t.u[k];
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = k; i < m; ++i)
        d += u[i] * b(i, j);
      const double f = t.tau[k] * d;
      for (std::size_t i = k; i < m; ++i)
        b(i, j) -= f * u[i];
    }
  }

  // R_kk = -s_k alpha_k before the sign fix; flip so the diagonal is positive.
  t.q = Matrix(m, n);
  t.r = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const double d = -t.sign[j];
    for (std::size_t i = 0; i < m; ++i)
      t.q(i, j) = b(i, j) * d;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double d = -t.sign[i];
    t.r(i, i) = t.alpha[i];
    for (std::size_t j = i + 1; j < n; ++j)
      t.r(i, j) = w(i, j) * d;
  }
  return t;
}

namespace {

// Reverse through Y = H X with H = I - tau u u^T restricted to columns
// [col_begin, n). Accumulates u_bar, returns tau_bar contribution, and
// overwrites y_bar with x_bar.
double reflect_pullback(const std::vector<double> &u, double tau, std::size_t k,
                        const Matrix &x, Matrix &y_bar, std::vector<double> &u_bar,
                        std::size_t col_begin) {
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  double tau_bar = 0.0;
  for (std::size_t j = col_begin; j < n; ++j) {
    double w = 0.0; // u^T x_j
    double g = 0.0; // u^T y_bar_j
    for (std::size_t i = k; i < m; ++i) {
      w += u[i] * x(i, j);
      g += u[i] * y_bar(i, j);
    }
    tau_bar -= g * w;
    for (std::size_t i = k; i < m; ++i) {
      u_bar[i] -= tau * (y_bar(i, j) * w + x(i, j) * g);
      y_bar(i, j) -= tau * u[i] * g;
    }
  }
  return tau_bar;
}

} // namespace

Matrix householder_q_pullback(const HouseholderTrace &t, const Matrix &q_grad) {
  const std::size_t m = t.m;
  const std::size_t n = t.n;
  if (t.a_steps.size() != n || t.b_steps.size() != n)
    throw ContractError("householder_q_pullback: trace was not recorded");
  if (q_grad.rows() != m || q_grad.cols() != n)
    throw DimensionError("householder_q_pullback: gradient shape mismatch");

  std::vector<std::vector<double>> u_bar(n, std::vector<double>(m, 0.0));
  std::vector<double> tau_bar(n, 0.0);

  // Undo the sign fix, then walk the Q accumulation B_0 -> B_n.
  Matrix b_bar(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      b_bar(i, j) = q_grad(i, j) * -t.sign[j];
  for (std::size_t k = 0; k < n; ++k)
    tau_bar[k] += reflect_pullback(t.u[k], t.tau[k], k, t.b_steps[k], b_bar, u_bar[k], 0);

  // R carries no gradient, so the adjoint of the final working matrix is 0.
  Matrix a_bar(m, n);
  for (std::size_t k = n; k-- > 0;) {
    const Matrix &ak = t.a_steps[k];
    tau_bar[k] += reflect_pullback(t.u[k], t.tau[k], k, ak, a_bar, u_bar[k], k);
    const auto &u = t.u[k];
    auto &ub = u_bar[k];
    // tau = 2 / (u^T u)
    const double tt = t.tau[k] * t.tau[k];
    for (std::size_t i = k; i < m; ++i)
      ub[i] -= tau_bar[k] * tt * u[i];
    // u = x + s alpha e_k, alpha = ||x||
    const double coef = t.sign[k] * ub[k] / t.alpha[k];
    for (std::size_t i = k; i < m; ++i)
      a_bar(i, k) += ub[i] + coef * ak(i, k);
  }
  return a_bar;
}

} // namespace stiefkv::detail
