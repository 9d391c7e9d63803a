#pragma once

#include <vector>

#include "stiefkv/linalg.hpp"

namespace stiefkv::detail {

/// Intermediate state of a Householder QR factorisation.
///
/// Step k reflects the working matrix A_k with H_k = I - tau_k u_k u_k^T,
/// where u_k = x + s_k alpha_k e_k, x = A_k[k:, k], alpha_k = ||x|| and
/// s_k = sign(x_k) (+1 at zero). Q is accumulated right to left as
/// B_k = H_k B_{k+1}, B_n = I[:, :n], and finally multiplied by
/// D = diag(-s_k) so that R has a nonnegative diagonal.
struct HouseholderTrace {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<Matrix> a_steps;             ///< A_0 .. A_{n-1}; filled when traced
  std::vector<Matrix> b_steps;             ///< B_1 .. B_n (index k holds B_{k+1})
  std::vector<std::vector<double>> u;      ///< length m, zero above row k
  std::vector<double> tau;
  std::vector<double> alpha;
  std::vector<double> sign;                ///< s_k
  Matrix q;                                ///< sign-fixed thin Q
  Matrix r;                                ///< sign-fixed R
};

/// Runs Householder QR. Throws RankDeficiencyError when some alpha_k falls
/// to or below kQrRankTolerance * ||a||_F. `keep_trace` retains the
/// intermediates needed for reverse-mode differentiation.
HouseholderTrace householder_qr(const Matrix &a, bool keep_trace);

/// Pullback of the Q factor: returns dL/dA given dL/dQ.
Matrix householder_q_pullback(const HouseholderTrace &trace, const Matrix &q_grad);

} // namespace stiefkv::detail
