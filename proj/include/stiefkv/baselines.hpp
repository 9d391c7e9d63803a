#pragma once

#include <string>
#include <string_view>

#include "stiefkv/linalg.hpp"

namespace stiefkv::baselines {

enum class BaselineKind { k_svd, eigen, kq_svd };

std::string_view kind_name(BaselineKind kind);
/// Throws UsageError for an unknown tag.
BaselineKind parse_kind(std::string_view name);

/// Top-r right singular vectors of K (n x d_h); minimises ||K - K P P^T||_F.
Matrix ksvd_basis(const Matrix &k, std::size_t r);

/// Top-r right singular vectors of [K; Q].
Matrix eigen_basis(const Matrix &k, const Matrix &q, std::size_t r);

/// Same contract as ksvd_basis, applied to V.
Matrix eigen_value_basis(const Matrix &v, std::size_t r);

struct KqFactors {
  Matrix p_q; ///< d_h x r
  Matrix p_k; ///< d_h x r
};

/// Least-squares factors with (Q p_q)(K p_k)^T the rank-r truncation of Q K^T.
/// The factors are not orthonormal.
KqFactors kqsvd_factors(const Matrix &q, const Matrix &k, std::size_t r);

/// Value basis weighted through the output projection: with V = Q_1 R_V, the
/// span of R_V^{-1} U_r where U_r are the top-r left singular vectors of
/// R_V W_O, orthonormalised by QR. Needs V of full column rank.
Matrix kqsvd_value_basis(const Matrix &v, const Matrix &w_o_head, std::size_t r);

/// ||K - K P P^T||_F^2.
double reconstruction_error_sq(const Matrix &k, const Matrix &p);

} // namespace stiefkv::baselines
