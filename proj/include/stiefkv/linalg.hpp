#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stiefkv/errors.hpp"

namespace stiefkv {

/// Dense row-major matrix of doubles.
///
/// Every quantity in the toolkit (activations, weights, projection bases)
/// travels as a Matrix. Shapes are checked by the free functions in
/// `stiefkv::linalg`; the class itself only guarantees `data().size() ==
/// rows() * cols()`.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double &operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  bool same_shape(const Matrix &other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix &a, const Matrix &b) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// xoshiro256++ generator.
///
/// State is seeded by running splitmix64 four times from the 64-bit seed:
///   z = (x += 0x9e3779b97f4a7c15);
///   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9;
///   z = (z ^ (z >> 27)) * 0x94d049bb133111eb;
///   s[i] = z ^ (z >> 31);
/// Each draw returns rotl(s0 + s3, 23) + s0 and then advances the state
/// with the reference xoshiro256++ update. `uniform()` maps the top 53 bits
/// to [0, 1); `normal()` is Box-Muller from two uniforms,
/// sqrt(-2 ln(1 - u1)) * cos(2 pi u2), one normal per two draws.
class Rng {
public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();
  double normal();
  /// Uniform integer in [0, bound) by rejection on the top bits.
  std::uint64_t below(std::uint64_t bound);

  std::uint64_t seed() const noexcept { return seed_; }

private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

/// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

namespace linalg {

struct QrResult {
  Matrix q; ///< m x n, orthonormal columns
  Matrix r; ///< n x n, upper triangular with nonnegative diagonal
};

struct SvdResult {
  Matrix u;                  ///< m x k
  std::vector<double> sigma; ///< k values, descending
  Matrix v;                  ///< n x k
};

struct EigenResult {
  std::vector<double> values; ///< descending
  Matrix vectors;             ///< columns are eigenvectors
};

inline constexpr double kQrRankTolerance = 1e-10;
inline constexpr double kSvdOffDiagonalTolerance = 1e-12;
inline constexpr int kSvdMaxSweeps = 100;

Matrix matmul(const Matrix &a, const Matrix &b);
/// a^T * b without materialising the transpose.
Matrix matmul_tn(const Matrix &a, const Matrix &b);
/// a * b^T without materialising the transpose.
Matrix matmul_nt(const Matrix &a, const Matrix &b);
Matrix transpose(const Matrix &a);
Matrix add(const Matrix &a, const Matrix &b);
Matrix sub(const Matrix &a, const Matrix &b);
Matrix scale(const Matrix &a, double factor);
Matrix hadamard(const Matrix &a, const Matrix &b);

double frobenius_norm(const Matrix &a);
double relative_error(const Matrix &reference, const Matrix &approx);
/// ||P^T P - I||_F.
double orthonormality_residual(const Matrix &p);
bool all_finite(const Matrix &a);

Matrix slice_cols(const Matrix &a, std::size_t begin, std::size_t count);
Matrix slice_rows(const Matrix &a, std::size_t begin, std::size_t count);
Matrix concat_rows(std::span<const Matrix> blocks);
Matrix concat_cols(std::span<const Matrix> blocks);
Matrix truncate_columns(const Matrix &p, std::size_t r);

/// Householder QR, thin factors, diag(R) >= 0.
QrResult qr_decompose(const Matrix &a);
/// One-sided Jacobi SVD.
SvdResult svd(const Matrix &a);
/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
EigenResult symmetric_eigen(const Matrix &a);

/// Solves R X = B for upper-triangular R.
Matrix solve_upper(const Matrix &r, const Matrix &b);
/// Extends the orthonormal columns of `q` to `total` columns.
Matrix complete_basis(const Matrix &q, std::size_t total);
/// d x r matrix with orthonormal columns, Haar distributed.
Matrix random_orthonormal(std::size_t d, std::size_t r, Rng &rng);
Matrix random_gaussian(std::size_t rows, std::size_t cols, Rng &rng, double stddev = 1.0);
/// P P^T.
Matrix projector(const Matrix &p);

/// Shortest decimal that round-trips to the same double.
std::string format_real(double x);
std::string to_text(const Matrix &a);
Matrix from_text(const std::string &text);

} // namespace linalg
} // namespace stiefkv
