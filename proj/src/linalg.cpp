#include "stiefkv/linalg.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "stiefkv/detail/householder.hpp"

namespace stiefkv {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols)
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto &row : rows) {
    if (row.size() != c)
      throw DimensionError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

// ---------------------------------------------------------------------------
// Rng

namespace {

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

std::uint64_t splitmix64(std::uint64_t &x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

} // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto &s : s_)
    s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  const double u1 = 1.0 - uniform(); // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0)
    throw ContractError("Rng::below: bound must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit)
      return x % bound;
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0xd1b54a32d192ed03ULL);
  splitmix64(x);
  return splitmix64(x);
}

namespace linalg {

namespace {

void require(bool ok, const char *op, const std::string &detail) {
  if (!ok)
    throw DimensionError(std::string(op) + ": " + detail);
}

std::string shape(const Matrix &a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

} // namespace

Matrix matmul(const Matrix &a, const Matrix &b) {
  require(a.cols() == b.rows(), "matmul", shape(a) + " * " + shape(b));
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  // i-k-j order keeps the per-entry summation order of the plain triple loop.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double *ci = c.data().data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double *bk = b.data().data() + k * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix &a, const Matrix &b) {
  require(a.rows() == b.rows(), "matmul_tn", shape(a) + "^T * " + shape(b));
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.cols(); ++i) {
    double *ci = c.data().data() + i * n;
    for (std::size_t k = 0; k < a.rows(); ++k) {
      const double aki = a(k, i);
      const double *bk = b.data().data() + k * n;
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += aki * bk[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix &a, const Matrix &b) {
  require(a.cols() == b.cols(), "matmul_nt", shape(a) + " * " + shape(b) + "^T");
  Matrix c(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double *ai = a.data().data() + i * inner;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double *bj = b.data().data() + j * inner;
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k)
        s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix transpose(const Matrix &a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix &a, const Matrix &b) {
  require(a.same_shape(b), "add", shape(a) + " + " + shape(b));
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i)
    cd[i] += bd[i];
  return c;
}

Matrix sub(const Matrix &a, const Matrix &b) {
  require(a.same_shape(b), "sub", shape(a) + " - " + shape(b));
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i)
    cd[i] -= bd[i];
  return c;
}

Matrix scale(const Matrix &a, double factor) {
  Matrix c = a;
  for (double &x : c.data())
    x *= factor;
  return c;
}

Matrix hadamard(const Matrix &a, const Matrix &b) {
  require(a.same_shape(b), "hadamard", shape(a) + " .* " + shape(b));
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i)
    cd[i] *= bd[i];
  return c;
}

double frobenius_norm(const Matrix &a) {
  double s = 0.0;
  for (double x : a.data())
    s += x * x;
  return std::sqrt(s);
}

double relative_error(const Matrix &reference, const Matrix &approx) {
  require(reference.same_shape(approx), "relative_error",
          shape(reference) + " vs " + shape(approx));
  const double denom = frobenius_norm(reference);
  if (!(denom > 0.0))
    throw DegenerateInputError("relative_error: reference has zero norm");
  double s = 0.0;
  auto r = reference.data();
  auto p = approx.data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = r[i] - p[i];
    s += d * d;
  }
  return std::sqrt(s) / denom;
}

double orthonormality_residual(const Matrix &p) {
  Matrix g = matmul_tn(p, p);
  for (std::size_t i = 0; i < g.rows(); ++i)
    g(i, i) -= 1.0;
  return frobenius_norm(g);
}

bool all_finite(const Matrix &a) {
  return std::all_of(a.data().begin(), a.data().end(),
                     [](double x) { return std::isfinite(x); });
}

Matrix slice_cols(const Matrix &a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.cols(), "slice_cols",
          "columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
              ") of " + shape(a));
  Matrix s(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j)
      s(i, j) = a(i, begin + j);
  return s;
}

Matrix slice_rows(const Matrix &a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.rows(), "slice_rows",
          "rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
              ") of " + shape(a));
  auto d = a.data().subspan(begin * a.cols(), count * a.cols());
  return Matrix(count, a.cols(), std::vector<double>(d.begin(), d.end()));
}

Matrix concat_rows(std::span<const Matrix> blocks) {
  if (blocks.empty())
    return {};
  const std::size_t c = blocks.front().cols();
  std::size_t r = 0;
  for (const auto &b : blocks) {
    require(b.cols() == c, "concat_rows", "column count mismatch");
    r += b.rows();
  }
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto &b : blocks)
    data.insert(data.end(), b.data().begin(), b.data().end());
  return Matrix(r, c, std::move(data));
}

Matrix concat_cols(std::span<const Matrix> blocks) {
  if (blocks.empty())
    return {};
  const std::size_t r = blocks.front().rows();
  std::size_t c = 0;
  for (const auto &b : blocks) {
    require(b.rows() == r, "concat_cols", "row count mismatch");
    c += b.cols();
  }
  Matrix out(r, c);
  std::size_t offset = 0;
  for (const auto &b : blocks) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < b.cols(); ++j)
        out(i, offset + j) = b(i, j);
    offset += b.cols();
  }
  return out;
}

Matrix truncate_columns(const Matrix &p, std::size_t r) {
  if (r < 1 || r > p.cols())
    throw DimensionError("truncate_columns: rank " + std::to_string(r) +
                         " outside [1, " + std::to_string(p.cols()) + "]");
  return slice_cols(p, 0, r);
}

QrResult qr_decompose(const Matrix &a) {
  auto trace = detail::householder_qr(a, false);
  return {std::move(trace.q), std::move(trace.r)};
}

// ---------------------------------------------------------------------------
// SVD

namespace {

SvdResult svd_tall(const Matrix &a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Column-major working copies make the pairwise rotations contiguous.
  std::vector<std::vector<double>> u(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i)
      u[j][i] = a(i, j);
    v[j][j] = 1.0;
  }

  bool converged = n < 2;
  for (int sweep = 0; sweep < kSvdMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const auto &up = u[p];
        const auto &uq = u[q];
        for (std::size_t i = 0; i < m; ++i) {
          alpha += up[i] * up[i];
          beta += uq[i] * uq[i];
          gamma += up[i] * uq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kSvdOffDiagonalTolerance * std::sqrt(alpha * beta))
          continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = u[p][i];
          const double y = u[q][i];
          u[p][i] = c * x - s * y;
          u[q][i] = s * x + c * y;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double x = v[p][i];
          const double y = v[q][i];
          v[p][i] = c * x - s * y;
          v[q][i] = s * x + c * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged)
    throw NumericError("svd: one-sided Jacobi did not converge in " +
                       std::to_string(kSvdMaxSweeps) + " sweeps");

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double x : u[j])
      s += x * x;
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const double smax = n == 0 ? 0.0 : norms[order[0]];
  const double negligible = smax * std::numeric_limits<double>::epsilon();
  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  std::size_t kept = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = norms[j];
    for (std::size_t i = 0; i < n; ++i)
      out.v(i, k) = v[j][i];
    if (norms[j] > negligible && norms[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i)
        out.u(i, k) = u[j][i] / norms[j];
      ++kept;
    }
  }
  if (kept < n) {
    // Directions of null singular values are arbitrary; complete them.
    Matrix head = slice_cols(out.u, 0, kept);
    Matrix full = complete_basis(head, n);
    out.u = std::move(full);
  }
  return out;
}

} // namespace

SvdResult svd(const Matrix &a) {
  if (a.rows() >= a.cols())
    return svd_tall(a);
  SvdResult t = svd_tall(transpose(a));
  return {std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

EigenResult symmetric_eigen(const Matrix &a) {
  if (a.rows() != a.cols())
    throw DimensionError("symmetric_eigen: matrix is " + shape(a));
  const std::size_t n = a.rows();
  Matrix w = a;
  Matrix vec = Matrix::identity(n);
  const double total = frobenius_norm(a);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j)
          s += w(i, j) * w(i, j);
    return std::sqrt(s);
  };

  // Every threshold is relative, so scaling the input by a power of two
  // scales the eigenvalues exactly and leaves the eigenvectors bit-identical.
  int sweep = 0;
  for (; sweep < kSvdMaxSweeps; ++sweep) {
    if (off_norm() <= 1e-15 * total)
      break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = w(p, q);
        if (apq == 0.0 ||
            std::abs(apq) <= 1e-18 * std::max(std::abs(w(p, p)), std::abs(w(q, q))))
          continue;
        const double theta = (w(q, q) - w(p, p)) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double wkp = w(k, p);
          const double wkq = w(k, q);
          w(k, p) = c * wkp - s * wkq;
          w(k, q) = s * wkp + c * wkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double wpk = w(p, k);
          const double wqk = w(q, k);
          w(p, k) = c * wpk - s * wqk;
          w(q, k) = s * wpk + c * wqk;
        }
        w(p, q) = 0.0;
        w(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vec(k, p);
          const double vkq = vec(k, q);
          vec(k, p) = c * vkp - s * vkq;
          vec(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (sweep == kSvdMaxSweeps && off_norm() > 1e-15 * total)
    throw NumericError("symmetric_eigen: Jacobi did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return w(x, x) > w(y, y); });
  EigenResult out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = w(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i)
      out.vectors(i, k) = vec(i, order[k]);
  }
  return out;
}

Matrix solve_upper(const Matrix &r, const Matrix &b) {
  require(r.rows() == r.cols() && r.rows() == b.rows(), "solve_upper",
          shape(r) + " \\ " + shape(b));
  const std::size_t n = r.rows();
  Matrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k)
        s -= r(ii, k) * x(k, c);
      if (r(ii, ii) == 0.0)
        throw RankDeficiencyError("solve_upper: zero pivot", ii);
      x(ii, c) = s / r(ii, ii);
    }
  }
  return x;
}

Matrix complete_basis(const Matrix &q, std::size_t total) {
  const std::size_t m = q.rows();
  if (total > m)
    throw DimensionError("complete_basis: cannot fit " + std::to_string(total) +
                         " orthonormal columns in R^" + std::to_string(m));
  std::vector<std::vector<double>> cols;
  for (std::size_t j = 0; j < q.cols(); ++j) {
    std::vector<double> c(m);
    for (std::size_t i = 0; i < m; ++i)
      c[i] = q(i, j);
    cols.push_back(std::move(c));
  }
  auto orthogonalize = [&](std::vector<double> &x) {
    for (int pass = 0; pass < 2; ++pass)
      for (const auto &c : cols) {
        double d = 0.0;
        for (std::size_t i = 0; i < m; ++i)
          d += c[i] * x[i];
        for (std::size_t i = 0; i < m; ++i)
          x[i] -= d * c[i];
      }
  };
  while (cols.size() < total) {
    // Pick the canonical vector with the largest residual.
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < m; ++e) {
      std::vector<double> x(m, 0.0);
      x[e] = 1.0;
      orthogonalize(x);
      double nrm = 0.0;
      for (double v : x)
        nrm += v * v;
      if (nrm > best_norm + 1e-12) {
        best_norm = nrm;
        best = std::move(x);
      }
    }
    const double nrm = std::sqrt(best_norm);
    for (double &v : best)
      v /= nrm;
    orthogonalize(best);
    double renorm = 0.0;
    for (double v : best)
      renorm += v * v;
    renorm = std::sqrt(renorm);
    for (double &v : best)
      v /= renorm;
    cols.push_back(std::move(best));
  }
  Matrix out(m, total);
  for (std::size_t j = 0; j < total; ++j)
    for (std::size_t i = 0; i < m; ++i)
      out(i, j) = cols[j][i];
  return out;
}

Matrix random_gaussian(std::size_t rows, std::size_t cols, Rng &rng, double stddev) {
  Matrix m(rows, cols);
  for (double &x : m.data())
    x = stddev * rng.normal();
  return m;
}

Matrix random_orthonormal(std::size_t d, std::size_t r, Rng &rng) {
  if (r > d)
    throw DimensionError("random_orthonormal: r > d");
  if (r == 0)
    return Matrix(d, 0);
  for (;;) {
    Matrix g = random_gaussian(d, r, rng);
    try {
      return qr_decompose(g).q;
    } catch (const RankDeficiencyError &) {
      // measure-zero event; draw again
    }
  }
}

Matrix projector(const Matrix &p) { return matmul_nt(p, p); }

std::string format_real(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::string to_text(const Matrix &a) {
  std::string out = std::to_string(a.rows()) + " " + std::to_string(a.cols()) + "\n";
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (j)
        out += ' ';
      out += format_real(a(i, j));
    }
    out += '\n';
  }
  return out;
}

Matrix from_text(const std::string &text) {
  std::istringstream in(text);
  std::size_t r = 0, c = 0;
  if (!(in >> r >> c))
    throw FormatError("matrix text: missing shape line", 0);
  std::vector<double> data(r * c);
  for (std::size_t k = 0; k < r * c; ++k) {
    std::string tok;
    if (!(in >> tok))
      throw FormatError("matrix text: expected " + std::to_string(r * c) + " entries",
                        text.size());
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), data[k]);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
      throw FormatError("matrix text: bad number '" + tok + "'",
                        static_cast<std::size_t>(in.tellg()));
  }
  return Matrix(r, c, std::move(data));
}

} // namespace linalg
} // namespace stiefkv
