#include "stiefkv/kernels.hpp"

#include <cmath>
#include <numbers>

namespace stiefkv::nn {

Matrix row_softmax(const Matrix &a, bool causal) {
  Matrix y(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::size_t width = causal ? std::min(i + 1, a.cols()) : a.cols();
    if (width == 0)
      continue;
    double mx = a(i, 0);
    for (std::size_t j = 1; j < width; ++j)
      mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double e = std::exp(a(i, j) - mx);
      y(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < width; ++j)
      y(i, j) /= z;
  }
  return y;
}

namespace {

void check_row_param(const Matrix &a, const Matrix &p, const char *what) {
  if (p.rows() != 1 || p.cols() != a.cols())
    throw DimensionError(std::string(what) + ": parameter must be 1x" +
                         std::to_string(a.cols()));
}

} // namespace

Matrix layer_norm(const Matrix &a, const Matrix &gain, const Matrix &offset, double eps) {
  check_row_param(a, gain, "layer_norm gain");
  check_row_param(a, offset, "layer_norm offset");
  const std::size_t d = a.cols();
  Matrix y(a.rows(), d);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      mean += a(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = a(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      y(i, j) = (a(i, j) - mean) * inv * gain(0, j) + offset(0, j);
  }
  return y;
}

Matrix rms_norm(const Matrix &a, const Matrix &gain, double eps) {
  check_row_param(a, gain, "rms_norm gain");
  const std::size_t d = a.cols();
  Matrix y(a.rows(), d);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      ms += a(i, j) * a(i, j);
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < d; ++j)
      y(i, j) = a(i, j) * inv * gain(0, j);
  }
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

Matrix gelu(const Matrix &a) {
  Matrix y = a;
  for (double &x : y.data())
    x = gelu(x);
  return y;
}

Matrix silu(const Matrix &a) {
  Matrix y = a;
  for (double &x : y.data())
    x = silu(x);
  return y;
}

} // namespace stiefkv::nn
