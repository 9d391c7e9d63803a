#pragma once

#include "stiefkv/linalg.hpp"

// Plain (non-recording) neural-network kernels shared by the decoder, the
// predictor and the autodiff primitives, so that taped and untaped forward
// passes produce identical values.
namespace stiefkv::nn {

Matrix row_softmax(const Matrix &a, bool causal);
Matrix layer_norm(const Matrix &a, const Matrix &gain, const Matrix &offset, double eps);
Matrix rms_norm(const Matrix &a, const Matrix &gain, double eps);
Matrix gelu(const Matrix &a);
Matrix silu(const Matrix &a);

double gelu(double x);
double gelu_grad(double x);
double silu(double x);
double silu_grad(double x);

} // namespace stiefkv::nn
