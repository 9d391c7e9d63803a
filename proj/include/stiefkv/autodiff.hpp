#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "stiefkv/linalg.hpp"

namespace stiefkv::ad {

class Tape;

enum class Op {
  leaf,
  constant,
  matmul,
  add,
  scale,
  transpose,
  slice_cols,
  concat_rows,
  row_softmax,
  layer_norm,
  rms_norm,
  gelu,
  silu,
  hadamard,
  reshape,
  qr_q,
  frobenius_ratio_loss,
  sum,
};

const char *op_name(Op op);

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
  Var() = default;
  Var(Tape *tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix &value() const;
  /// Gradient after Tape::backward; zeros if the node was never reached.
  Matrix grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape *tape() const noexcept { return tape_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

private:
  Tape *tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive applications in topological order and replays their
/// pullbacks in reverse. Single owner, not thread-safe.
class Tape {
public:
  using Pullback = std::function<void(Tape &, std::size_t self)>;

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var leaf(Matrix value);
  Var constant(Matrix value);

  /// Appends a node. Inputs must already be on this tape.
  Var record(Op op, Matrix value, std::vector<std::size_t> inputs, Pullback pullback);

  const Matrix &value(std::size_t id) const { return nodes_.at(id).value; }
  Matrix grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  Op op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t> &inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient of node `id` (allocating on first use).
  void accumulate(std::size_t id, const Matrix &g);
  /// Gradient flowing into node `id` during backward.
  const Matrix &upstream(std::size_t id) const { return nodes_.at(id).grad; }

  /// Reverse sweep from a 1x1 loss. `seed` is the upstream gradient of the
  /// loss. Returns the number of nodes whose pullback ran.
  std::size_t backward(const Var &loss, double seed = 1.0);

private:
  struct Node {
    Op op;
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    Pullback pullback;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Primitive set. Each records one node and returns its handle.
Var matmul(const Var &a, const Var &b);
Var add(const Var &a, const Var &b);
Var scale(const Var &a, double factor);
Var transpose(const Var &a);
Var slice_cols(const Var &a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> blocks);
/// Softmax over each row. With `causal`, entry (i, j) is masked for j > i.
Var row_softmax(const Var &a, bool causal = false);
/// Row-wise LayerNorm; gain and offset are 1 x cols.
Var layer_norm(const Var &a, const Var &gain, const Var &offset, double eps = 1e-5);
/// Row-wise RMSNorm; gain is 1 x cols.
Var rms_norm(const Var &a, const Var &gain, double eps = 1e-6);
/// Exact (erf) GELU.
Var gelu(const Var &a);
Var silu(const Var &a);
Var hadamard(const Var &a, const Var &b);
/// Row-major reshape.
Var reshape(const Var &a, std::size_t rows, std::size_t cols);
/// Q factor of the Householder QR (diag R >= 0); R is discarded.
Var qr_q(const Var &a);
/// ||reference - approx||_F / ||reference||_F as a 1x1 node.
Var frobenius_ratio_loss(const Var &reference, const Var &approx);
Var sum(const Var &a);

struct FiniteDiffReport {
  double max_deviation = 0.0;   ///< max |analytic - numeric| / (|analytic| + 1e-8)
  std::vector<Matrix> analytic; ///< one per input
  std::vector<Matrix> numeric;
};

using ScalarFn = std::function<Var(Tape &, std::span<const Var>)>;

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps` (must lie in [1e-7, 1e-4]).
FiniteDiffReport finite_diff_check(const ScalarFn &f, const std::vector<Matrix> &inputs,
                                   double eps);
double finite_diff_check(const std::function<Var(Tape &, const Var &)> &f, const Matrix &x,
                         double eps);

} // namespace stiefkv::ad
