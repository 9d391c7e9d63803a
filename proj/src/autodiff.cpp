#include "stiefkv/autodiff.hpp"

#include <cmath>
#include <memory>

#include "stiefkv/detail/householder.hpp"
#include "stiefkv/kernels.hpp"

namespace stiefkv::ad {

const char *op_name(Op op) {
  switch (op) {
  case Op::leaf: return "leaf";
  case Op::constant: return "constant";
  case Op::matmul: return "matmul";
  case Op::add: return "add";
  case Op::scale: return "scale";
  case Op::transpose: return "transpose";
  case Op::slice_cols: return "slice_cols";
  case Op::concat_rows: return "concat_rows";
  case Op::row_softmax: return "row_softmax";
  case Op::layer_norm: return "layer_norm";
  case Op::rms_norm: return "rms_norm";
  case Op::gelu: return "gelu";
  case Op::silu: return "silu";
  case Op::hadamard: return "hadamard";
  case Op::reshape: return "reshape";
  case Op::qr_q: return "qr_q";
  case Op::frobenius_ratio_loss: return "frobenius_ratio_loss";
  case Op::sum: return "sum";
  }
  return "?";
}

const Matrix &Var::value() const {
  if (!tape_)
    throw ContractError("Var: detached handle");
  return tape_->value(id_);
}

Matrix Var::grad() const {
  if (!tape_)
    throw ContractError("Var: detached handle");
  return tape_->grad(id_);
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{Op::leaf, std::move(value), Matrix(), {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{Op::constant, std::move(value), Matrix(), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Op op, Matrix value, std::vector<std::size_t> inputs, Pullback pullback) {
  bool needs = false;
  for (std::size_t in : inputs) {
    if (in >= nodes_.size())
      throw ContractError("Tape::record: operand is not on this tape");
    needs = needs || nodes_[in].requires_grad;
  }
  nodes_.push_back(Node{op, std::move(value), Matrix(), std::move(inputs),
                        needs ? std::move(pullback) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Matrix Tape::grad(std::size_t id) const {
  const Node &n = nodes_.at(id);
  if (n.grad.empty() && !n.value.empty())
    return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Matrix &g) {
  Node &n = nodes_.at(id);
  if (!n.requires_grad)
    return;
  if (!n.value.same_shape(g))
    throw DimensionError(std::string("Tape::accumulate: gradient shape mismatch at ") +
                         op_name(n.op));
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] += src[i];
}

std::size_t Tape::backward(const Var &loss, double seed) {
  if (loss.tape() != this)
    throw ContractError("backward: loss is not on this tape");
  const Node &ln = nodes_.at(loss.id());
  if (ln.value.rows() != 1 || ln.value.cols() != 1)
    throw ContractError("backward: loss must be 1x1");
  for (auto &n : nodes_)
    n.grad = Matrix();
  if (!ln.requires_grad)
    return 0;
  nodes_[loss.id()].grad = Matrix(1, 1, seed);
  std::size_t visited = 0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node &n = nodes_[id];
    if (!n.pullback || n.grad.empty())
      continue;
    n.pullback(*this, id);
    ++visited;
  }
  return visited;
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

Tape &same_tape(const Var &a, const Var &b) {
  if (!a.tape() || a.tape() != b.tape())
    throw ContractError("operands live on different tapes");
  return *a.tape();
}

Tape &tape_of(const Var &a) {
  if (!a.tape())
    throw ContractError("detached Var");
  return *a.tape();
}

} // namespace

Var matmul(const Var &a, const Var &b) {
  Tape &t = same_tape(a, b);
  Matrix v = linalg::matmul(a.value(), b.value());
  return t.record(Op::matmul, std::move(v), {a.id(), b.id()}, [](Tape &t, std::size_t self) {
    const auto &in = t.inputs(self);
    const Matrix &g = t.upstream(self);
    if (t.requires_grad(in[0]))
      t.accumulate(in[0], linalg::matmul_nt(g, t.value(in[1])));
    if (t.requires_grad(in[1]))
      t.accumulate(in[1], linalg::matmul_tn(t.value(in[0]), g));
  });
}

Var add(const Var &a, const Var &b) {
  Tape &t = same_tape(a, b);
  Matrix v = linalg::add(a.value(), b.value());
  return t.record(Op::add, std::move(v), {a.id(), b.id()}, [](Tape &t, std::size_t self) {
    const auto &in = t.inputs(self);
    t.accumulate(in[0], t.upstream(self));
    t.accumulate(in[1], t.upstream(self));
  });
}

Var scale(const Var &a, double factor) {
  Tape &t = tape_of(a);
  return t.record(Op::scale, linalg::scale(a.value(), factor), {a.id()},
                  [factor](Tape &t, std::size_t self) {
                    t.accumulate(t.inputs(self)[0], linalg::scale(t.upstream(self), factor));
                  });
}

Var transpose(const Var &a) {
  Tape &t = tape_of(a);
  return t.record(Op::transpose, linalg::transpose(a.value()), {a.id()},
                  [](Tape &t, std::size_t self) {
                    t.accumulate(t.inputs(self)[0], linalg::transpose(t.upstream(self)));
                  });
}

Var slice_cols(const Var &a, std::size_t begin, std::size_t count) {
  Tape &t = tape_of(a);
  return t.record(Op::slice_cols, linalg::slice_cols(a.value(), begin, count), {a.id()},
                  [begin, count](Tape &t, std::size_t self) {
                    const std::size_t in = t.inputs(self)[0];
                    const Matrix &x = t.value(in);
                    const Matrix &g = t.upstream(self);
                    Matrix full(x.rows(), x.cols());
                    for (std::size_t i = 0; i < x.rows(); ++i)
                      for (std::size_t j = 0; j < count; ++j)
                        full(i, begin + j) = g(i, j);
                    t.accumulate(in, full);
                  });
}

Var concat_rows(std::span<const Var> blocks) {
  if (blocks.empty())
    throw DimensionError("concat_rows: no blocks");
  Tape &t = tape_of(blocks.front());
  std::vector<Matrix> values;
  std::vector<std::size_t> ids;
  for (const auto &b : blocks) {
    if (b.tape() != &t)
      throw ContractError("concat_rows: operands live on different tapes");
    values.push_back(b.value());
    ids.push_back(b.id());
  }
  return t.record(Op::concat_rows, linalg::concat_rows(values), std::move(ids),
                  [](Tape &t, std::size_t self) {
                    const Matrix &g = t.upstream(self);
                    std::size_t offset = 0;
                    for (std::size_t in : t.inputs(self)) {
                      const std::size_t r = t.value(in).rows();
                      t.accumulate(in, linalg::slice_rows(g, offset, r));
                      offset += r;
                    }
                  });
}

Var row_softmax(const Var &a, bool causal) {
  Tape &t = tape_of(a);
  return t.record(Op::row_softmax, nn::row_softmax(a.value(), causal), {a.id()},
                  [](Tape &t, std::size_t self) {
                    const Matrix &y = t.value(self);
                    const Matrix &g = t.upstream(self);
                    Matrix dx(y.rows(), y.cols());
                    for (std::size_t i = 0; i < y.rows(); ++i) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < y.cols(); ++j)
                        dot += y(i, j) * g(i, j);
                      for (std::size_t j = 0; j < y.cols(); ++j)
                        dx(i, j) = y(i, j) * (g(i, j) - dot);
                    }
                    t.accumulate(t.inputs(self)[0], dx);
                  });
}

Var layer_norm(const Var &a, const Var &gain, const Var &offset, double eps) {
  Tape &t = same_tape(a, gain);
  same_tape(a, offset);
  Matrix v = nn::layer_norm(a.value(), gain.value(), offset.value(), eps);
  return t.record(
      Op::layer_norm, std::move(v), {a.id(), gain.id(), offset.id()},
      [eps](Tape &t, std::size_t self) {
        const auto &in = t.inputs(self);
        const Matrix &x = t.value(in[0]);
        const Matrix &gain = t.value(in[1]);
        const Matrix &g = t.upstream(self);
        const std::size_t d = x.cols();
        const double dd = static_cast<double>(d);
        Matrix dx(x.rows(), d), dgain(1, d), doff(1, d);
        std::vector<double> xhat(d), gh(d);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          double mean = 0.0;
          for (std::size_t j = 0; j < d; ++j)
            mean += x(i, j);
          mean /= dd;
          double var = 0.0;
          for (std::size_t j = 0; j < d; ++j)
            var += (x(i, j) - mean) * (x(i, j) - mean);
          var /= dd;
          const double inv = 1.0 / std::sqrt(var + eps);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (x(i, j) - mean) * inv;
            gh[j] = g(i, j) * gain(0, j);
            dgain(0, j) += g(i, j) * xhat[j];
            doff(0, j) += g(i, j);
            m1 += gh[j];
            m2 += gh[j] * xhat[j];
          }
          m1 /= dd;
          m2 /= dd;
          for (std::size_t j = 0; j < d; ++j)
            dx(i, j) = inv * (gh[j] - m1 - xhat[j] * m2);
        }
        t.accumulate(in[0], dx);
        t.accumulate(in[1], dgain);
        t.accumulate(in[2], doff);
      });
}

Var rms_norm(const Var &a, const Var &gain, double eps) {
  Tape &t = same_tape(a, gain);
  Matrix v = nn::rms_norm(a.value(), gain.value(), eps);
  return t.record(Op::rms_norm, std::move(v), {a.id(), gain.id()},
                  [eps](Tape &t, std::size_t self) {
                    const auto &in = t.inputs(self);
                    const Matrix &x = t.value(in[0]);
                    const Matrix &gain = t.value(in[1]);
                    const Matrix &g = t.upstream(self);
                    const std::size_t d = x.cols();
                    const double dd = static_cast<double>(d);
                    Matrix dx(x.rows(), d), dgain(1, d);
                    for (std::size_t i = 0; i < x.rows(); ++i) {
                      double ms = 0.0;
                      for (std::size_t j = 0; j < d; ++j)
                        ms += x(i, j) * x(i, j);
                      ms /= dd;
                      const double inv = 1.0 / std::sqrt(ms + eps);
                      double m2 = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = x(i, j) * inv;
                        dgain(0, j) += g(i, j) * xhat;
                        m2 += g(i, j) * gain(0, j) * xhat;
                      }
                      m2 /= dd;
                      for (std::size_t j = 0; j < d; ++j)
                        dx(i, j) = inv * (g(i, j) * gain(0, j) - x(i, j) * inv * m2);
                    }
                    t.accumulate(in[0], dx);
                    t.accumulate(in[1], dgain);
                  });
}

namespace {

template <class Fwd, class Deriv>
Var elementwise(const Var &a, Op op, Fwd fwd, Deriv deriv) {
  Tape &t = tape_of(a);
  return t.record(op, fwd(a.value()), {a.id()}, [deriv](Tape &t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    Matrix dx = t.upstream(self);
    auto xs = t.value(in).data();
    auto ds = dx.data();
    for (std::size_t i = 0; i < ds.size(); ++i)
      ds[i] *= deriv(xs[i]);
    t.accumulate(in, dx);
  });
}

} // namespace

Var gelu(const Var &a) {
  return elementwise(
      a, Op::gelu, [](const Matrix &m) { return nn::gelu(m); },
      [](double x) { return nn::gelu_grad(x); });
}

Var silu(const Var &a) {
  return elementwise(
      a, Op::silu, [](const Matrix &m) { return nn::silu(m); },
      [](double x) { return nn::silu_grad(x); });
}

Var hadamard(const Var &a, const Var &b) {
  Tape &t = same_tape(a, b);
  return t.record(Op::hadamard, linalg::hadamard(a.value(), b.value()), {a.id(), b.id()},
                  [](Tape &t, std::size_t self) {
                    const auto &in = t.inputs(self);
                    const Matrix &g = t.upstream(self);
                    if (t.requires_grad(in[0]))
                      t.accumulate(in[0], linalg::hadamard(g, t.value(in[1])));
                    if (t.requires_grad(in[1]))
                      t.accumulate(in[1], linalg::hadamard(g, t.value(in[0])));
                  });
}

Var reshape(const Var &a, std::size_t rows, std::size_t cols) {
  Tape &t = tape_of(a);
  const Matrix &x = a.value();
  if (rows * cols != x.size())
    throw DimensionError("reshape: " + std::to_string(x.size()) + " entries into " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  Matrix v(rows, cols, std::vector<double>(x.data().begin(), x.data().end()));
  return t.record(Op::reshape, std::move(v), {a.id()}, [](Tape &t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    const Matrix &g = t.upstream(self);
    const Matrix &x = t.value(in);
    t.accumulate(in, Matrix(x.rows(), x.cols(),
                            std::vector<double>(g.data().begin(), g.data().end())));
  });
}

Var qr_q(const Var &a) {
  Tape &t = tape_of(a);
  const bool traced = t.requires_grad(a.id());
  auto trace = std::make_shared<detail::HouseholderTrace>(detail::householder_qr(a.value(), traced));
  Matrix q = trace->q;
  return t.record(Op::qr_q, std::move(q), {a.id()}, [trace](Tape &t, std::size_t self) {
    t.accumulate(t.inputs(self)[0], detail::householder_q_pullback(*trace, t.upstream(self)));
  });
}

Var frobenius_ratio_loss(const Var &reference, const Var &approx) {
  Tape &t = same_tape(reference, approx);
  const Matrix &r = reference.value();
  const Matrix &p = approx.value();
  if (!r.same_shape(p))
    throw DimensionError("frobenius_ratio_loss: shape mismatch");
  const double rn = linalg::frobenius_norm(r);
  if (!(rn > 0.0))
    throw DegenerateInputError("frobenius_ratio_loss: reference has zero norm");
  const double loss = linalg::relative_error(r, p);
  return t.record(Op::frobenius_ratio_loss, Matrix(1, 1, loss), {reference.id(), approx.id()},
                  [rn, loss](Tape &t, std::size_t self) {
                    const auto &in = t.inputs(self);
                    const double up = t.upstream(self)(0, 0);
                    const Matrix &r = t.value(in[0]);
                    const Matrix &p = t.value(in[1]);
                    const double dn = loss * rn;
                    if (dn == 0.0)
                      return; // coincident inputs: zero subgradient
                    Matrix d = linalg::sub(r, p);
                    const double k = up / (dn * rn);
                    if (t.requires_grad(in[1]))
                      t.accumulate(in[1], linalg::scale(d, -k));
                    if (t.requires_grad(in[0])) {
                      Matrix gr = linalg::scale(d, k);
                      const double c = up * dn / (rn * rn * rn);
                      auto gd = gr.data();
                      auto rd = r.data();
                      for (std::size_t i = 0; i < gd.size(); ++i)
                        gd[i] -= c * rd[i];
                      t.accumulate(in[0], gr);
                    }
                  });
}

Var sum(const Var &a) {
  Tape &t = tape_of(a);
  double s = 0.0;
  for (double x : a.value().data())
    s += x;
  return t.record(Op::sum, Matrix(1, 1, s), {a.id()}, [](Tape &t, std::size_t self) {
    const std::size_t in = t.inputs(self)[0];
    const Matrix &x = t.value(in);
    t.accumulate(in, Matrix(x.rows(), x.cols(), t.upstream(self)(0, 0)));
  });
}

// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const ScalarFn &f, const std::vector<Matrix> &inputs,
                                   double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4))
    throw ContractError("finite_diff_check: eps must lie in [1e-7, 1e-4]");
  FiniteDiffReport report;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto &m : inputs)
      vars.push_back(tape.leaf(m));
    Var loss = f(tape, vars);
    tape.backward(loss);
    for (const auto &v : vars)
      report.analytic.push_back(v.grad());
  }
  auto evaluate = [&](const std::vector<Matrix> &xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto &m : xs)
      vars.push_back(tape.constant(m));
    return f(tape, vars).value()(0, 0);
  };
  std::vector<Matrix> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Matrix num(inputs[k].rows(), inputs[k].cols());
    for (std::size_t e = 0; e < inputs[k].size(); ++e) {
      const double orig = inputs[k].data()[e];
      work[k].data()[e] = orig + eps;
      const double fp = evaluate(work);
      work[k].data()[e] = orig - eps;
      const double fm = evaluate(work);
      work[k].data()[e] = orig;
      num.data()[e] = (fp - fm) / (2.0 * eps);
      const double an = report.analytic[k].data()[e];
      report.max_deviation =
          std::max(report.max_deviation, std::abs(an - num.data()[e]) / (std::abs(an) + 1e-8));
    }
    report.numeric.push_back(std::move(num));
  }
  return report;
}

double finite_diff_check(const std::function<Var(Tape &, const Var &)> &f, const Matrix &x,
                         double eps) {
  return finite_diff_check([&](Tape &t, std::span<const Var> v) { return f(t, v[0]); },
                           std::vector<Matrix>{x}, eps)
      .max_deviation;
}

} // namespace stiefkv::ad
