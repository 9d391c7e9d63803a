#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "stiefkv/decoder.hpp"
#include "stiefkv/kernels.hpp"

using namespace stiefkv;
using namespace stiefkv::decoder;
namespace la = stiefkv::linalg;

namespace {

DecoderConfig small_config() {
  DecoderConfig c;
  c.d_model = 16;
  c.n_heads_q = 4;
  c.n_heads_kv = 2;
  c.d_h = 4;
  c.d_ff = 24;
  c.n_layers = 2;
  return c;
}

// Scalar re-implementation of one layer, written with explicit loops only.
Matrix straight_line_layer(const DecoderConfig &c, const DecoderLayerParams &p, const Matrix &x) {
  const std::size_t n = x.rows(), dm = c.d_model, dh = c.d_h;
  auto norm = [&](const Matrix &a, const Matrix &g, const Matrix &o) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t t = 0; t < a.rows(); ++t) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) {
        mean += a(t, j);
        sq += a(t, j) * a(t, j);
      }
      mean /= a.cols();
      sq /= a.cols();
      for (std::size_t j = 0; j < a.cols(); ++j) {
        if (c.norm_kind == NormKind::rms_norm) {
          out(t, j) = a(t, j) / std::sqrt(sq + c.rms_norm_eps) * g(0, j);
        } else {
          double var = 0.0;
          for (std::size_t k = 0; k < a.cols(); ++k)
            var += (a(t, k) - mean) * (a(t, k) - mean);
          var /= a.cols();
          out(t, j) = (a(t, j) - mean) / std::sqrt(var + c.layer_norm_eps) * g(0, j) + o(0, j);
        }
      }
    }
    return out;
  };
  const Matrix h = norm(x, p.norm1_gain, p.norm1_offset);
  const Matrix q = oracle::triple_loop_matmul(h, p.w_q);
  const Matrix k = oracle::triple_loop_matmul(h, p.w_k);
  const Matrix v = oracle::triple_loop_matmul(h, p.w_v);
  Matrix concat(n, c.n_heads_q * dh);
  for (std::size_t hq = 0; hq < c.n_heads_q; ++hq) {
    const std::size_t g = hq / (c.n_heads_q / c.n_heads_kv);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dh; ++d)
          dot += q(i, hq * dh + d) * k(j, g * dh + d);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto &e : s) {
        e = std::exp(e - mx);
        z += e;
      }
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j)
          acc += s[j] / z * v(j, g * dh + d);
        concat(i, hq * dh + d) = acc;
      }
    }
  }
  const Matrix attn = oracle::triple_loop_matmul(concat, p.w_o);
  Matrix y1(n, dm);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dm; ++j)
      y1(i, j) = x(i, j) + attn(i, j);
  const Matrix z = norm(y1, p.norm2_gain, p.norm2_offset);
  Matrix hidden = oracle::triple_loop_matmul(z, p.w_up);
  if (c.mlp_kind == MlpKind::silu_gated) {
    const Matrix gate = oracle::triple_loop_matmul(z, p.w_gate);
    for (std::size_t i = 0; i < hidden.rows(); ++i)
      for (std::size_t j = 0; j < hidden.cols(); ++j)
        hidden(i, j) *= gate(i, j) / (1.0 + std::exp(-gate(i, j)));
  } else {
    for (std::size_t i = 0; i < hidden.rows(); ++i)
      for (std::size_t j = 0; j < hidden.cols(); ++j)
        hidden(i, j) = 0.5 * hidden(i, j) * (1.0 + std::erf(hidden(i, j) / std::sqrt(2.0)));
  }
  const Matrix mlp = oracle::triple_loop_matmul(hidden, p.w_down);
  Matrix y(n, dm);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dm; ++j)
      y(i, j) = y1(i, j) + mlp(i, j);
  return y;
}

std::vector<Matrix> random_value_bases(const DecoderConfig &c, std::size_t r, Rng &rng) {
  std::vector<Matrix> out;
  for (std::size_t g = 0; g < c.n_heads_kv; ++g)
    out.push_back(la::random_orthonormal(c.d_h, r, rng));
  return out;
}

} // namespace

TEST_CASE("config validation") {
  DecoderConfig c;
  CHECK_NOTHROW(c.validate());
  c.d_model = 63;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DecoderConfig{};
  c.n_heads_kv = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DecoderConfig{};
  c.rope_enabled = true;
  c.d_h = 15;
  c.d_model = 60;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("init_stack") {
  DecoderConfig c;
  Rng a(0), b(0);
  DecoderStack s1 = init_stack(c, a);
  DecoderStack s2 = init_stack(c, b);
  REQUIRE(s1.layers.size() == 4);
  CHECK(s1.layers[0].w_q.rows() == 64);
  CHECK(s1.layers[0].w_q.cols() == 64);
  CHECK(s1.layers[0].w_k.cols() == 32);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(s1.layers[l].w_q == s2.layers[l].w_q);
    CHECK(s1.layers[l].w_down == s2.layers[l].w_down);
  }

  SUBCASE("entry variance close to 1/fan_in") {
    // W_down is 172 x 64: 11008 entries with fan_in 172.
    const Matrix &w = s1.layers[0].w_down;
    double sq = 0.0;
    for (double e : w.data())
      sq += e * e;
    const double var = sq / static_cast<double>(w.size());
    const double expect = 1.0 / 172.0;
    // Standard error of the sample second moment is sqrt(2/N) relative.
    CHECK(std::abs(var / expect - 1.0) < 4.0 * std::sqrt(2.0 / w.size()));
  }
}

TEST_CASE("single token attends only to itself") {
  DecoderConfig c = small_config();
  Rng rng(5);
  DecoderStack s = init_stack(c, rng);
  Matrix x = la::random_gaussian(1, c.d_model, rng);
  auto res = forward(c, s.layers[0], x, true);
  const auto &rec = *res.record;
  for (std::size_t hq = 0; hq < c.n_heads_q; ++hq)
    CHECK(oracle::max_abs_diff(rec.head_outputs[hq], rec.v[hq / c.group_size()]) < 1e-15);
}

TEST_CASE("forward matches the straight-line oracle") {
  for (NormKind nk : {NormKind::rms_norm, NormKind::layer_norm})
    for (MlpKind mk : {MlpKind::silu_gated, MlpKind::gelu}) {
      DecoderConfig c = small_config();
      c.norm_kind = nk;
      c.mlp_kind = mk;
      Rng rng(3);
      DecoderStack s = init_stack(c, rng);
      // Perturb norm parameters so gains and offsets are exercised.
      for (auto &l : s.layers) {
        l.norm1_gain = la::add(l.norm1_gain, la::random_gaussian(1, c.d_model, rng, 0.1));
        l.norm2_offset = la::random_gaussian(1, c.d_model, rng, 0.1);
      }
      Matrix x = la::random_gaussian(7, c.d_model, rng);
      Matrix y = forward(c, s.layers[0], x, false).y;
      CHECK(la::relative_error(straight_line_layer(c, s.layers[0], x), y) < 1e-10);
    }
}

TEST_CASE("GQA equals MHA with duplicated KV heads") {
  DecoderConfig gqa = small_config();
  gqa.d_model = 8;
  gqa.n_heads_q = 2;
  gqa.n_heads_kv = 1;
  Rng rng(11);
  DecoderStack s = init_stack(gqa, rng);
  DecoderConfig mha = gqa;
  mha.n_heads_kv = 2;
  DecoderLayerParams dup = s.layers[0];
  dup.w_k = la::concat_cols(std::vector<Matrix>{s.layers[0].w_k, s.layers[0].w_k});
  dup.w_v = la::concat_cols(std::vector<Matrix>{s.layers[0].w_v, s.layers[0].w_v});
  Matrix x = la::random_gaussian(6, gqa.d_model, rng);
  CHECK(forward(gqa, s.layers[0], x, false).y == forward(mha, dup, x, false).y);
}

TEST_CASE("causality") {
  DecoderConfig c = small_config();
  Rng rng(2);
  DecoderStack s = init_stack(c, rng);
  Matrix x = la::random_gaussian(8, c.d_model, rng);
  Matrix y = forward(c, s.layers[0], x, false).y;
  for (std::size_t t = 0; t < 8; ++t) {
    Matrix xp = x;
    for (std::size_t j = 0; j < c.d_model; ++j)
      xp(t, j) += 0.5;
    Matrix yp = forward(c, s.layers[0], xp, false).y;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c.d_model; ++j)
        CHECK(yp(i, j) == y(i, j));
  }
}

TEST_CASE("causal softmax rows sum to one") {
  Matrix p = nn::row_softmax(oracle::gaussian(9, 9, 4), true);
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j)
      s += p(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("compression") {
  DecoderConfig c = small_config();
  Rng rng(8);
  DecoderStack s = init_stack(c, rng);
  Matrix x = la::random_gaussian(10, c.d_model, rng);
  const auto plain = forward(c, s.layers[0], x, true);

  SUBCASE("full-rank orthonormal bases are exact") {
    for (int trial = 0; trial < 5; ++trial) {
      Matrix pk = la::random_orthonormal(c.d_h, c.d_h, rng);
      auto pv = random_value_bases(c, c.d_h, rng);
      Matrix y = forward_compressed(c, s.layers[0], x, pk, pv);
      CHECK(la::relative_error(plain.y, y) < 1e-10);
    }
  }

  SUBCASE("contract errors") {
    auto pv = random_value_bases(c, 2, rng);
    Matrix pk = la::random_orthonormal(c.d_h, 2, rng);
    CHECK_THROWS_AS(forward_compressed(c, s.layers[0], x, Matrix(c.d_h, 0), pv), DimensionError);
    CHECK_THROWS_AS(forward_compressed(c, s.layers[0], x, la::scale(pk, 2.0), pv), ContractError);
    CHECK_THROWS_AS(forward_compressed(c, s.layers[0], x, Matrix(c.d_h + 1, 2), pv),
                    DimensionError);
    CHECK_THROWS_AS(forward_compressed(c, s.layers[0], x, pk, std::span(pv).subspan(0, 1)),
                    DimensionError);
    CHECK_THROWS_AS(forward(c, s.layers[0], Matrix(3, c.d_model + 1), false), DimensionError);
  }

  SUBCASE("record replay is bit-identical") {
    Matrix pk = la::random_orthonormal(c.d_h, 2, rng);
    auto pv = random_value_bases(c, 3, rng);
    Compression none{};
    Matrix attn;
    CHECK(forward_from_record(c, s.layers[0], *plain.record, none, &attn) == plain.y);
    CHECK(attn == plain.record->attention_output);
    Compression comp{&pk, pv};
    CHECK(forward_from_record(c, s.layers[0], *plain.record, comp) ==
          forward_compressed(c, s.layers[0], x, pk, pv));
    const double err = la::relative_error(plain.y, forward_compressed(c, s.layers[0], x, pk, pv));
    CHECK(err > 0.0);
  }
}

TEST_CASE("folding equivalence over seeds and ranks") {
  DecoderConfig c;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    DecoderStack s = init_stack(c, rng);
    Matrix x = la::random_gaussian(12, c.d_model, rng);
    for (std::size_t r : {4u, 8u, 16u}) {
      CAPTURE(seed);
      CAPTURE(r);
      Matrix pk = la::random_orthonormal(c.d_h, r, rng);
      auto pv = random_value_bases(c, r, rng);
      FoldedLayer f = fold_bases(c, s.layers[0], pk, pv);
      Matrix folded = forward_folded(c, f, x);
      Matrix unfolded = forward_compressed(c, s.layers[0], x, pk, pv);
      CHECK(la::relative_error(unfolded, folded) < 1e-10);
      if (r == c.d_h)
        CHECK(la::relative_error(forward(c, s.layers[0], x, false).y, folded) < 1e-10);
    }
  }
  c.rope_enabled = true;
  Rng rng(0);
  DecoderStack s = init_stack(c, rng);
  Matrix pk = la::random_orthonormal(c.d_h, 4, rng);
  auto pv = random_value_bases(c, 4, rng);
  CHECK_THROWS_AS(fold_bases(c, s.layers[0], pk, pv), ConfigError);
}

TEST_CASE("rotary embeddings") {
  Matrix q = oracle::gaussian(5, 8, 1);
  Matrix k = oracle::gaussian(5, 8, 2);
  std::vector<std::size_t> zero(5, 0);
  auto id = apply_rope(q, k, zero);
  CHECK(id.q == q);
  CHECK(id.k == k);

  std::vector<std::size_t> pos{0, 3, 7, 100, 4096};
  auto rot = apply_rope(q, k, pos);
  for (std::size_t t = 0; t < 5; ++t) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      a += q(t, j) * q(t, j);
      b += rot.q(t, j) * rot.q(t, j);
    }
    CHECK(std::abs(std::sqrt(a) - std::sqrt(b)) < 1e-12);
  }
  // Same position on both sides: the rotation cancels in q k^T.
  Matrix s0 = la::matmul_nt(q, k);
  Matrix s1 = la::matmul_nt(rot.q, rot.k);
  for (std::size_t t = 0; t < 5; ++t)
    CHECK(std::abs(s0(t, t) - s1(t, t)) < 1e-10);

  CHECK_THROWS_AS(apply_rope(oracle::gaussian(2, 3, 1), oracle::gaussian(2, 3, 2),
                             std::vector<std::size_t>{0, 1}),
                  ConfigError);

  SUBCASE("rope-enabled layer is exact at full rank") {
    DecoderConfig c = small_config();
    c.rope_enabled = true;
    Rng rng(4);
    DecoderStack s = init_stack(c, rng);
    Matrix x = la::random_gaussian(6, c.d_model, rng);
    Matrix pk = la::random_orthonormal(c.d_h, c.d_h, rng);
    auto pv = random_value_bases(c, c.d_h, rng);
    CHECK(la::relative_error(forward(c, s.layers[0], x, false).y,
                             forward_compressed(c, s.layers[0], x, pk, pv)) < 1e-10);
  }
}

TEST_CASE("capture_calibration wiring") {
  DecoderConfig c = small_config();
  c.n_layers = 3;
  Rng rng(6);
  DecoderStack s = init_stack(c, rng);
  Rng data(7);
  auto xs = gaussian_inputs(4, 5, c.d_model, data);
  auto recs = capture_calibration(s, xs);
  REQUIRE(recs.size() == 3);
  for (const auto &layer : recs)
    CHECK(layer.size() == 4);
  for (std::size_t q = 0; q < 4; ++q) {
    CHECK(recs[0][q].layer_input == xs[q]);
    CHECK(recs[1][q].layer_input == recs[0][q].layer_output);
    CHECK(recs[2][q].layer_input == recs[1][q].layer_output);
    CHECK(recs[0][q].k.size() == c.n_heads_kv);
    CHECK(recs[0][q].q.size() == c.n_heads_q);
    CHECK(recs[0][q].head_outputs.size() == c.n_heads_q);
  }
  Rng data2(7);
  auto again = capture_calibration(s, gaussian_inputs(4, 5, c.d_model, data2));
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t q = 0; q < 4; ++q)
      CHECK(again[l][q].layer_output == recs[l][q].layer_output);

  c.n_layers = 1;
  Rng r1(1);
  auto one = capture_calibration(init_stack(c, r1), xs);
  CHECK(one.size() == 1);
  CHECK(one[0].size() == xs.size());
}
