#include "stiefkv/decoder.hpp"

#include <cmath>
#include <numeric>

#include "stiefkv/kernels.hpp"

namespace stiefkv::decoder {

namespace la = linalg;

void DecoderConfig::validate() const {
  auto fail = [](const std::string &m) { throw ConfigError("decoder config: " + m); };
  if (d_model == 0 || n_heads_q == 0 || n_heads_kv == 0 || d_h == 0 || d_ff == 0 ||
      n_layers == 0)
    fail("all sizes must be positive");
  if (d_model != n_heads_q * d_h)
    fail("d_model (" + std::to_string(d_model) + ") must equal n_heads_q * d_h (" +
         std::to_string(n_heads_q * d_h) + ")");
  if (n_heads_q % n_heads_kv != 0)
    fail("n_heads_q must be divisible by n_heads_kv");
  if (rope_enabled && d_h % 2 != 0)
    fail("rotary embeddings need an even d_h");
  if (!(layer_norm_eps > 0.0) || !(rms_norm_eps > 0.0) || !(rope_base > 0.0))
    fail("epsilons and rope_base must be positive");
}

DecoderStack init_stack(const DecoderConfig &config, Rng &rng) {
  config.validate();
  const std::size_t dm = config.d_model;
  const std::size_t dq = config.n_heads_q * config.d_h;
  const std::size_t dkv = config.n_heads_kv * config.d_h;
  auto weight = [&](std::size_t fan_in, std::size_t fan_out) {
    return la::random_gaussian(fan_in, fan_out, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };
  DecoderStack stack{config, {}};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    DecoderLayerParams p;
    p.w_q = weight(dm, dq);
    p.w_k = weight(dm, dkv);
    p.w_v = weight(dm, dkv);
    p.w_o = weight(dq, dm);
    if (config.mlp_kind == MlpKind::silu_gated)
      p.w_gate = weight(dm, config.d_ff);
    p.w_up = weight(dm, config.d_ff);
    p.w_down = weight(config.d_ff, dm);
    p.norm1_gain = Matrix(1, dm, 1.0);
    p.norm1_offset = Matrix(1, dm, 0.0);
    p.norm2_gain = Matrix(1, dm, 1.0);
    p.norm2_offset = Matrix(1, dm, 0.0);
    stack.layers.push_back(std::move(p));
  }
  return stack;
}

RopePair apply_rope(const Matrix &q, const Matrix &k, std::span<const std::size_t> positions,
                    double base) {
  const std::size_t d = q.cols();
  if (d % 2 != 0 || k.cols() != d)
    throw ConfigError("apply_rope: head width must be even and shared by q and k");
  if (positions.size() != q.rows() || positions.size() != k.rows())
    throw DimensionError("apply_rope: one position per row required");
  RopePair out{q, k};
  for (std::size_t t = 0; t < positions.size(); ++t) {
    const double pos = static_cast<double>(positions[t]);
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double c = std::cos(pos * freq);
      const double s = std::sin(pos * freq);
      for (Matrix *m : {&out.q, &out.k}) {
        const double a = (*m)(t, 2 * i);
        const double b = (*m)(t, 2 * i + 1);
        (*m)(t, 2 * i) = a * c - b * s;
        (*m)(t, 2 * i + 1) = a * s + b * c;
      }
    }
  }
  return out;
}

namespace {

Matrix normalize(const DecoderConfig &cfg, const Matrix &x, const Matrix &gain,
                 const Matrix &offset) {
  if (cfg.norm_kind == NormKind::rms_norm)
    return nn::rms_norm(x, gain, cfg.rms_norm_eps);
  return nn::layer_norm(x, gain, offset, cfg.layer_norm_eps);
}

void check_input(const DecoderConfig &cfg, const Matrix &x) {
  if (x.cols() != cfg.d_model || x.rows() == 0)
    throw DimensionError("decoder: input must be n x " + std::to_string(cfg.d_model) + ", got " +
                         std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
}

// Fills layer_input, q, k, v of a record.
void project(const DecoderConfig &cfg, const DecoderLayerParams &layer, const Matrix &x,
             ActivationRecord &rec) {
  check_input(cfg, x);
  rec.layer_input = x;
  const Matrix h = normalize(cfg, x, layer.norm1_gain, layer.norm1_offset);
  const Matrix q_all = la::matmul(h, layer.w_q);
  const Matrix k_all = la::matmul(h, layer.w_k);
  const Matrix v_all = la::matmul(h, layer.w_v);
  const std::size_t dh = cfg.d_h;
  rec.q.clear();
  rec.k.clear();
  rec.v.clear();
  for (std::size_t g = 0; g < cfg.n_heads_kv; ++g) {
    rec.k.push_back(la::slice_cols(k_all, g * dh, dh));
    rec.v.push_back(la::slice_cols(v_all, g * dh, dh));
  }
  for (std::size_t hq = 0; hq < cfg.n_heads_q; ++hq)
    rec.q.push_back(la::slice_cols(q_all, hq * dh, dh));
  if (cfg.rope_enabled) {
    std::vector<std::size_t> pos(x.rows());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    for (std::size_t hq = 0; hq < cfg.n_heads_q; ++hq)
      rec.q[hq] = apply_rope(rec.q[hq], rec.q[hq], pos, cfg.rope_base).q;
    for (std::size_t g = 0; g < cfg.n_heads_kv; ++g)
      rec.k[g] = apply_rope(rec.k[g], rec.k[g], pos, cfg.rope_base).k;
  }
}

Matrix reconstruct(const Matrix &m, const Matrix &basis) {
  return la::matmul_nt(la::matmul(m, basis), basis);
}

Matrix mlp(const DecoderConfig &cfg, const DecoderLayerParams &layer, const Matrix &z) {
  if (cfg.mlp_kind == MlpKind::silu_gated) {
    Matrix gate = nn::silu(la::matmul(z, layer.w_gate));
    Matrix up = la::matmul(z, layer.w_up);
    return la::matmul(la::hadamard(gate, up), layer.w_down);
  }
  return la::matmul(nn::gelu(la::matmul(z, layer.w_up)), layer.w_down);
}

// Attention + MLP given projections. When `rec` is non-null, head outputs,
// attention output and layer output are stored in it.
Matrix finish(const DecoderConfig &cfg, const DecoderLayerParams &layer, const Matrix &x,
              const std::vector<Matrix> &q, const std::vector<Matrix> &k,
              const std::vector<Matrix> &v, const Compression &comp,
              ActivationRecord *rec, Matrix *attention_out) {
  std::vector<Matrix> keys(k.begin(), k.end());
  std::vector<Matrix> values(v.begin(), v.end());
  if (comp.key_basis)
    for (auto &kk : keys)
      kk = reconstruct(kk, *comp.key_basis);
  if (!comp.value_bases.empty())
    for (std::size_t g = 0; g < values.size(); ++g)
      values[g] = reconstruct(values[g], comp.value_bases[g]);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
  std::vector<Matrix> heads;
  heads.reserve(cfg.n_heads_q);
  for (std::size_t hq = 0; hq < cfg.n_heads_q; ++hq) {
    const std::size_t g = hq / cfg.group_size();
    Matrix scores = la::scale(la::matmul_nt(q[hq], keys[g]), inv_sqrt);
    heads.push_back(la::matmul(nn::row_softmax(scores, true), values[g]));
  }
  Matrix attn = la::matmul(la::concat_cols(heads), layer.w_o);
  Matrix y1 = la::add(x, attn);
  Matrix y = la::add(y1, mlp(cfg, layer, normalize(cfg, y1, layer.norm2_gain, layer.norm2_offset)));
  if (attention_out)
    *attention_out = attn;
  if (rec) {
    rec->head_outputs = std::move(heads);
    rec->attention_output = std::move(attn);
    rec->layer_output = y;
  }
  return y;
}

} // namespace

void check_compression(const DecoderConfig &cfg, const Compression &comp) {
  auto check_basis = [&](const Matrix &p, const char *what) {
    if (p.rows() != cfg.d_h)
      throw DimensionError(std::string(what) + ": basis must have d_h = " +
                           std::to_string(cfg.d_h) + " rows");
    if (p.cols() == 0 || p.cols() > cfg.d_h)
      throw DimensionError(std::string(what) + ": rank " + std::to_string(p.cols()) +
                           " outside [1, d_h]");
    if (la::orthonormality_residual(p) > 1e-8)
      throw ContractError(std::string(what) + ": basis columns are not orthonormal");
  };
  if (comp.key_basis)
    check_basis(*comp.key_basis, "key basis");
  if (!comp.value_bases.empty()) {
    if (comp.value_bases.size() != cfg.n_heads_kv)
      throw DimensionError("value bases: expected one per KV head (" +
                           std::to_string(cfg.n_heads_kv) + ")");
    for (const auto &p : comp.value_bases)
      check_basis(p, "value basis");
  }
}

ForwardResult forward(const DecoderConfig &config, const DecoderLayerParams &layer,
                      const Matrix &x, bool capture) {
  ActivationRecord rec;
  project(config, layer, x, rec);
  ForwardResult out;
  out.y = finish(config, layer, x, rec.q, rec.k, rec.v, {}, &rec, nullptr);
  if (capture)
    out.record = std::move(rec);
  return out;
}

Matrix forward_compressed(const DecoderConfig &config, const DecoderLayerParams &layer,
                          const Matrix &x, const Matrix &key_basis,
                          std::span<const Matrix> value_bases) {
  Compression comp{&key_basis, value_bases};
  check_compression(config, comp);
  if (value_bases.empty())
    throw DimensionError("forward_compressed: value bases required");
  ActivationRecord rec;
  project(config, layer, x, rec);
  return finish(config, layer, x, rec.q, rec.k, rec.v, comp, nullptr, nullptr);
}

Matrix forward_from_record(const DecoderConfig &config, const DecoderLayerParams &layer,
                           const ActivationRecord &record, const Compression &compression,
                           Matrix *attention_out) {
  check_compression(config, compression);
  return finish(config, layer, record.layer_input, record.q, record.k, record.v, compression,
                nullptr, attention_out);
}

FoldedLayer fold_bases(const DecoderConfig &config, const DecoderLayerParams &layer,
                       const Matrix &key_basis, std::span<const Matrix> value_bases) {
  Compression comp{&key_basis, value_bases};
  check_compression(config, comp);
  if (value_bases.empty())
    throw DimensionError("fold_bases: value bases required");
  if (config.rope_enabled)
    throw ConfigError("fold_bases: rotary embeddings sit between the projection and the cache, "
                      "so the key basis cannot be folded into W_K");
  const std::size_t dh = config.d_h;
  FoldedLayer f;
  f.base = layer;
  for (std::size_t hq = 0; hq < config.n_heads_q; ++hq) {
    f.w_q.push_back(la::matmul(la::slice_cols(layer.w_q, hq * dh, dh), key_basis));
    const std::size_t g = hq / config.group_size();
    f.w_o.push_back(la::matmul_tn(value_bases[g], la::slice_rows(layer.w_o, hq * dh, dh)));
  }
  for (std::size_t g = 0; g < config.n_heads_kv; ++g) {
    f.w_k.push_back(la::matmul(la::slice_cols(layer.w_k, g * dh, dh), key_basis));
    f.w_v.push_back(la::matmul(la::slice_cols(layer.w_v, g * dh, dh), value_bases[g]));
  }
  return f;
}

Matrix forward_folded(const DecoderConfig &config, const FoldedLayer &f, const Matrix &x) {
  check_input(config, x);
  const DecoderLayerParams &layer = f.base;
  const Matrix h = normalize(config, x, layer.norm1_gain, layer.norm1_offset);
  std::vector<Matrix> k_down, v_down;
  for (std::size_t g = 0; g < config.n_heads_kv; ++g) {
    k_down.push_back(la::matmul(h, f.w_k[g]));
    v_down.push_back(la::matmul(h, f.w_v[g]));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config.d_h));
  Matrix attn(x.rows(), config.d_model);
  for (std::size_t hq = 0; hq < config.n_heads_q; ++hq) {
    const std::size_t g = hq / config.group_size();
    Matrix q_down = la::matmul(h, f.w_q[hq]);
    Matrix probs = nn::row_softmax(la::scale(la::matmul_nt(q_down, k_down[g]), inv_sqrt), true);
    attn = la::add(attn, la::matmul(la::matmul(probs, v_down[g]), f.w_o[hq]));
  }
  Matrix y1 = la::add(x, attn);
  return la::add(y1, mlp(config, layer, normalize(config, y1, layer.norm2_gain, layer.norm2_offset)));
}

std::vector<ActivationRecord> capture_layer(const DecoderConfig &config,
                                            const DecoderLayerParams &layer,
                                            std::span<const Matrix> inputs) {
  std::vector<ActivationRecord> out;
  out.reserve(inputs.size());
  for (const auto &x : inputs)
    out.push_back(*forward(config, layer, x, true).record);
  return out;
}

std::vector<std::vector<ActivationRecord>> capture_calibration(const DecoderStack &stack,
                                                               std::span<const Matrix> inputs) {
  stack.config.validate();
  std::vector<std::vector<ActivationRecord>> records;
  std::vector<Matrix> current(inputs.begin(), inputs.end());
  for (const auto &layer : stack.layers) {
    records.push_back(capture_layer(stack.config, layer, current));
    for (std::size_t s = 0; s < current.size(); ++s)
      current[s] = records.back()[s].layer_output;
  }
  return records;
}

std::vector<Matrix> gaussian_inputs(std::size_t n_sequences, std::size_t seq_len,
                                    std::size_t d_model, Rng &rng) {
  std::vector<Matrix> xs;
  xs.reserve(n_sequences);
  for (std::size_t s = 0; s < n_sequences; ++s)
    xs.push_back(la::random_gaussian(seq_len, d_model, rng));
  return xs;
}

} // namespace stiefkv::decoder
