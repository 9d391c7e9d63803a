#include "stiefkv/stief.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

#include "stiefkv/kernels.hpp"

namespace stiefkv::stief {

namespace la = linalg;

// ---------------------------------------------------------------- statistics

Matrix ActivationStats::features() const {
  std::vector<double> s(mu);
  s.insert(s.end(), sigma_sq.begin(), sigma_sq.end());
  return Matrix::row_vector(s);
}

ActivationStats compute_stats(std::span<const Matrix> samples) {
  std::size_t count = 0;
  std::size_t d = 0;
  for (const auto &m : samples) {
    if (m.rows() == 0)
      continue;
    if (count && m.cols() != d)
      throw DimensionError("compute_stats: samples disagree on width");
    d = m.cols();
    count += m.rows();
  }
  if (count == 0)
    throw DegenerateInputError("compute_stats: no activation rows");
  ActivationStats st{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto &m : samples)
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        st.mu[j] += m(i, j);
  for (double &x : st.mu)
    x /= static_cast<double>(count);
  for (const auto &m : samples)
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = m(i, j) - st.mu[j];
        st.sigma_sq[j] += c * c;
      }
  for (double &x : st.sigma_sq)
    x /= static_cast<double>(count);
  return st;
}

// ----------------------------------------------------------------- predictor

std::size_t PredictorParams::d_h() const {
  return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(b_head.cols()))));
}

std::vector<Matrix> PredictorParams::flatten() const {
  std::vector<Matrix> out;
  out.reserve(kTensors);
  for (std::size_t i = 0; i < kHidden; ++i) {
    out.push_back(w[i]);
    out.push_back(b[i]);
    out.push_back(gain[i]);
    out.push_back(offset[i]);
  }
  out.push_back(w_head);
  out.push_back(b_head);
  return out;
}

PredictorParams PredictorParams::unflatten(std::span<const Matrix> t) {
  if (t.size() != kTensors)
    throw DimensionError("predictor: expected " + std::to_string(kTensors) + " tensors");
  PredictorParams p;
  for (std::size_t i = 0; i < kHidden; ++i) {
    p.w[i] = t[4 * i];
    p.b[i] = t[4 * i + 1];
    p.gain[i] = t[4 * i + 2];
    p.offset[i] = t[4 * i + 3];
  }
  p.w_head = t[4 * kHidden];
  p.b_head = t[4 * kHidden + 1];
  return p;
}

PredictorParams init_predictor(std::size_t d_h, std::size_t width, const Matrix &warm_start,
                               Rng &rng, double head_scale) {
  if (warm_start.rows() != d_h || warm_start.cols() != d_h)
    throw DimensionError("init_predictor: warm start must be d_h x d_h");
  PredictorParams p;
  std::size_t fan_in = 2 * d_h;
  for (std::size_t i = 0; i < PredictorParams::kHidden; ++i) {
    p.w[i] = la::random_gaussian(fan_in, width, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    p.b[i] = Matrix(1, width, 0.0);
    p.gain[i] = Matrix(1, width, 1.0);
    p.offset[i] = Matrix(1, width, 0.0);
    fan_in = width;
  }
  p.w_head = la::random_gaussian(width, d_h * d_h, rng, head_scale);
  p.b_head = Matrix(1, d_h * d_h, std::vector<double>(warm_start.data().begin(),
                                                       warm_start.data().end()));
  return p;
}

ad::Var predictor_forward(ad::Tape &tape, std::span<const ad::Var> params, const ad::Var &s,
                          std::size_t d_h) {
  if (params.size() != PredictorParams::kTensors)
    throw DimensionError("predictor_forward: wrong parameter count");
  if (s.rows() != 1 || s.cols() != params[0].rows())
    throw DimensionError("predictor_forward: feature width " + std::to_string(s.cols()) +
                         " does not match input layer " + std::to_string(params[0].rows()));
  (void)tape;
  ad::Var h = s;
  for (std::size_t i = 0; i < PredictorParams::kHidden; ++i) {
    const auto *p = &params[4 * i];
    h = ad::gelu(ad::layer_norm(ad::add(ad::matmul(h, p[0]), p[1]), p[2], p[3]));
  }
  const auto *head = &params[4 * PredictorParams::kHidden];
  if (head[0].cols() != d_h * d_h)
    throw DimensionError("predictor_forward: head must emit d_h^2 values");
  return ad::reshape(ad::add(ad::matmul(h, head[0]), head[1]), d_h, d_h);
}

Matrix predictor_forward(const PredictorParams &theta, const ActivationStats &stats) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (auto &m : theta.flatten())
    vars.push_back(tape.constant(std::move(m)));
  return predictor_forward(tape, vars, tape.constant(stats.features()), theta.d_h()).value();
}

Matrix orthonormalize(const Matrix &a) { return la::qr_decompose(a).q; }

Matrix basis_from_output(const Matrix &a, std::size_t rank, std::size_t &jitter_events) {
  try {
    return la::truncate_columns(orthonormalize(a), rank);
  } catch (const RankDeficiencyError &) {
    ++jitter_events;
    return la::truncate_columns(
        orthonormalize(la::add(a, la::scale(Matrix::identity(a.rows()), kJitter))), rank);
  }
}

ad::Var basis_from_output(const ad::Var &a, std::size_t rank, std::size_t &jitter_events) {
  if (rank == 0 || rank > a.cols())
    throw DimensionError("basis rank " + std::to_string(rank) + " outside [1, d_h]");
  ad::Var q;
  try {
    q = ad::qr_q(a);
  } catch (const RankDeficiencyError &) {
    ++jitter_events;
    q = ad::qr_q(ad::add(a, a.tape()->constant(la::scale(Matrix::identity(a.rows()), kJitter))));
  }
  return ad::slice_cols(q, 0, rank);
}

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  auto fail = [](const std::string &m) { throw ConfigError("train config: " + m); };
  if (!(learning_rate > 0) || !(weight_decay >= 0) || !(adam_eps > 0) || !(min_delta >= 0))
    fail("learning rate and eps must be positive; weight decay and min_delta nonnegative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    fail("Adam betas must lie in [0, 1)");
  if (max_epochs == 0 || patience == 0 || batch_size_keys == 0 || batch_size_values == 0)
    fail("epochs, patience and batch sizes must be positive");
  if (patience > max_epochs)
    fail("patience exceeds max_epochs");
  if (!(head_init_scale >= 0))
    fail("head_init_scale must be nonnegative");
}

std::vector<std::size_t> candidate_ranks(std::size_t d_h, double lo, double hi, std::size_t count) {
  if (d_h == 0 || count == 0 || !(lo > 0) || !(hi <= 1) || lo > hi)
    throw ConfigError("candidate ranks need d_h > 0, count > 0 and 0 < lo <= hi <= 1");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double f = count == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / (count - 1);
    const auto r = static_cast<std::size_t>(std::llround(f * static_cast<double>(d_h)));
    out.push_back(std::clamp<std::size_t>(r, 1, d_h));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// -------------------------------------------------------------- objectives

double layer_output_delta(const DecoderConfig &config, const DecoderLayerParams &layer,
                          std::span<const ActivationRecord> records,
                          const decoder::Compression &compression) {
  if (records.empty())
    throw DegenerateInputError("layer_output_delta: no calibration sequences");
  double total = 0.0;
  for (const auto &rec : records)
    total += la::relative_error(rec.layer_output,
                                decoder::forward_from_record(config, layer, rec, compression));
  return total / static_cast<double>(records.size());
}

double layer_output_delta(const DecoderConfig &config, const DecoderLayerParams &layer,
                          std::span<const Matrix> inputs, const Matrix &key_basis,
                          std::span<const Matrix> value_bases) {
  return layer_output_delta(config, layer, decoder::capture_layer(config, layer, inputs),
                            decoder::Compression{&key_basis, value_bases});
}

namespace {

// Layer weights placed on a tape once per objective.
struct TapedWeights {
  std::vector<ad::Var> w_o_head; // per query head, d_h x d_model
  ad::Var gain, offset, w_gate, w_up, w_down;
};

TapedWeights tape_weights(ad::Tape &t, const DecoderConfig &c, const DecoderLayerParams &p) {
  TapedWeights w;
  for (std::size_t h = 0; h < c.n_heads_q; ++h)
    w.w_o_head.push_back(t.constant(la::slice_rows(p.w_o, h * c.d_h, c.d_h)));
  w.gain = t.constant(p.norm2_gain);
  w.offset = t.constant(p.norm2_offset);
  if (c.mlp_kind == decoder::MlpKind::silu_gated)
    w.w_gate = t.constant(p.w_gate);
  w.w_up = t.constant(p.w_up);
  w.w_down = t.constant(p.w_down);
  return w;
}

// Everything after the per-head attention outputs: W_O, residual, norm, MLP.
ad::Var layer_tail(ad::Tape &t, const DecoderConfig &c, const TapedWeights &w, const Matrix &x,
                   const std::vector<ad::Var> &heads) {
  ad::Var attn = ad::matmul(heads[0], w.w_o_head[0]);
  for (std::size_t h = 1; h < heads.size(); ++h)
    attn = ad::add(attn, ad::matmul(heads[h], w.w_o_head[h]));
  ad::Var y1 = ad::add(t.constant(x), attn);
  ad::Var z = c.norm_kind == decoder::NormKind::rms_norm
                  ? ad::rms_norm(y1, w.gain, c.rms_norm_eps)
                  : ad::layer_norm(y1, w.gain, w.offset, c.layer_norm_eps);
  ad::Var mlp = c.mlp_kind == decoder::MlpKind::silu_gated
                    ? ad::matmul(ad::hadamard(ad::silu(ad::matmul(z, w.w_gate)),
                                              ad::matmul(z, w.w_up)),
                                 w.w_down)
                    : ad::matmul(ad::gelu(ad::matmul(z, w.w_up)), w.w_down);
  return ad::add(y1, mlp);
}

ad::Var batch_mean(std::vector<ad::Var> &losses) {
  ad::Var total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i)
    total = ad::add(total, losses[i]);
  return ad::scale(total, 1.0 / static_cast<double>(losses.size()));
}

void check_batch(std::span<const ActivationRecord *const> batch) {
  if (batch.empty())
    throw DegenerateInputError("training objective: empty batch");
}

} // namespace

ad::Var key_objective(ad::Tape &t, const DecoderConfig &c, const DecoderLayerParams &layer,
                      std::span<const ActivationRecord *const> batch, const ad::Var &key_basis) {
  check_batch(batch);
  if (key_basis.rows() != c.d_h)
    throw DimensionError("key_objective: basis must have d_h rows");
  const TapedWeights w = tape_weights(t, c, layer);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.d_h));
  const ad::Var pt = ad::transpose(key_basis);
  std::vector<ad::Var> losses;
  for (const ActivationRecord *rec : batch) {
    std::vector<ad::Var> k_rec_t; // (K P P^T)^T per KV head
    for (std::size_t g = 0; g < c.n_heads_kv; ++g)
      k_rec_t.push_back(
          ad::transpose(ad::matmul(ad::matmul(t.constant(rec->k[g]), key_basis), pt)));
    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < c.n_heads_q; ++h) {
      const std::size_t g = h / c.group_size();
      ad::Var scores = ad::scale(ad::matmul(t.constant(rec->q[h]), k_rec_t[g]), inv_sqrt);
      heads.push_back(ad::matmul(ad::row_softmax(scores, true), t.constant(rec->v[g])));
    }
    ad::Var y = layer_tail(t, c, w, rec->layer_input, heads);
    losses.push_back(ad::frobenius_ratio_loss(t.constant(rec->layer_output), y));
  }
  return batch_mean(losses);
}

ad::Var value_objective(ad::Tape &t, const DecoderConfig &c, const DecoderLayerParams &layer,
                        std::span<const ActivationRecord *const> batch,
                        std::span<const ad::Var> value_bases) {
  check_batch(batch);
  if (value_bases.size() != c.n_heads_kv)
    throw DimensionError("value_objective: expected one basis per KV head");
  const TapedWeights w = tape_weights(t, c, layer);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.d_h));
  std::vector<ad::Var> pts;
  for (const auto &p : value_bases)
    pts.push_back(ad::transpose(p));
  std::vector<ad::Var> losses;
  for (const ActivationRecord *rec : batch) {
    std::vector<ad::Var> v_rec;
    for (std::size_t g = 0; g < c.n_heads_kv; ++g)
      v_rec.push_back(ad::matmul(ad::matmul(t.constant(rec->v[g]), value_bases[g]), pts[g]));
    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < c.n_heads_q; ++h) {
      const std::size_t g = h / c.group_size();
      // Keys are exact here, so the attention weights are constants.
      Matrix probs = nn::row_softmax(la::scale(la::matmul_nt(rec->q[h], rec->k[g]), inv_sqrt), true);
      heads.push_back(ad::matmul(t.constant(std::move(probs)), v_rec[g]));
    }
    ad::Var y = layer_tail(t, c, w, rec->layer_input, heads);
    losses.push_back(ad::frobenius_ratio_loss(t.constant(rec->layer_output), y));
  }
  return batch_mean(losses);
}

std::string log_csv(std::span<const LogRow> rows) {
  std::string out = "layer,target,rank,epoch,loss,lr,jitter_events\n";
  for (const auto &r : rows)
    out += std::to_string(r.layer) + "," + r.target + "," + std::to_string(r.rank) + "," +
           std::to_string(r.epoch) + "," + la::format_real(r.loss) + "," + la::format_real(r.lr) +
           "," + std::to_string(r.jitter_events) + "\n";
  return out;
}

// ----------------------------------------------------------------- training

namespace {

struct AdamW {
  const TrainConfig &cfg;
  std::vector<Matrix> m, v;
  std::size_t t = 0;

  explicit AdamW(const TrainConfig &c, const std::vector<Matrix> &params) : cfg(c) {
    for (const auto &p : params) {
      m.emplace_back(p.rows(), p.cols(), 0.0);
      v.emplace_back(p.rows(), p.cols(), 0.0);
    }
  }

  void step(std::vector<Matrix> &params, const std::vector<Matrix> &grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k].data();
      auto g = grads[k].data();
      auto mk = m[k].data();
      auto vk = v[k].data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= lr * cfg.weight_decay * p[i];
        mk[i] = cfg.adam_beta1 * mk[i] + (1.0 - cfg.adam_beta1) * g[i];
        vk[i] = cfg.adam_beta2 * vk[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
        const double mhat = mk[i] / bc1;
        const double vhat = vk[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      }
    }
  }
};

double cosine_lr(double base, std::size_t step, std::size_t total) {
  return base * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

void shuffle(std::vector<std::size_t> &v, Rng &rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.below(i)]);
}

using Objective = std::function<ad::Var(ad::Tape &, std::span<const ActivationRecord *const>,
                                        std::span<const ad::Var>)>;
using Evaluate = std::function<double(const std::vector<Matrix> &)>;

struct Trained {
  std::vector<Matrix> full_bases;
  std::vector<LogRow> log;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::size_t epochs_run = 0;
  std::size_t jitter_events = 0;
};

// Shared loop for key (one predictor) and value (one per KV head) training.
Trained train_predictors(std::span<const ActivationRecord> records,
                         const std::vector<ActivationStats> &stats,
                         const std::vector<Matrix> &warm_starts, std::size_t rank,
                         std::size_t batch_size, const TrainConfig &cfg, const Objective &objective,
                         const Evaluate &evaluate, std::size_t layer_index, const char *target,
                         std::uint64_t salt) {
  cfg.validate();
  if (records.empty())
    throw DegenerateInputError("training: no calibration records");
  const std::size_t d = warm_starts[0].rows();
  if (rank == 0 || rank > d)
    throw DimensionError("training: rank " + std::to_string(rank) + " outside [1, d_h]");
  const std::size_t width = cfg.hidden_width ? cfg.hidden_width : 4 * d;
  const std::size_t n_pred = stats.size();

  Rng rng(mix_seed(cfg.seed, salt));
  std::vector<Matrix> params;
  std::vector<Matrix> features;
  for (std::size_t p = 0; p < n_pred; ++p) {
    auto t = init_predictor(d, width, warm_starts[p], rng, cfg.head_init_scale).flatten();
    params.insert(params.end(), t.begin(), t.end());
    features.push_back(stats[p].features());
  }
  constexpr std::size_t kT = PredictorParams::kTensors;

  Trained out;
  auto full_bases = [&](std::size_t &jitter) {
    std::vector<Matrix> bases;
    for (std::size_t p = 0; p < n_pred; ++p) {
      auto theta = PredictorParams::unflatten(std::span(params).subspan(p * kT, kT));
      bases.push_back(basis_from_output(predictor_forward(theta, stats[p]), d, jitter));
    }
    return bases;
  };
  auto truncated = [&](const std::vector<Matrix> &full) {
    std::vector<Matrix> t;
    for (const auto &b : full)
      t.push_back(la::truncate_columns(b, rank));
    return t;
  };

  std::vector<Matrix> best = full_bases(out.jitter_events);
  out.initial_loss = out.best_loss = evaluate(truncated(best));
  if (!std::isfinite(out.initial_loss))
    throw TrainingDivergedError(std::string(target) + " loss is non-finite before training", 0);
  out.log.push_back({layer_index, target, rank, 0, out.initial_loss, cfg.learning_rate,
                     out.jitter_events});

  const std::size_t n = records.size();
  const std::size_t steps_per_epoch = (n + batch_size - 1) / batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.max_epochs;
  AdamW opt(cfg, params);
  std::vector<std::size_t> order(n);
  std::size_t step = 0, wait = 0;
  double lr = cfg.learning_rate;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i)
      order[i] = i;
    shuffle(order, rng);
    for (std::size_t start = 0; start < n; start += batch_size) {
      std::vector<const ActivationRecord *> batch;
      for (std::size_t i = start; i < std::min(n, start + batch_size); ++i)
        batch.push_back(&records[order[i]]);

      ad::Tape tape;
      std::vector<ad::Var> vars;
      for (const auto &p : params)
        vars.push_back(tape.leaf(p));
      std::vector<ad::Var> bases;
      for (std::size_t p = 0; p < n_pred; ++p) {
        ad::Var a = predictor_forward(tape, std::span(vars).subspan(p * kT, kT),
                                      tape.constant(features[p]), d);
        bases.push_back(basis_from_output(a, rank, out.jitter_events));
      }
      ad::Var loss = objective(tape, batch, bases);
      if (!std::isfinite(loss.value()(0, 0)))
        throw TrainingDivergedError(std::string(target) + " training at rank " +
                                        std::to_string(rank) + " produced a non-finite loss",
                                    step);
      tape.backward(loss);
      std::vector<Matrix> grads;
      for (const auto &v : vars) {
        grads.push_back(v.grad());
        if (!la::all_finite(grads.back()))
          throw TrainingDivergedError(std::string(target) + " training at rank " +
                                          std::to_string(rank) + " produced a non-finite gradient",
                                      step);
      }
      lr = cosine_lr(cfg.learning_rate, step, total_steps);
      opt.step(params, grads, lr);
      ++step;
    }

    std::vector<Matrix> current = full_bases(out.jitter_events);
    const double loss = evaluate(truncated(current));
    if (!std::isfinite(loss))
      throw TrainingDivergedError(std::string(target) + " evaluation diverged", step);
    out.epochs_run = epoch;
    out.log.push_back({layer_index, target, rank, epoch, loss, lr, out.jitter_events});
    if (loss < out.best_loss) {
      const double gain = out.best_loss - loss;
      out.best_loss = loss;
      best = std::move(current);
      wait = gain > cfg.min_delta ? 0 : wait + 1;
    } else {
      ++wait;
    }
    if (wait >= cfg.patience)
      break;
  }
  out.full_bases = std::move(best);
  return out;
}

std::uint64_t cell_salt(std::size_t layer, std::size_t target, std::size_t rank) {
  return (static_cast<std::uint64_t>(layer) << 32) | (static_cast<std::uint64_t>(target) << 24) |
         static_cast<std::uint64_t>(rank);
}

} // namespace

Matrix pooled_keys(std::span<const ActivationRecord> records) {
  std::vector<Matrix> blocks;
  for (const auto &r : records)
    blocks.insert(blocks.end(), r.k.begin(), r.k.end());
  return la::concat_rows(blocks);
}

Matrix pooled_queries(std::span<const ActivationRecord> records) {
  std::vector<Matrix> blocks;
  for (const auto &r : records)
    blocks.insert(blocks.end(), r.q.begin(), r.q.end());
  return la::concat_rows(blocks);
}

Matrix pooled_values(std::span<const ActivationRecord> records, std::size_t head) {
  std::vector<Matrix> blocks;
  for (const auto &r : records)
    blocks.push_back(r.v.at(head));
  return la::concat_rows(blocks);
}

KeyTrainResult train_key_basis(const DecoderConfig &config, const DecoderLayerParams &layer,
                               std::span<const ActivationRecord> records, std::size_t rank,
                               const TrainConfig &train, std::size_t layer_index) {
  if (records.empty())
    throw DegenerateInputError("train_key_basis: no calibration records");
  std::vector<Matrix> keys;
  for (const auto &r : records)
    keys.insert(keys.end(), r.k.begin(), r.k.end());
  const std::vector<ActivationStats> stats{compute_stats(keys)};
  const std::vector<Matrix> warm{baselines::ksvd_basis(pooled_keys(records), config.d_h)};

  Objective objective = [&](ad::Tape &t, std::span<const ActivationRecord *const> batch,
                            std::span<const ad::Var> bases) {
    return key_objective(t, config, layer, batch, bases[0]);
  };
  Evaluate evaluate = [&](const std::vector<Matrix> &bases) {
    return layer_output_delta(config, layer, records, decoder::Compression{&bases[0], {}});
  };
  Trained tr = train_predictors(records, stats, warm, rank, train.batch_size_keys, train, objective,
                                evaluate, layer_index, "key", cell_salt(layer_index, 1, rank));
  KeyTrainResult out;
  out.full_basis = tr.full_bases[0];
  out.basis = la::truncate_columns(out.full_basis, rank);
  out.log = std::move(tr.log);
  out.initial_loss = tr.initial_loss;
  out.best_loss = tr.best_loss;
  out.epochs_run = tr.epochs_run;
  out.jitter_events = tr.jitter_events;
  return out;
}

ValueTrainResult train_value_bases(const DecoderConfig &config, const DecoderLayerParams &layer,
                                   std::span<const ActivationRecord> records, std::size_t rank,
                                   const TrainConfig &train, std::size_t layer_index) {
  if (records.empty())
    throw DegenerateInputError("train_value_bases: no calibration records");
  std::vector<ActivationStats> stats;
  std::vector<Matrix> warm;
  for (std::size_t g = 0; g < config.n_heads_kv; ++g) {
    std::vector<Matrix> vs;
    for (const auto &r : records)
      vs.push_back(r.v.at(g));
    stats.push_back(compute_stats(vs));
    warm.push_back(baselines::eigen_value_basis(pooled_values(records, g), config.d_h));
  }
  Objective objective = [&](ad::Tape &t, std::span<const ActivationRecord *const> batch,
                            std::span<const ad::Var> bases) {
    return value_objective(t, config, layer, batch, bases);
  };
  Evaluate evaluate = [&](const std::vector<Matrix> &bases) {
    return layer_output_delta(config, layer, records, decoder::Compression{nullptr, bases});
  };
  Trained tr = train_predictors(records, stats, warm, rank, train.batch_size_values, train,
                                objective, evaluate, layer_index, "value",
                                cell_salt(layer_index, 2, rank));
  ValueTrainResult out;
  out.full_bases = tr.full_bases;
  for (const auto &b : tr.full_bases)
    out.bases.push_back(la::truncate_columns(b, rank));
  out.log = std::move(tr.log);
  out.initial_loss = tr.initial_loss;
  out.best_loss = tr.best_loss;
  out.epochs_run = tr.epochs_run;
  out.jitter_events = tr.jitter_events;
  return out;
}

// -------------------------------------------------------------- basis store

namespace {

std::size_t rank_index(const std::vector<std::size_t> &ranks, std::size_t r, const char *what,
                       const std::string &provenance) {
  auto it = std::find(ranks.begin(), ranks.end(), r);
  if (it == ranks.end())
    throw ContractError(std::string(what) + " rank " + std::to_string(r) + " is not in the " +
                        provenance + " basis store");
  return static_cast<std::size_t>(it - ranks.begin());
}

} // namespace

const Matrix &BasisStore::key_basis(std::size_t layer, std::size_t rank) const {
  return layers.at(layer).key.at(rank_index(ranks_k, rank, "key", provenance));
}

const std::vector<Matrix> &BasisStore::value_bases(std::size_t layer, std::size_t rank) const {
  return layers.at(layer).value.at(rank_index(ranks_v, rank, "value", provenance));
}

bool BasisStore::has_ranks(std::size_t r_k, std::size_t r_v) const {
  return std::find(ranks_k.begin(), ranks_k.end(), r_k) != ranks_k.end() &&
         std::find(ranks_v.begin(), ranks_v.end(), r_v) != ranks_v.end();
}

double BasisStore::max_orthonormality_residual() const {
  double worst = 0.0;
  for (const auto &l : layers) {
    for (const auto &p : l.key)
      worst = std::max(worst, la::orthonormality_residual(p));
    for (const auto &heads : l.value)
      for (const auto &p : heads)
        worst = std::max(worst, la::orthonormality_residual(p));
  }
  return worst;
}

std::vector<surface::ErrorSurface>
build_surfaces(const decoder::DecoderStack &stack,
               const std::vector<std::vector<ActivationRecord>> &records, const BasisStore &store) {
  std::vector<surface::ErrorSurface> out;
  for (std::size_t l = 0; l < store.layers.size(); ++l) {
    surface::ErrorSurface s;
    s.layer = l;
    s.d_h = store.d_h;
    s.ranks_k = store.ranks_k;
    s.ranks_v = store.ranks_v;
    for (std::size_t i = 0; i < store.ranks_k.size(); ++i) {
      std::vector<double> row;
      for (std::size_t j = 0; j < store.ranks_v.size(); ++j)
        row.push_back(layer_output_delta(
            stack.config, stack.layers[l], records[l],
            decoder::Compression{&store.layers[l].key[i], store.layers[l].value[j]}));
      s.delta.push_back(std::move(row));
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

void check_ranks(const std::vector<std::size_t> &ranks, std::size_t d_h, const char *what) {
  if (ranks.empty())
    throw ConfigError(std::string(what) + " candidate ranks are empty");
  if (!std::is_sorted(ranks.begin(), ranks.end()) ||
      std::adjacent_find(ranks.begin(), ranks.end()) != ranks.end())
    throw ConfigError(std::string(what) + " candidate ranks must be strictly ascending");
  if (ranks.front() == 0 || ranks.back() > d_h)
    throw ConfigError(std::string(what) + " candidate ranks must lie in [1, d_h]");
}

} // namespace

Algorithm1Result run_algorithm_1(const decoder::DecoderStack &stack,
                                 std::span<const Matrix> calib_inputs,
                                 const std::vector<std::size_t> &ranks_k,
                                 const std::vector<std::size_t> &ranks_v,
                                 const TrainConfig &train, std::size_t threads) {
  stack.config.validate();
  return run_algorithm_1(stack, decoder::capture_calibration(stack, calib_inputs), ranks_k,
                         ranks_v, train, threads);
}

Algorithm1Result run_algorithm_1(const decoder::DecoderStack &stack,
                                 const std::vector<std::vector<ActivationRecord>> &records,
                                 const std::vector<std::size_t> &ranks_k,
                                 const std::vector<std::size_t> &ranks_v,
                                 const TrainConfig &train, std::size_t threads) {
  const auto &c = stack.config;
  c.validate();
  train.validate();
  check_ranks(ranks_k, c.d_h, "key");
  check_ranks(ranks_v, c.d_h, "value");
  if (records.size() != c.n_layers)
    throw DimensionError("run_algorithm_1: need records for every layer");

  struct Cell {
    std::size_t layer;
    bool key;
    std::size_t rank_index;
  };
  std::vector<Cell> cells;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t i = 0; i < ranks_k.size(); ++i)
      cells.push_back({l, true, i});
    for (std::size_t j = 0; j < ranks_v.size(); ++j)
      cells.push_back({l, false, j});
  }
  std::vector<KeyTrainResult> key_res(cells.size());
  std::vector<ValueTrainResult> val_res(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());

  auto run_cell = [&](std::size_t idx) {
    const Cell &cell = cells[idx];
    try {
      if (cell.key)
        key_res[idx] = train_key_basis(c, stack.layers[cell.layer], records[cell.layer],
                                       ranks_k[cell.rank_index], train, cell.layer);
      else
        val_res[idx] = train_value_bases(c, stack.layers[cell.layer], records[cell.layer],
                                         ranks_v[cell.rank_index], train, cell.layer);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, cells.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++)
          run_cell(i);
      });
    for (auto &t : pool)
      t.join();
  }

  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!errors[i])
      continue;
    const std::string where = "layer " + std::to_string(cells[i].layer) + ": ";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const TrainingDivergedError &e) {
      throw TrainingDivergedError(where + e.what(), e.step());
    } catch (const Error &e) {
      throw NumericError(where + e.what());
    }
  }

  Algorithm1Result out;
  BasisStore &store = out.store;
  store.provenance = "stief";
  store.d_h = c.d_h;
  store.n_heads_kv = c.n_heads_kv;
  store.ranks_k = ranks_k;
  store.ranks_v = ranks_v;
  store.layers.resize(c.n_layers);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto &layer = store.layers[cells[i].layer];
    if (cells[i].key) {
      layer.key.push_back(key_res[i].basis);
      store.log.insert(store.log.end(), key_res[i].log.begin(), key_res[i].log.end());
    } else {
      layer.value.push_back(val_res[i].bases);
      store.log.insert(store.log.end(), val_res[i].log.begin(), val_res[i].log.end());
    }
  }
  out.surfaces = build_surfaces(stack, records, store);
  return out;
}

BasisStore baseline_store(baselines::BaselineKind kind, const decoder::DecoderStack &stack,
                          const std::vector<std::vector<ActivationRecord>> &records,
                          const std::vector<std::size_t> &ranks_k,
                          const std::vector<std::size_t> &ranks_v) {
  const auto &c = stack.config;
  check_ranks(ranks_k, c.d_h, "key");
  check_ranks(ranks_v, c.d_h, "value");
  if (records.size() != c.n_layers)
    throw DimensionError("baseline_store: need records for every layer");
  BasisStore store;
  store.provenance = std::string(baselines::kind_name(kind));
  store.d_h = c.d_h;
  store.n_heads_kv = c.n_heads_kv;
  store.ranks_k = ranks_k;
  store.ranks_v = ranks_v;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Matrix keys = pooled_keys(records[l]);
    const Matrix queries = pooled_queries(records[l]);
    std::vector<Matrix> values;
    std::vector<Matrix> w_o_group;
    for (std::size_t g = 0; g < c.n_heads_kv; ++g) {
      values.push_back(pooled_values(records[l], g));
      // Value head g feeds every query head of its group.
      std::vector<Matrix> blocks;
      for (std::size_t h = g * c.group_size(); h < (g + 1) * c.group_size(); ++h)
        blocks.push_back(la::slice_rows(stack.layers[l].w_o, h * c.d_h, c.d_h));
      w_o_group.push_back(la::concat_cols(blocks));
    }
    BasisStore::Layer layer;
    for (std::size_t r : ranks_k) {
      switch (kind) {
      case baselines::BaselineKind::k_svd:
        layer.key.push_back(baselines::ksvd_basis(keys, r));
        break;
      case baselines::BaselineKind::eigen:
        layer.key.push_back(baselines::eigen_basis(keys, queries, r));
        break;
      case baselines::BaselineKind::kq_svd:
        layer.key.push_back(orthonormalize(baselines::kqsvd_factors(queries, keys, r).p_k));
        break;
      }
    }
    for (std::size_t r : ranks_v) {
      std::vector<Matrix> heads;
      for (std::size_t g = 0; g < c.n_heads_kv; ++g)
        heads.push_back(kind == baselines::BaselineKind::kq_svd
                            ? baselines::kqsvd_value_basis(values[g], w_o_group[g], r)
                            : baselines::eigen_value_basis(values[g], r));
      layer.value.push_back(std::move(heads));
    }
    store.layers.push_back(std::move(layer));
  }
  return store;
}

} // namespace stiefkv::stief
