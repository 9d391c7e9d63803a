#pragma once

#include <array>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stiefkv/autodiff.hpp"
#include "stiefkv/baselines.hpp"
#include "stiefkv/decoder.hpp"
#include "stiefkv/surface.hpp"

namespace stiefkv::stief {

using decoder::ActivationRecord;
using decoder::DecoderConfig;
using decoder::DecoderLayerParams;

/// Per-dimension mean and population variance of a set of activations.
struct ActivationStats {
  std::vector<double> mu;
  std::vector<double> sigma_sq;

  /// [mu; sigma_sq] as a 1 x 2 d_h row.
  Matrix features() const;
};

/// Pools every row of every sample. Throws DegenerateInputError when empty.
ActivationStats compute_stats(std::span<const Matrix> samples);

/// Three GELU(LN(h W + b)) hidden layers and a linear head emitting d_h^2
/// values, reshaped row-major to d_h x d_h. Rows act on row vectors.
struct PredictorParams {
  static constexpr std::size_t kHidden = 3;
  static constexpr std::size_t kTensors = 4 * kHidden + 2;

  std::array<Matrix, kHidden> w;      ///< in x width
  std::array<Matrix, kHidden> b;      ///< 1 x width
  std::array<Matrix, kHidden> gain;   ///< 1 x width
  std::array<Matrix, kHidden> offset; ///< 1 x width
  Matrix w_head;                      ///< width x d_h^2
  Matrix b_head;                      ///< 1 x d_h^2

  std::size_t d_h() const;
  std::size_t width() const { return w[0].cols(); }

  /// Fixed tensor order: w, b, gain, offset per hidden layer, then the head.
  std::vector<Matrix> flatten() const;
  static PredictorParams unflatten(std::span<const Matrix> tensors);
};

/// Hidden layers Gaussian with std 1/sqrt(fan_in), unit gains, zero offsets
/// and biases; head weights Gaussian with std `head_scale` and head bias
/// vec(warm_start) so A starts near the given square matrix.
PredictorParams init_predictor(std::size_t d_h, std::size_t width, const Matrix &warm_start,
                               Rng &rng, double head_scale = 1e-3);

Matrix predictor_forward(const PredictorParams &theta, const ActivationStats &stats);
/// Taped version; `params` follows PredictorParams::flatten order.
ad::Var predictor_forward(ad::Tape &tape, std::span<const ad::Var> params, const ad::Var &s,
                          std::size_t d_h);

/// Q factor of QR(a), R discarded.
Matrix orthonormalize(const Matrix &a);

inline constexpr double kJitter = 1e-8;

/// Truncated basis from a predictor output, adding kJitter * I to `a` and
/// bumping `jitter_events` when `a` is numerically rank deficient.
Matrix basis_from_output(const Matrix &a, std::size_t rank, std::size_t &jitter_events);
ad::Var basis_from_output(const ad::Var &a, std::size_t rank, std::size_t &jitter_events);

struct TrainConfig {
  double learning_rate = 5e-3;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  double min_delta = 1e-6;
  std::size_t batch_size_keys = 1;
  std::size_t batch_size_values = 4;
  std::size_t hidden_width = 0; ///< 0 means 4 * d_h
  double head_init_scale = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Candidate ranks spread uniformly over [lo, hi] * d_h, rounded to the
/// nearest integer, deduplicated, ascending.
std::vector<std::size_t> candidate_ranks(std::size_t d_h, double lo = 0.5, double hi = 0.9,
                                         std::size_t count = 5);

/// Mean over records of ||f(x) - f~(x)||_F / ||f(x)||_F.
double layer_output_delta(const DecoderConfig &config, const DecoderLayerParams &layer,
                          std::span<const ActivationRecord> records,
                          const decoder::Compression &compression);
/// Same, starting from raw layer inputs.
double layer_output_delta(const DecoderConfig &config, const DecoderLayerParams &layer,
                          std::span<const Matrix> inputs, const Matrix &key_basis,
                          std::span<const Matrix> value_bases);

/// Taped mean relative output error over a batch with keys replaced by
/// K P P^T (values uncompressed).
ad::Var key_objective(ad::Tape &tape, const DecoderConfig &config, const DecoderLayerParams &layer,
                      std::span<const ActivationRecord *const> batch, const ad::Var &key_basis);
/// Same with per-KV-head values V_h P_h P_h^T (keys uncompressed).
ad::Var value_objective(ad::Tape &tape, const DecoderConfig &config,
                        const DecoderLayerParams &layer,
                        std::span<const ActivationRecord *const> batch,
                        std::span<const ad::Var> value_bases);

struct LogRow {
  std::size_t layer = 0;
  std::string target; ///< "key" or "value"
  std::size_t rank = 0;
  std::size_t epoch = 0; ///< 0 is the untrained predictor
  double loss = 0.0;
  double lr = 0.0;
  std::size_t jitter_events = 0;
};

std::string log_csv(std::span<const LogRow> rows);

struct KeyTrainResult {
  Matrix full_basis; ///< d_h x d_h, P-bar
  Matrix basis;      ///< d_h x r
  std::vector<LogRow> log;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::size_t epochs_run = 0;
  std::size_t jitter_events = 0;
};

struct ValueTrainResult {
  std::vector<Matrix> full_bases;
  std::vector<Matrix> bases;
  std::vector<LogRow> log;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::size_t epochs_run = 0;
  std::size_t jitter_events = 0;
};

/// `layer_index` only labels the log.
KeyTrainResult train_key_basis(const DecoderConfig &config, const DecoderLayerParams &layer,
                               std::span<const ActivationRecord> records, std::size_t rank,
                               const TrainConfig &train, std::size_t layer_index = 0);
ValueTrainResult train_value_bases(const DecoderConfig &config, const DecoderLayerParams &layer,
                                   std::span<const ActivationRecord> records, std::size_t rank,
                                   const TrainConfig &train, std::size_t layer_index = 0);

/// Per-layer, per-rank bases. Keys are shared across KV heads.
struct BasisStore {
  std::string provenance; ///< "stief" or a baseline kind name
  std::size_t d_h = 0;
  std::size_t n_heads_kv = 0;
  std::vector<std::size_t> ranks_k;
  std::vector<std::size_t> ranks_v;
  /// layers[l].key[i] for ranks_k[i]; layers[l].value[j][h] for ranks_v[j].
  struct Layer {
    std::vector<Matrix> key;
    std::vector<std::vector<Matrix>> value;
  };
  std::vector<Layer> layers;
  std::vector<LogRow> log;

  const Matrix &key_basis(std::size_t layer, std::size_t rank) const;
  const std::vector<Matrix> &value_bases(std::size_t layer, std::size_t rank) const;
  bool has_ranks(std::size_t r_k, std::size_t r_v) const;
  /// Largest ||P^T P - I||_F over every stored basis.
  double max_orthonormality_residual() const;
};

struct Algorithm1Result {
  BasisStore store;
  std::vector<surface::ErrorSurface> surfaces;
};

/// Keys of every KV head over all records, stacked along tokens.
Matrix pooled_keys(std::span<const ActivationRecord> records);
/// Queries of every query head over all records, stacked along tokens.
Matrix pooled_queries(std::span<const ActivationRecord> records);
/// Values of one KV head over all records.
Matrix pooled_values(std::span<const ActivationRecord> records, std::size_t head);

/// Train every (layer, rank) cell and evaluate the error surfaces.
/// `threads` caps the number of cells trained concurrently.
Algorithm1Result run_algorithm_1(const decoder::DecoderStack &stack,
                                 std::span<const Matrix> calib_inputs,
                                 const std::vector<std::size_t> &ranks_k,
                                 const std::vector<std::size_t> &ranks_v,
                                 const TrainConfig &train, std::size_t threads = 1);
/// Same from per-layer records (records[l] holds layer l on every sequence).
Algorithm1Result run_algorithm_1(const decoder::DecoderStack &stack,
                                 const std::vector<std::vector<ActivationRecord>> &records,
                                 const std::vector<std::size_t> &ranks_k,
                                 const std::vector<std::size_t> &ranks_v,
                                 const TrainConfig &train, std::size_t threads = 1);

/// Closed-form bases from recorded activations for every layer and rank.
BasisStore baseline_store(baselines::BaselineKind kind, const decoder::DecoderStack &stack,
                          const std::vector<std::vector<ActivationRecord>> &records,
                          const std::vector<std::size_t> &ranks_k,
                          const std::vector<std::size_t> &ranks_v);

/// Delta over every rank pair of `store`, layer by layer.
std::vector<surface::ErrorSurface>
build_surfaces(const decoder::DecoderStack &stack,
               const std::vector<std::vector<ActivationRecord>> &records, const BasisStore &store);

} // namespace stiefkv::stief
