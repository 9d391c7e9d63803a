#pragma once

#include <optional>
#include <span>
#include <vector>

#include "stiefkv/linalg.hpp"

namespace stiefkv::decoder {

enum class NormKind { layer_norm, rms_norm };
enum class MlpKind { silu_gated, gelu };

/// Shape of a desk-scale grouped-query-attention decoder.
struct DecoderConfig {
  std::size_t d_model = 64;
  std::size_t n_heads_q = 4;
  std::size_t n_heads_kv = 2;
  std::size_t d_h = 16;
  std::size_t d_ff = 172;
  std::size_t n_layers = 4;
  NormKind norm_kind = NormKind::rms_norm;
  MlpKind mlp_kind = MlpKind::silu_gated;
  bool rope_enabled = false;
  double rope_base = 10000.0;
  double layer_norm_eps = 1e-5;
  double rms_norm_eps = 1e-6;

  /// Throws ConfigError on a violated invariant.
  void validate() const;
  std::size_t group_size() const { return n_heads_q / n_heads_kv; }
};

/// Weights of one pre-norm decoder layer. Projections map row vectors
/// (x W), so W_Q is d_model x (H_Q d_h) and W_O is (H_Q d_h) x d_model.
struct DecoderLayerParams {
  Matrix w_q, w_k, w_v, w_o;
  Matrix w_gate; ///< empty for the GELU MLP
  Matrix w_up, w_down;
  Matrix norm1_gain, norm1_offset;
  Matrix norm2_gain, norm2_offset;
};

struct DecoderStack {
  DecoderConfig config;
  std::vector<DecoderLayerParams> layers;
};

/// Everything a calibration pass needs to know about one layer on one
/// sequence. Q and K are post-rotary when rotary embeddings are enabled.
struct ActivationRecord {
  Matrix layer_input;                ///< n x d_model
  std::vector<Matrix> q;             ///< H_Q of n x d_h
  std::vector<Matrix> k;             ///< H_KV of n x d_h
  std::vector<Matrix> v;             ///< H_KV of n x d_h
  std::vector<Matrix> head_outputs;  ///< H_Q of n x d_h, before W_O
  Matrix attention_output;           ///< n x d_model, after W_O, before the residual
  Matrix layer_output;               ///< n x d_model
};

/// Optional low-rank substitution: K~ = K P_K P_K^T for every KV head and
/// V~_h = V_h P_{V,h} P_{V,h}^T. Either side may be left out.
struct Compression {
  const Matrix *key_basis = nullptr;
  std::span<const Matrix> value_bases;
};

struct ForwardResult {
  Matrix y;
  std::optional<ActivationRecord> record;
};

DecoderStack init_stack(const DecoderConfig &config, Rng &rng);

ForwardResult forward(const DecoderConfig &config, const DecoderLayerParams &layer,
                      const Matrix &x, bool capture);

Matrix forward_compressed(const DecoderConfig &config, const DecoderLayerParams &layer,
                          const Matrix &x, const Matrix &key_basis,
                          std::span<const Matrix> value_bases);

/// Compressed (or plain) layer output reusing the projections stored in a
/// record; bit-identical to forward / forward_compressed on record.layer_input.
/// `attention_out`, when given, receives the post-W_O attention output.
Matrix forward_from_record(const DecoderConfig &config, const DecoderLayerParams &layer,
                           const ActivationRecord &record, const Compression &compression,
                           Matrix *attention_out = nullptr);

/// Validates bases against the config; throws DimensionError / ContractError.
void check_compression(const DecoderConfig &config, const Compression &compression);

/// Weights with the projections folded in: scores are (Q P_K)(K P_K)^T and
/// the value path is (V_h P_{V,h})(P_{V,h}^T W_{O,h}).
struct FoldedLayer {
  std::vector<Matrix> w_q;  ///< per query head, d_model x r_K
  std::vector<Matrix> w_k;  ///< per KV head, d_model x r_K
  std::vector<Matrix> w_v;  ///< per KV head, d_model x r_V
  std::vector<Matrix> w_o;  ///< per query head, r_V x d_model
  DecoderLayerParams base;  ///< norms and MLP
};

FoldedLayer fold_bases(const DecoderConfig &config, const DecoderLayerParams &layer,
                       const Matrix &key_basis, std::span<const Matrix> value_bases);
Matrix forward_folded(const DecoderConfig &config, const FoldedLayer &folded, const Matrix &x);

/// Uncompressed pass through the whole stack; result[l][s] is layer l on
/// input sequence s. Layer l+1 consumes layer l's output.
std::vector<std::vector<ActivationRecord>> capture_calibration(const DecoderStack &stack,
                                                               std::span<const Matrix> inputs);

/// Records for one layer given that layer's inputs.
std::vector<ActivationRecord> capture_layer(const DecoderConfig &config,
                                            const DecoderLayerParams &layer,
                                            std::span<const Matrix> inputs);

/// Seeded Gaussian token embeddings, n_sequences of seq_len x d_model.
std::vector<Matrix> gaussian_inputs(std::size_t n_sequences, std::size_t seq_len,
                                    std::size_t d_model, Rng &rng);

struct RopePair {
  Matrix q, k;
};

/// Rotary embedding on rows 0..n-1 with the given positions.
RopePair apply_rope(const Matrix &q, const Matrix &k, std::span<const std::size_t> positions,
                    double base = 10000.0);

} // namespace stiefkv::decoder
