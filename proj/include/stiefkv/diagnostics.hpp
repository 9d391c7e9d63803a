#pragma once

#include <span>
#include <string>
#include <vector>

#include "stiefkv/decoder.hpp"
#include "stiefkv/stief.hpp"

namespace stiefkv::diagnostics {

using decoder::ActivationRecord;
using decoder::Compression;
using decoder::DecoderConfig;
using decoder::DecoderLayerParams;

/// Relative Frobenius error of the post-W_O attention output.
double attention_output_error(const DecoderConfig &config, const DecoderLayerParams &layer,
                              const ActivationRecord &record, const Compression &bases);

/// Relative Frobenius error of the full layer output on one sequence.
double layer_output_error(const DecoderConfig &config, const DecoderLayerParams &layer,
                          const ActivationRecord &record, const Compression &bases);

/// Mean over rows of cos(y_t, y~_t), clamped to [-1, 1]. A zero row in `y`
/// throws DegenerateInputError; a zero row in `y_tilde` scores 0.
double mean_token_cosine(const Matrix &y, const Matrix &y_tilde);

struct LayerDiagnostics {
  std::string method;
  std::size_t layer = 0;
  double attn_rel_err = 0.0;
  double layer_rel_err = 0.0;
  double mean_cosine = 0.0;
};

/// Each metric averaged over `inputs` per layer and store, stores in the
/// given order within each layer. Layer l sees the uncompressed outputs of
/// layer l-1. The method tag is the store's provenance.
std::vector<LayerDiagnostics> compare_methods(const decoder::DecoderStack &stack,
                                              std::span<const Matrix> inputs,
                                              std::span<const stief::BasisStore> stores,
                                              std::size_t r_k, std::size_t r_v);
/// Same over prepared per-layer records.
std::vector<LayerDiagnostics>
compare_methods(const decoder::DecoderStack &stack,
                const std::vector<std::vector<ActivationRecord>> &records,
                std::span<const stief::BasisStore> stores, std::size_t r_k, std::size_t r_v);

/// Evaluation sequences drawn from a stream disjoint from calibration.
std::vector<Matrix> held_out_inputs(const DecoderConfig &config, std::size_t n_sequences,
                                    std::size_t seq_len, std::uint64_t seed);

inline constexpr const char *kCsvHeader = "method,layer,attn_rel_err,layer_rel_err,mean_cosine";

std::string to_csv(std::span<const LayerDiagnostics> rows);

struct Chart {
  std::string file_name;
  std::string svg;
};

/// One line chart per metric, one polyline per method, layer on the x axis.
std::vector<Chart> charts(std::span<const LayerDiagnostics> rows);

} // namespace stiefkv::diagnostics
