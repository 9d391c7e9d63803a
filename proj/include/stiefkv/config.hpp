#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stiefkv/decoder.hpp"
#include "stiefkv/stief.hpp"

namespace stiefkv::config {

struct RankConfig {
  double lo = 0.5;
  double hi = 0.9;
  std::size_t count = 5;
};

struct CalibrationConfig {
  std::size_t n_sequences = 32;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  std::size_t eval_sequences = 64;
};

struct AllocationConfig {
  std::string policy = "pareto";
  double epsilon = 0.03;
  /// Uniform policy ranks; 0 picks the middle candidate.
  std::size_t uniform_r_k = 0;
  std::size_t uniform_r_v = 0;
  /// Weighted policy; empty means the positional ramp.
  std::vector<double> weights;
};

struct DiagnosticsConfig {
  std::vector<std::string> methods{"stief", "k_svd"};
  std::size_t r_k = 0; ///< 0 picks the middle candidate
  std::size_t r_v = 0;
  std::string data = "heldout"; ///< "heldout" or "calibration"
};

struct RunConfig {
  decoder::DecoderConfig decoder;
  stief::TrainConfig train; ///< train.seed mirrors calibration.seed
  RankConfig ranks;
  CalibrationConfig calibration;
  AllocationConfig allocation;
  DiagnosticsConfig diagnostics;

  /// Throws ConfigError.
  void validate() const;
  std::vector<std::size_t> candidate_ranks() const;
  std::size_t middle_rank() const;
  void set_seed(std::uint64_t seed);
};

nlohmann::ordered_json to_json(const RunConfig &config);
/// Missing keys take defaults; unknown keys and wrong types throw ConfigError.
RunConfig from_json(const nlohmann::json &doc);

RunConfig load(const std::string &path);
std::string dump(const RunConfig &config);

/// FNV-1a 64 over the canonical JSON of every field that shapes the
/// artifacts (decoder, train, ranks, calibration).
std::uint64_t fingerprint(const RunConfig &config);
std::string fingerprint_hex(std::uint64_t fp);

std::uint64_t fnv1a64(std::string_view bytes);

/// Stack weights drawn from the calibration seed.
decoder::DecoderStack make_stack(const RunConfig &config);
/// Layer-0 calibration sequences from the calibration seed.
std::vector<Matrix> make_calibration_inputs(const RunConfig &config);
/// Held-out evaluation sequences, disjoint from calibration.
std::vector<Matrix> make_eval_inputs(const RunConfig &config);

} // namespace stiefkv::config
