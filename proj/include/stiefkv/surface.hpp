#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace stiefkv::surface {

/// Grid of layer-output errors over candidate rank pairs for one layer.
struct ErrorSurface {
  std::size_t layer = 0;
  std::size_t d_h = 0;
  std::vector<std::size_t> ranks_k; ///< ascending
  std::vector<std::size_t> ranks_v; ///< ascending
  std::vector<std::vector<double>> delta; ///< delta[i][j] = error at (ranks_k[i], ranks_v[j])

  /// Throws ContractError on shape or value violations.
  void validate() const;
};

enum class Policy { uniform, pareto, weighted_pareto };

std::string_view policy_name(Policy p);
Policy parse_policy(std::string_view name);

struct LayerChoice {
  std::size_t r_k = 0;
  std::size_t r_v = 0;
  double delta = 0.0;
  double ratio = 0.0;
  double budget = 0.0;    ///< effective budget for the layer (0 for uniform)
  bool fallback = false;  ///< no Pareto point met the budget
};

struct RankAllocation {
  Policy policy = Policy::uniform;
  double epsilon = 0.0;
  std::vector<LayerChoice> layers;
};

/// (r_K + r_V) / (2 d_h).
double compression_ratio(std::size_t r_k, std::size_t r_v, std::size_t d_h);

struct ParetoPoint {
  double delta;
  std::size_t total_rank;
};

/// Indices of the points not dominated in (delta, total_rank), in input
/// order. Equal points do not dominate each other.
std::vector<std::size_t> pareto_front(const std::vector<ParetoPoint> &points);

/// Same pair on every layer. Throws AllocationError if a rank was not trained.
RankAllocation allocate_uniform(const std::vector<ErrorSurface> &surfaces, std::size_t r_k,
                                std::size_t r_v);

RankAllocation allocate_pareto(const std::vector<ErrorSurface> &surfaces, double epsilon);

/// Ramp 2.0, 1.75, 1.5, 1.25 at both ends, 1 elsewhere, normalised to mean 1.
/// Short stacks use as much of the ramp as fits, the ends meeting in the middle.
std::vector<double> sensitivity_weights(std::size_t n_layers);

/// allocate_pareto with layer budget epsilon / w_l.
RankAllocation allocate_weighted_pareto(const std::vector<ErrorSurface> &surfaces, double epsilon,
                                        const std::vector<double> &weights);

/// Mean of the per-layer compression ratios.
double aggregate_ratio(const RankAllocation &allocation, std::size_t d_h);

} // namespace stiefkv::surface
