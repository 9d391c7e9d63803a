#include "stiefkv/surface.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <tuple>

#include "stiefkv/errors.hpp"

namespace stiefkv::surface {

void ErrorSurface::validate() const {
  auto fail = [&](const std::string &m) {
    throw ContractError("error surface for layer " + std::to_string(layer) + ": " + m);
  };
  if (ranks_k.empty() || ranks_v.empty())
    fail("empty candidate set");
  if (!std::is_sorted(ranks_k.begin(), ranks_k.end()) ||
      !std::is_sorted(ranks_v.begin(), ranks_v.end()))
    fail("candidate ranks must be ascending");
  if (delta.size() != ranks_k.size())
    fail("grid has " + std::to_string(delta.size()) + " rows, expected " +
         std::to_string(ranks_k.size()));
  for (const auto &row : delta) {
    if (row.size() != ranks_v.size())
      fail("ragged grid");
    for (double d : row)
      if (!std::isfinite(d) || d < 0.0)
        fail("entries must be finite and nonnegative");
  }
  if (ranks_k.back() == d_h && ranks_v.back() == d_h && delta.back().back() >= 1e-8)
    fail("full-rank corner is not exact");
}

std::string_view policy_name(Policy p) {
  switch (p) {
  case Policy::uniform:
    return "uniform";
  case Policy::pareto:
    return "pareto";
  case Policy::weighted_pareto:
    return "weighted_pareto";
  }
  return "?";
}

Policy parse_policy(std::string_view name) {
  if (name == "uniform")
    return Policy::uniform;
  if (name == "pareto")
    return Policy::pareto;
  if (name == "weighted_pareto")
    return Policy::weighted_pareto;
  throw UsageError("unknown policy '" + std::string(name) +
                   "' (expected uniform, pareto, weighted_pareto)");
}

double compression_ratio(std::size_t r_k, std::size_t r_v, std::size_t d_h) {
  if (r_k == 0 || r_v == 0 || r_k > d_h || r_v > d_h)
    throw DimensionError("compression_ratio: ranks must lie in [1, d_h]");
  return static_cast<double>(r_k + r_v) / static_cast<double>(2 * d_h);
}

std::vector<std::size_t> pareto_front(const std::vector<ParetoPoint> &points) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      const auto &a = points[j], &b = points[i];
      dominated = a.delta <= b.delta && a.total_rank <= b.total_rank &&
                  (a.delta < b.delta || a.total_rank < b.total_rank);
    }
    if (!dominated)
      keep.push_back(i);
  }
  return keep;
}

namespace {

void check_surfaces(const std::vector<ErrorSurface> &surfaces) {
  if (surfaces.empty())
    throw AllocationError("no error surfaces to allocate from");
  for (const auto &s : surfaces) {
    if (s.ranks_k.empty() || s.ranks_v.empty() || s.delta.empty())
      throw AllocationError("error surface for layer " + std::to_string(s.layer) + " is empty");
    s.validate();
  }
}

LayerChoice choose(const ErrorSurface &s, double budget) {
  struct Cell {
    std::size_t i, j;
  };
  std::vector<Cell> cells;
  std::vector<ParetoPoint> pts;
  for (std::size_t i = 0; i < s.ranks_k.size(); ++i)
    for (std::size_t j = 0; j < s.ranks_v.size(); ++j) {
      cells.push_back({i, j});
      pts.push_back({s.delta[i][j], s.ranks_k[i] + s.ranks_v[j]});
    }
  const auto front = pareto_front(pts);

  // Lexicographic keys; smaller wins.
  auto by_memory = [&](std::size_t c) {
    return std::make_tuple(pts[c].total_rank, s.ranks_v[cells[c].j], s.ranks_k[cells[c].i]);
  };
  auto by_error = [&](std::size_t c) {
    return std::make_tuple(pts[c].delta, pts[c].total_rank, s.ranks_v[cells[c].j],
                           s.ranks_k[cells[c].i]);
  };

  std::optional<std::size_t> best;
  for (std::size_t c : front)
    if (pts[c].delta <= budget && (!best || by_memory(c) < by_memory(*best)))
      best = c;
  bool fallback = false;
  if (!best) {
    fallback = true;
    for (std::size_t c : front)
      if (!best || by_error(c) < by_error(*best))
        best = c;
  }
  const Cell cell = cells[*best];
  LayerChoice out;
  out.r_k = s.ranks_k[cell.i];
  out.r_v = s.ranks_v[cell.j];
  out.delta = s.delta[cell.i][cell.j];
  out.ratio = compression_ratio(out.r_k, out.r_v, s.d_h);
  out.budget = budget;
  out.fallback = fallback;
  return out;
}

} // namespace

RankAllocation allocate_uniform(const std::vector<ErrorSurface> &surfaces, std::size_t r_k,
                                std::size_t r_v) {
  check_surfaces(surfaces);
  RankAllocation out;
  out.policy = Policy::uniform;
  for (const auto &s : surfaces) {
    auto ik = std::find(s.ranks_k.begin(), s.ranks_k.end(), r_k);
    auto iv = std::find(s.ranks_v.begin(), s.ranks_v.end(), r_v);
    if (ik == s.ranks_k.end() || iv == s.ranks_v.end())
      throw AllocationError("rank pair (" + std::to_string(r_k) + ", " + std::to_string(r_v) +
                            ") was not trained for layer " + std::to_string(s.layer));
    LayerChoice c;
    c.r_k = r_k;
    c.r_v = r_v;
    c.delta = s.delta[ik - s.ranks_k.begin()][iv - s.ranks_v.begin()];
    c.ratio = compression_ratio(r_k, r_v, s.d_h);
    out.layers.push_back(c);
  }
  return out;
}

namespace {

RankAllocation allocate_budgets(const std::vector<ErrorSurface> &surfaces, double epsilon,
                                const std::vector<double> &weights, Policy policy) {
  if (!(epsilon > 0.0))
    throw AllocationError("error budget must be positive");
  check_surfaces(surfaces);
  if (weights.size() != surfaces.size())
    throw AllocationError("expected " + std::to_string(surfaces.size()) + " layer weights, got " +
                          std::to_string(weights.size()));
  RankAllocation out;
  out.policy = policy;
  out.epsilon = epsilon;
  for (std::size_t l = 0; l < surfaces.size(); ++l) {
    if (!(weights[l] > 0.0))
      throw AllocationError("layer weights must be positive");
    out.layers.push_back(choose(surfaces[l], epsilon / weights[l]));
  }
  return out;
}

} // namespace

RankAllocation allocate_pareto(const std::vector<ErrorSurface> &surfaces, double epsilon) {
  return allocate_budgets(surfaces, epsilon, std::vector<double>(surfaces.size(), 1.0),
                          Policy::pareto);
}

RankAllocation allocate_weighted_pareto(const std::vector<ErrorSurface> &surfaces, double epsilon,
                                        const std::vector<double> &weights) {
  return allocate_budgets(surfaces, epsilon, weights, Policy::weighted_pareto);
}

std::vector<double> sensitivity_weights(std::size_t n_layers) {
  constexpr std::array<double, 4> ramp{2.0, 1.75, 1.5, 1.25};
  std::vector<double> w(n_layers, 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::size_t from_end = std::min(i, n_layers - 1 - i);
    if (from_end < ramp.size())
      w[i] = ramp[from_end];
    total += w[i];
  }
  const double mean = total / static_cast<double>(n_layers);
  for (double &x : w)
    x /= mean;
  return w;
}

double aggregate_ratio(const RankAllocation &allocation, std::size_t d_h) {
  if (allocation.layers.empty())
    throw AllocationError("aggregate_ratio: empty allocation");
  double total = 0.0;
  for (const auto &c : allocation.layers)
    total += compression_ratio(c.r_k, c.r_v, d_h);
  return total / static_cast<double>(allocation.layers.size());
}

} // namespace stiefkv::surface
