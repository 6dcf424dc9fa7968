// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparse mixture-of-experts layer: softmax gating, routing-mass (top-p) and
// top-k expert selection, and a growable expert pool with duplicated-pair
// bookkeeping.

#pragma once

#include "mass/matrix.hpp"
#include "mass/ops.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <variant>
#include <vector>

namespace mass {

using ExpertId = int;

/// Selected experts are positions in the pool (not ids), in descending score order.
struct RoutingDecision {
  std::vector<double> scores;
  std::vector<int> selected;
  int k_star = 0;
};

/// Expert positions sorted by descending score; ties go to the lower position.
template <typename Scores>
std::vector<int> rank_experts(const Scores& scores) {
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

/// Smallest descending-sorted prefix whose cumulative mass reaches p.
template <typename Scores>
RoutingDecision route_top_p(const Scores& scores, double p) {
  if (scores.size() == 0) throw ContractError("route_top_p: empty pool");
  if (!(p > 0.0 && p < 1.0)) throw ContractError("route_top_p: p must lie in (0, 1)");
  RoutingDecision d;
  d.scores.assign(scores.begin(), scores.end());
  const auto order = rank_experts(d.scores);
  double mass = 0.0;
  for (int idx : order) {
    d.selected.push_back(idx);
    mass += d.scores[static_cast<std::size_t>(idx)];
    if (mass >= p) break;
  }
  d.k_star = static_cast<int>(d.selected.size());
  return d;
}

template <typename Scores>
RoutingDecision route_top_k(const Scores& scores, int k) {
  if (scores.size() == 0) throw ContractError("route_top_k: empty pool");
  if (k < 1 || k > static_cast<int>(scores.size())) {
    throw ConfigError("route_top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  RoutingDecision d;
  d.scores.assign(scores.begin(), scores.end());
  const auto order = rank_experts(d.scores);
  d.selected.assign(order.begin(), order.begin() + k);
  d.k_star = k;
  return d;
}

struct TopP {
  double p = 0.7;
};
struct TopK {
  int k = 1;
};
using RoutingRule = std::variant<TopP, TopK>;

inline RoutingDecision route(std::span<const double> scores, const RoutingRule& rule) {
  return std::visit(
      [&](const auto& r) {
        if constexpr (std::is_same_v<std::decay_t<decltype(r)>, TopP>) {
          return route_top_p(scores, r.p);
        } else {
          return route_top_k(scores, r.k);
        }
      },
      rule);
}

/// One expert: a single linear map followed by SiLU, plus its gating column.
struct ExpertBlock {
  ExpertId id = 0;
  Matrix weight;  // d x d', first (and only) linear layer
  Matrix gate;    // d x 1 column w_k of the gating matrix
  long creation_step = 0;
  std::optional<ExpertId> parent;

  Matrix apply(const Matrix& x) const { return silu(x * weight); }
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class MoePool {
 public:
  MoePool() = default;
  MoePool(int d_model, int max_experts) : d_model_(d_model), max_experts_(max_experts) {}

  /// Fresh pool of `count` experts with N(0, 1/d) weights and gates.
  static MoePool initialize(int d_model, int count, int max_experts, Rng& rng);

  int size() const { return static_cast<int>(experts_.size()); }
  int max_experts() const { return max_experts_; }
  int d_model() const { return d_model_; }
  bool empty() const { return experts_.empty(); }

  const std::vector<ExpertBlock>& experts() const { return experts_; }
  ExpertBlock& at(int position) { return experts_.at(static_cast<std::size_t>(position)); }
  const ExpertBlock& at(int position) const { return experts_.at(static_cast<std::size_t>(position)); }
  std::optional<int> position_of(ExpertId id) const;
  ExpertBlock& by_id(ExpertId id);
  const ExpertBlock& by_id(ExpertId id) const;

  const std::vector<std::pair<ExpertId, ExpertId>>& duplicated_pairs() const { return pairs_; }
  ExpertId next_id() const { return next_id_; }

  /// d x K gating matrix assembled from the expert gate columns.
  Matrix gating() const;

  /// Full softmax routing distribution for one token row.
  RowVector scores(const RowVector& x) const;

  /// Appends an expert (fresh id) and records (pair_with, new) in the duplicated pairs.
  ExpertId add_expert(ExpertBlock expert, const Matrix& gate_column, ExpertId pair_with);

  /// Appends a clone of `parent`: weight and gate copied bitwise.
  ExpertId duplicate(ExpertId parent, long step);

  /// Removes the expert, its gate column and every pair that references it.
  void remove_expert(ExpertId id);

  /// Used by the initializer and deserialization.
  void push_raw(ExpertBlock expert);
  void set_pairs(std::vector<std::pair<ExpertId, ExpertId>> pairs);
  void set_next_id(ExpertId id) { next_id_ = id; }

  /// y = sum over selected k of r_k(x) e_k(x) for a single token.
  RowVector forward(const RowVector& x, const RoutingRule& rule, RoutingDecision* decision = nullptr) const;

  /// Same value computed densely over all experts with unselected weights zeroed.
  RowVector forward_dense_masked(const RowVector& x, const RoutingDecision& decision) const;

 private:
  int d_model_ = 0;
  int max_experts_ = 0;
  ExpertId next_id_ = 0;
  std::vector<ExpertBlock> experts_;
  std::vector<std::pair<ExpertId, ExpertId>> pairs_;
};

/// Mean squared cosine between gate columns of duplicated pairs; 0 when there are none.
double redundancy_loss(const MoePool& pool);

}  // namespace mass
