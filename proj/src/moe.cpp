// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/moe.hpp"

#include "mass/log.hpp"

#include <cmath>
#include <string>

namespace mass {

MoePool MoePool::initialize(int d_model, int count, int max_experts, Rng& rng) {
  if (count < 1) throw ConfigError("moe.k_init: must be >= 1");
  if (count > max_experts) throw ConfigError("moe.k_init: exceeds k_max");
  MoePool pool(d_model, max_experts);
  const double std_w = 1.0 / std::sqrt(static_cast<double>(d_model));
  for (int i = 0; i < count; ++i) {
    ExpertBlock e;
    e.id = pool.next_id_;
    e.weight = random_normal<Real>(d_model, d_model, std_w, rng);
    e.gate = random_normal<Real>(d_model, 1, std_w, rng);
    pool.push_raw(std::move(e));
  }
  return pool;
}

std::optional<int> MoePool::position_of(ExpertId id) const {
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    if (experts_[i].id == id) return static_cast<int>(i);
  }
  return std::nullopt;
}

ExpertBlock& MoePool::by_id(ExpertId id) {
  auto pos = position_of(id);
  if (!pos) throw ContractError("no expert with id " + std::to_string(id));
  return experts_[static_cast<std::size_t>(*pos)];
}

const ExpertBlock& MoePool::by_id(ExpertId id) const {
  auto pos = position_of(id);
  if (!pos) throw ContractError("no expert with id " + std::to_string(id));
  return experts_[static_cast<std::size_t>(*pos)];
}

Matrix MoePool::gating() const {
  Matrix w(d_model_, size());
  for (int k = 0; k < size(); ++k) w.col(k) = experts_[static_cast<std::size_t>(k)].gate.col(0);
  return w;
}

RowVector MoePool::scores(const RowVector& x) const {
  if (empty()) throw ContractError("MoePool::scores: empty pool");
  return softmax_rows(x * gating());
}

void MoePool::push_raw(ExpertBlock expert) {
  if (expert.weight.rows() != d_model_ || expert.weight.cols() != d_model_ || expert.gate.rows() != d_model_ ||
      expert.gate.cols() != 1) {
    throw ShapeError("expert " + std::to_string(expert.id) + " does not match d_model " + std::to_string(d_model_));
  }
  next_id_ = std::max(next_id_, expert.id + 1);
  experts_.push_back(std::move(expert));
}

void MoePool::set_pairs(std::vector<std::pair<ExpertId, ExpertId>> pairs) {
  for (const auto& [a, b] : pairs) {
    if (!position_of(a) || !position_of(b)) throw ContractError("duplicated pair references a missing expert");
  }
  pairs_ = std::move(pairs);
}

ExpertId MoePool::add_expert(ExpertBlock expert, const Matrix& gate_column, ExpertId pair_with) {
  if (size() >= max_experts_) {
    throw CapacityError("expert pool at capacity (" + std::to_string(max_experts_) + ")");
  }
  if (!position_of(pair_with)) throw ContractError("add_expert: unknown pair partner " + std::to_string(pair_with));
  expert.id = next_id_;
  expert.gate = gate_column;
  push_raw(std::move(expert));
  const ExpertId id = experts_.back().id;
  pairs_.emplace_back(pair_with, id);
  return id;
}

ExpertId MoePool::duplicate(ExpertId parent, long step) {
  const ExpertBlock& src = by_id(parent);
  ExpertBlock clone;
  clone.weight = src.weight;
  clone.creation_step = step;
  clone.parent = parent;
  const Matrix gate = src.gate;
  return add_expert(std::move(clone), gate, parent);
}

void MoePool::remove_expert(ExpertId id) {
  auto pos = position_of(id);
  if (!pos) throw ContractError("remove_expert: unknown expert " + std::to_string(id));
  experts_.erase(experts_.begin() + *pos);
  std::erase_if(pairs_, [id](const auto& pr) { return pr.first == id || pr.second == id; });
}

RowVector MoePool::forward(const RowVector& x, const RoutingRule& rule, RoutingDecision* decision) const {
  const RowVector r = scores(x);
  RoutingDecision d = route(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())), rule);
  RowVector y = RowVector::Zero(d_model_);
  for (int k : d.selected) {
    const auto& e = experts_[static_cast<std::size_t>(k)];
    y += r(k) * e.apply(x).row(0);
  }
  if (decision) *decision = std::move(d);
  return y;
}

RowVector MoePool::forward_dense_masked(const RowVector& x, const RoutingDecision& decision) const {
  RowVector mask = RowVector::Zero(size());
  for (int k : decision.selected) mask(k) = 1.0;
  RowVector y = RowVector::Zero(d_model_);
  for (int k = 0; k < size(); ++k) {
    y += (decision.scores[static_cast<std::size_t>(k)] * mask(k)) * experts_[static_cast<std::size_t>(k)].apply(x).row(0);
  }
  return y;
}

double redundancy_loss(const MoePool& pool) {
  const auto& pairs = pool.duplicated_pairs();
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [a, b] : pairs) {
    const auto c = flat_cosine(pool.by_id(a).gate, pool.by_id(b).gate);
    if (!c) {
      log::warn("redundancy_loss: zero-norm gating column treated as orthogonal");
      continue;
    }
    total += (*c) * (*c);
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace mass
