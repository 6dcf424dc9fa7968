// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the unit tests and the acceptance runner.

#pragma once

#include "mass/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace mass::testing {

/// Tiny model for derivative checks; one duplicated pair so the redundancy
/// penalty participates.
inline ModelState tiny_model(std::uint64_t seed, int d = 8, int vocab = 16, int k_init = 2) {
  ModelConfig c;
  c.d_model = d;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.max_seq_len = 8;
  c.k_init = k_init;
  c.k_max = k_init + 2;
  c.seed = seed;
  ModelState s = init_model(c);
  s.pool.set_pairs({{s.pool.at(0).id, s.pool.at(1).id}});
  return s;
}

inline ForwardOptions with_rule(RoutingRule rule) {
  ForwardOptions o;
  o.rule = rule;
  return o;
}

inline Batch tiny_batch(int vocab, int n_seq, int seq_len, std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.seq_len = seq_len;
  for (int i = 0; i < n_seq * seq_len; ++i) b.tokens.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(vocab))));
  for (int i = 0; i < n_seq; ++i) b.targets.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(vocab))));
  return b;
}

struct GradCheck {
  std::size_t entries = 0;
  std::size_t failures = 0;
  double worst_rel = 0.0;
  std::string worst_param;
  bool routing_stable = true;
};

/// Relative error with a floor: differences below `abs_floor` are noise
/// (central differences at eps=1e-4 carry O(1e-8) truncation error).
inline double rel_error(double a, double b, double abs_floor = 1e-8) {
  const double diff = std::abs(a - b);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max(std::abs(a), std::abs(b));
}

/// Central-difference check of every parameter entry against the tape.
inline GradCheck finite_difference_check(ModelState& state, const Batch& batch, const ForwardOptions& opts,
                                         double lambda, double eps = 1e-4, double tol = 1e-3) {
  const GradientResult ref = compute_gradients(state, batch, opts, lambda);
  const auto selection = [&](const GradientResult& r) {
    std::vector<std::vector<int>> s;
    for (const auto& d : r.routing) s.push_back(d.selected);
    return s;
  };
  const auto base_sel = selection(ref);
  GradCheck out;
  for (auto& p : parameters(state)) {
    const Matrix& g = ref.grads.at(p.name);
    for (Eigen::Index i = 0; i < p.value->size(); ++i) {
      double& w = p.value->data()[i];
      const double saved = w;
      w = saved + eps;
      const GradientResult up = compute_gradients(state, batch, opts, lambda);
      w = saved - eps;
      const GradientResult down = compute_gradients(state, batch, opts, lambda);
      w = saved;
      if (selection(up) != base_sel || selection(down) != base_sel) out.routing_stable = false;
      const double numeric = (up.objective - down.objective) / (2 * eps);
      const double rel = rel_error(g.data()[i], numeric);
      ++out.entries;
      if (rel > tol) ++out.failures;
      if (rel > out.worst_rel) {
        out.worst_rel = rel;
        out.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace mass::testing
