// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/analysis.hpp"

#include "mass/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mass {

namespace {

double kl_bits(std::span<const double> p, std::span<const double> m) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log2(p[i] / m[i]);
  }
  return s;
}

void add_to(SemanticRoutingTable& t, int label, const std::vector<double>& scores) {
  auto& d = t.distributions[label];
  if (d.empty()) d.assign(scores.size(), 0.0);
  if (d.size() != scores.size()) throw AnalysisError("routing_by_semantics: records disagree on expert count");
  for (std::size_t i = 0; i < scores.size(); ++i) d[i] += scores[i];
  t.counts[label] += 1;
}

void finalize(SemanticRoutingTable& t) {
  for (auto& [label, d] : t.distributions) {
    const double n = static_cast<double>(t.counts.at(label));
    for (double& v : d) v /= n;
  }
}

}  // namespace

double jsd(std::span<const double> pa, std::span<const double> pb, double tolerance) {
  if (pa.size() != pb.size()) {
    throw ShapeError("jsd: lengths " + std::to_string(pa.size()) + " and " + std::to_string(pb.size()));
  }
  const double sa = std::accumulate(pa.begin(), pa.end(), 0.0);
  const double sb = std::accumulate(pb.begin(), pb.end(), 0.0);
  if (std::abs(sa - 1.0) > tolerance || std::abs(sb - 1.0) > tolerance) {
    throw ContractError("jsd: inputs must sum to 1");
  }
  std::vector<double> m(pa.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (pa[i] + pb[i]);
  const double v = 0.5 * kl_bits(pa, m) + 0.5 * kl_bits(pb, m);
  return std::clamp(v, 0.0, 1.0);
}

SemanticTables routing_by_semantics(const std::vector<RoutingRecord>& records) {
  SemanticTables out;
  bool any = false;
  for (const auto& r : records) {
    if (r.entity < 0 || r.property < 0) continue;
    any = true;
    add_to(out.entity, r.entity, r.scores);
    add_to(out.property, r.property, r.scores);
  }
  if (!any) throw AnalysisError("routing_by_semantics: no labelled tokens in routing log");
  finalize(out.entity);
  finalize(out.property);
  return out;
}

JsdSummary pairwise_jsd_summary(const SemanticRoutingTable& table) {
  if (table.distributions.size() < 2) throw AnalysisError("pairwise_jsd_summary: need at least 2 labels");
  JsdSummary s;
  for (auto a = table.distributions.begin(); a != table.distributions.end(); ++a) {
    for (auto b = std::next(a); b != table.distributions.end(); ++b) {
      s.pairs.emplace_back(a->first, b->first);
      s.values.push_back(jsd(a->second, b->second));
    }
  }
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / static_cast<double>(s.values.size());
  return s;
}

std::size_t chord_elbow(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 3) throw AnalysisError("chord_elbow: need at least 3 points");
  const auto scale = [](std::span<const double> v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<double> s(v.size(), 0.0);
    if (*hi > *lo) {
      for (std::size_t i = 0; i < v.size(); ++i) s[i] = (v[i] - *lo) / (*hi - *lo);
    }
    return s;
  };
  const auto xs = scale(x);
  const auto ys = scale(y);
  const std::size_t n = xs.size();
  const double dx = xs[n - 1] - xs[0];
  const double dy = ys[n - 1] - ys[0];
  const double len = std::hypot(dx, dy);
  std::size_t best = 0;
  double best_d = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = len > 0.0 ? std::abs(dy * (xs[i] - xs[0]) - dx * (ys[i] - ys[0])) / len : 0.0;
    if (d > best_d + 1e-12) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

Frontier build_frontier(const std::vector<RunRecord>& runs, bool require_elbow) {
  if (runs.empty()) throw AnalysisError("build_frontier: no runs");
  std::map<int, FrontierPoint> by_k;
  for (const auto& r : runs) {
    auto [it, fresh] = by_k.try_emplace(r.k_experts);
    auto& p = it->second;
    p.k_experts = r.k_experts;
    p.runs.push_back(r.run_id);
    if (fresh || r.test_loss < p.best_loss || (r.test_loss == p.best_loss && r.run_id < p.best_run)) {
      p.best_loss = r.test_loss;
      p.best_run = r.run_id;
    }
  }
  Frontier f;
  for (auto& [_, p] : by_k) {
    std::sort(p.runs.begin(), p.runs.end());
    f.points.push_back(std::move(p));
  }
  if (f.points.size() < 3) {
    if (require_elbow) {
      throw AnalysisError("build_frontier: need at least 3 distinct K values, got " + std::to_string(f.points.size()));
    }
    return f;
  }
  std::vector<double> x, y;
  for (const auto& p : f.points) {
    x.push_back(p.k_experts);
    y.push_back(p.best_loss);
  }
  f.elbow = f.points[chord_elbow(x, y)].k_experts;
  return f;
}

}  // namespace mass
