// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Post-hoc measurements: loss-vs-K frontier with a chord-distance elbow, and
// pairwise Jensen-Shannon divergence between label-conditioned routing
// distributions.

#pragma once

#include "mass/matrix.hpp"

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mass {

struct RoutingRecord;

struct AnalysisError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Jensen-Shannon divergence in bits; 0 log 0 = 0.
double jsd(std::span<const double> pa, std::span<const double> pb, double tolerance = 1e-6);

struct SemanticRoutingTable {
  /// label -> mean routing distribution over experts
  std::map<int, std::vector<double>> distributions;
  std::map<int, long> counts;
};

struct SemanticTables {
  SemanticRoutingTable entity;
  SemanticRoutingTable property;
};

/// Mean full softmax routing vector per entity and per property label.
/// Delimiter positions carry no label and are skipped.
SemanticTables routing_by_semantics(const std::vector<RoutingRecord>& records);

struct JsdSummary {
  std::vector<std::pair<int, int>> pairs;
  std::vector<double> values;
  double mean = 0.0;
};

JsdSummary pairwise_jsd_summary(const SemanticRoutingTable& table);

struct RunRecord {
  std::string run_id;
  int k_experts = 0;
  double test_loss = 0.0;
};

struct FrontierPoint {
  int k_experts = 0;
  double best_loss = 0.0;
  std::string best_run;
  std::vector<std::string> runs;
};

struct Frontier {
  std::vector<FrontierPoint> points;  // ascending K
  std::optional<int> elbow;
};

/// Per-K minimum loss. Fewer than three distinct K values leaves the elbow
/// unset; `require_elbow` turns that into an AnalysisError.
Frontier build_frontier(const std::vector<RunRecord>& runs, bool require_elbow = true);

/// Index of the point farthest from the chord joining the first and last
/// points, after min-max scaling both axes. Ties go to the smaller index.
std::size_t chord_elbow(std::span<const double> x, std::span<const double> y);

}  // namespace mass
