// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Windowed cumulative z-score change-point test on a stream of gradient
// norms. After a warmup, each new norm is standardized against the current
// sliding window and the z-score is frozen; the sum of the last `window`
// frozen z-scores, scaled by 1/sqrt(window), is tested against a standard
// normal upper tail.

#pragma once

#include "mass/moe.hpp"

#include <cmath>
#include <deque>
#include <map>
#include <optional>

namespace mass {

struct CpdConfig {
  int window = 50;
  int warmup = 100;
  double alpha = 0.01;

  void validate() const;
};

struct CpdStatistic {
  double mean = 0.0;
  double stddev = 0.0;
  double z = 0.0;
  double cumulative = 0.0;
  double normalized = 0.0;
  double p_value = 1.0;
};

/// 1 - Phi(x) for the standard normal.
inline double normal_upper_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

class GradientShiftDetector {
 public:
  GradientShiftDetector() = default;
  explicit GradientShiftDetector(CpdConfig config) : config_(config) {}

  /// Feeds one norm; returns a statistic once warmup has passed and a full
  /// window of frozen z-scores exists (never before warmup + window steps).
  std::optional<CpdStatistic> observe(double grad_norm);

  void reset();

  long steps_observed() const { return steps_; }
  const std::deque<double>& norms() const { return norms_; }
  const std::deque<double>& frozen_z() const { return z_; }
  const CpdConfig& config() const { return config_; }

  /// Restores a serialized state.
  void restore(long steps, std::deque<double> norms, std::deque<double> z);

 private:
  CpdConfig config_;
  long steps_ = 0;
  std::deque<double> norms_;
  std::deque<double> z_;
  bool warned_degenerate_ = false;
};

/// One detector per expert, keyed by expert id.
class CpdMonitor {
 public:
  CpdMonitor() = default;
  explicit CpdMonitor(CpdConfig config) : config_(config) {}

  std::optional<CpdStatistic> observe(ExpertId id, double grad_norm);
  void reset_all() { streams_.clear(); }
  void erase(ExpertId id) { streams_.erase(id); }

  const CpdConfig& config() const { return config_; }
  const std::map<ExpertId, GradientShiftDetector>& streams() const { return streams_; }
  GradientShiftDetector& stream(ExpertId id);

 private:
  CpdConfig config_;
  std::map<ExpertId, GradientShiftDetector> streams_;
};

}  // namespace mass
