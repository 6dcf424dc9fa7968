// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mass/matrix.hpp"
#include "mass/model.hpp"

#include <map>
#include <set>
#include <string>

namespace mass {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive moment estimation with per-tensor state keyed by parameter name.
/// Each tensor keeps its own step count so a tensor skipped on one step (or a
/// cloned expert) carries a consistent bias correction.
class Adam {
 public:
  struct Slot {
    Matrix m;
    Matrix v;
    long t = 0;
  };

  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }

  /// Updates every parameter that has a gradient and is not in `skip`.
  void step(const std::vector<ParamRef>& params, const std::map<std::string, Matrix>& grads,
            const std::set<std::string>& skip = {});

  void copy_state(const std::string& from, const std::string& to);
  void erase(const std::string& name) { slots_.erase(name); }

  const std::map<std::string, Slot>& slots() const { return slots_; }
  std::map<std::string, Slot>& slots() { return slots_; }

 private:
  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

}  // namespace mass
