// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adaptive expert expansion: two-stage trigger (gradient-norm shift, then
// gradient/weight orthogonality), duplication with a decomposed update, and
// the NLL comparison that retires unhelpful additions and stops expansion.

#pragma once

#include "mass/cpd.hpp"
#include "mass/matrix.hpp"
#include "mass/moe.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mass {

struct ExpansionConfig {
  CpdConfig cpd;
  double delta = 0.001;
  int patience = 3;
  double phase_fraction = 0.1;

  void validate() const;
};

/// Last step (1-based) of the expansion phase: ceil(fraction * total_steps).
long expansion_phase_end(long total_steps, double fraction);

struct AlignmentResult {
  double cosine = 0.0;
  bool drift = false;
};

/// Drift iff |cos(grad, weight)| < delta on the flattened matrices. A zero-norm
/// operand reports no drift.
AlignmentResult alignment_test(const Matrix& grad, const Matrix& weight, double delta);

struct GradientSplit {
  Matrix aligned;  // projection of the gradient onto the weight direction
  Matrix full;
};

GradientSplit decompose_gradient(const Matrix& grad, const Matrix& weight);

struct ExpansionEvent {
  long step = 0;
  ExpertId parent = 0;
  ExpertId child = 0;
  double p_value = 1.0;
  double cosine = 0.0;
  double grad_norm = 0.0;
};

struct NllCheck {
  long step = 0;
  ExpertId candidate = 0;
  double loss_masked = 0.0;
  double loss_original = 0.0;
  double loss_gap = 0.0;
  bool retained = true;
  int patience_after = 0;
  bool stopped_after = false;
};

struct ExpansionLedger {
  std::vector<ExpansionEvent> events;
  std::vector<NllCheck> checks;
  int patience = 3;
  bool stopped = false;
  std::string stop_reason;
  std::optional<ExpertId> pending;
  long phase_end_step = 0;

  static ExpansionLedger start(const ExpansionConfig& config, long total_steps);
  bool active(long step) const { return !stopped && step <= phase_end_step; }
};

/// Per-step signals for one expert: its CPD p-value (when emitted), the task
/// gradient of its weight and of its gate column.
struct ExpertSignal {
  ExpertId id = 0;
  std::optional<double> p_value;
  const Matrix* weight_grad = nullptr;
  const Matrix* gate_grad = nullptr;
};

/// Duplicates at most one flagged expert (smallest p-value, then lowest id)
/// whose p-value is <= alpha and whose gradient is orthogonal to its weight.
/// The parent steps by the aligned component and the clone by the full
/// gradient (plain gradient descent at `learning_rate`) for both the expert
/// weight and the gate column. All CPD streams restart afterwards.
std::optional<ExpansionEvent> maybe_expand(MoePool& pool, CpdMonitor& monitor, ExpansionLedger& ledger,
                                           const ExpansionConfig& config, long step,
                                           const std::vector<ExpertSignal>& signals, double learning_rate);

/// Loss on the fixed evaluation batch, optionally with one expert disabled.
using MaskedLossFn = std::function<double(std::optional<ExpertId>)>;

/// Held-out NLL comparison for the previously added expert; runs only when one
/// is pending and at least two duplicated pairs exist. Marks `new_expert` as
/// the next pending addition either way.
std::optional<NllCheck> nll_stopping_check(MoePool& pool, ExpansionLedger& ledger, long step, ExpertId new_expert,
                                           const MaskedLossFn& loss);

}  // namespace mass
