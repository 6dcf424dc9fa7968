// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/expansion.hpp"

#include "mass/log.hpp"
#include "mass/ops.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mass {

void CpdConfig::validate() const {
  if (window < 2) throw ConfigError("expansion.window: must be >= 2");
  if (warmup < 0) throw ConfigError("expansion.warmup: must be >= 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("expansion.alpha: must lie in (0, 1)");
}

std::optional<CpdStatistic> GradientShiftDetector::observe(double grad_norm) {
  if (!std::isfinite(grad_norm) || grad_norm < 0.0) {
    throw std::invalid_argument("GradientShiftDetector: gradient norm must be finite and >= 0");
  }
  const auto w = static_cast<std::size_t>(config_.window);
  ++steps_;
  norms_.push_back(grad_norm);
  if (norms_.size() > w) norms_.pop_front();
  if (steps_ <= config_.warmup || norms_.size() < w) return std::nullopt;

  CpdStatistic st;
  st.mean = std::accumulate(norms_.begin(), norms_.end(), 0.0) / static_cast<double>(w);
  double ss = 0.0;
  for (double g : norms_) ss += (g - st.mean) * (g - st.mean);
  st.stddev = std::sqrt(ss / static_cast<double>(w - 1));
  if (st.stddev < 1e-12) {
    if (!warned_degenerate_) {
      log::warn("cpd: window variance below 1e-12, z frozen at 0");
      warned_degenerate_ = true;
    }
    st.z = 0.0;
  } else {
    st.z = (grad_norm - st.mean) / st.stddev;
  }
  z_.push_back(st.z);
  if (z_.size() > w) z_.pop_front();
  if (z_.size() < w) return std::nullopt;

  st.cumulative = std::accumulate(z_.begin(), z_.end(), 0.0);
  st.normalized = st.cumulative / std::sqrt(static_cast<double>(w));
  st.p_value = normal_upper_tail(st.normalized);
  return st;
}

void GradientShiftDetector::reset() {
  steps_ = 0;
  norms_.clear();
  z_.clear();
}

void GradientShiftDetector::restore(long steps, std::deque<double> norms, std::deque<double> z) {
  steps_ = steps;
  norms_ = std::move(norms);
  z_ = std::move(z);
}

std::optional<CpdStatistic> CpdMonitor::observe(ExpertId id, double grad_norm) {
  return stream(id).observe(grad_norm);
}

GradientShiftDetector& CpdMonitor::stream(ExpertId id) {
  auto it = streams_.find(id);
  if (it == streams_.end()) it = streams_.emplace(id, GradientShiftDetector(config_)).first;
  return it->second;
}

void ExpansionConfig::validate() const {
  cpd.validate();
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("expansion.delta: must lie in (0, 1)");
  if (patience < 1) throw ConfigError("expansion.patience: must be >= 1");
  if (!(phase_fraction > 0.0 && phase_fraction <= 1.0)) throw ConfigError("expansion.phase_fraction: must lie in (0, 1]");
}

long expansion_phase_end(long total_steps, double fraction) {
  // Guard against 0.1 * 5000 landing a hair above 500.
  return static_cast<long>(std::ceil(fraction * static_cast<double>(total_steps) - 1e-9));
}

ExpansionLedger ExpansionLedger::start(const ExpansionConfig& config, long total_steps) {
  ExpansionLedger l;
  l.patience = config.patience;
  l.phase_end_step = expansion_phase_end(total_steps, config.phase_fraction);
  return l;
}

AlignmentResult alignment_test(const Matrix& grad, const Matrix& weight, double delta) {
  const auto c = flat_cosine(grad, weight);
  if (!c) {
    // A zero gradient just means the expert saw no tokens this step.
    if (weight.squaredNorm() == 0.0) log::warn("alignment_test: zero weight matrix, reporting no drift");
    return {};
  }
  return {*c, std::abs(*c) < delta};
}

GradientSplit decompose_gradient(const Matrix& grad, const Matrix& weight) {
  if (grad.rows() != weight.rows() || grad.cols() != weight.cols()) {
    throw ShapeError("decompose_gradient: " + shape_str(grad.rows(), grad.cols()) + " vs " +
                     shape_str(weight.rows(), weight.cols()));
  }
  const double ww = weight.squaredNorm();
  GradientSplit s;
  s.full = grad;
  if (ww == 0.0) {
    s.aligned = Matrix::Zero(grad.rows(), grad.cols());
  } else {
    s.aligned = (grad.cwiseProduct(weight).sum() / ww) * weight;
  }
  return s;
}

std::optional<ExpansionEvent> maybe_expand(MoePool& pool, CpdMonitor& monitor, ExpansionLedger& ledger,
                                           const ExpansionConfig& config, long step,
                                           const std::vector<ExpertSignal>& signals, double learning_rate) {
  if (!ledger.active(step)) return std::nullopt;

  const ExpertSignal* best = nullptr;
  double best_cos = 0.0;
  for (const auto& s : signals) {
    if (!s.p_value || *s.p_value > config.cpd.alpha) continue;
    if (!s.weight_grad) throw ContractError("maybe_expand: missing weight gradient");
    const AlignmentResult a = alignment_test(*s.weight_grad, pool.by_id(s.id).weight, config.delta);
    if (!a.drift) continue;
    if (!best || *s.p_value < *best->p_value || (*s.p_value == *best->p_value && s.id < best->id)) {
      best = &s;
      best_cos = a.cosine;
    }
  }
  if (!best) return std::nullopt;

  if (pool.size() >= pool.max_experts()) {
    log::info("expansion suppressed at step " + std::to_string(step) + ": pool at capacity");
    ledger.stopped = true;
    ledger.stop_reason = "capacity";
    return std::nullopt;
  }

  const ExpertId parent = best->id;
  const Matrix w_before = pool.by_id(parent).weight;
  const Matrix g_before = pool.by_id(parent).gate;
  const ExpertId child = pool.duplicate(parent, step);

  const GradientSplit ws = decompose_gradient(*best->weight_grad, w_before);
  pool.by_id(parent).weight = w_before - learning_rate * ws.aligned;
  pool.by_id(child).weight = w_before - learning_rate * ws.full;
  if (best->gate_grad) {
    const GradientSplit gs = decompose_gradient(*best->gate_grad, g_before);
    pool.by_id(parent).gate = g_before - learning_rate * gs.aligned;
    pool.by_id(child).gate = g_before - learning_rate * gs.full;
  }

  monitor.reset_all();

  ExpansionEvent ev;
  ev.step = step;
  ev.parent = parent;
  ev.child = child;
  ev.p_value = *best->p_value;
  ev.cosine = best_cos;
  ev.grad_norm = best->weight_grad->norm();
  ledger.events.push_back(ev);
  if (pool.size() >= pool.max_experts()) {
    ledger.stopped = true;
    ledger.stop_reason = "capacity";
  }
  return ev;
}

std::optional<NllCheck> nll_stopping_check(MoePool& pool, ExpansionLedger& ledger, long step, ExpertId new_expert,
                                           const MaskedLossFn& loss) {
  std::optional<NllCheck> out;
  if (ledger.pending && pool.duplicated_pairs().size() >= 2) {
    const ExpertId cand = *ledger.pending;
    if (!pool.position_of(cand)) throw ContractError("nll_stopping_check: pending expert " + std::to_string(cand) + " missing");
    NllCheck c;
    c.step = step;
    c.candidate = cand;
    c.loss_masked = loss(cand);
    c.loss_original = loss(std::nullopt);
    c.loss_gap = c.loss_masked - c.loss_original;
    if (c.loss_gap <= 0.0) {
      c.retained = false;
      pool.remove_expert(cand);
      ledger.patience -= 1;
      if (ledger.patience <= 0) {
        ledger.patience = 0;
        ledger.stopped = true;
        ledger.stop_reason = "patience";
      }
    }
    c.patience_after = ledger.patience;
    c.stopped_after = ledger.stopped;
    ledger.checks.push_back(c);
    out = c;
  }
  ledger.pending = pool.position_of(new_expert) ? std::optional<ExpertId>(new_expert) : std::nullopt;
  return out;
}

}  // namespace mass
