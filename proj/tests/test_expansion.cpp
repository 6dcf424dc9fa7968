// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/expansion.hpp"
#include "mass/ops.hpp"

#include <doctest.h>

#include <cmath>
#include <deque>
#include <numeric>

using namespace mass;

namespace {

/// Straight recomputation of the frozen-z statistic from the raw stream.
std::vector<std::optional<double>> cpd_oracle(const std::vector<double>& g, int window, int warmup) {
  std::vector<std::optional<double>> out(g.size());
  std::vector<double> z;  // z frozen at each step after warmup
  for (std::size_t t = 0; t < g.size(); ++t) {
    const long step = static_cast<long>(t) + 1;
    if (step <= warmup || t + 1 < static_cast<std::size_t>(window)) continue;
    double mu = 0;
    for (std::size_t i = t + 1 - window; i <= t; ++i) mu += g[i];
    mu /= window;
    double ss = 0;
    for (std::size_t i = t + 1 - window; i <= t; ++i) ss += (g[i] - mu) * (g[i] - mu);
    const double sd = std::sqrt(ss / (window - 1));
    z.push_back(sd < 1e-12 ? 0.0 : (g[t] - mu) / sd);
    if (z.size() < static_cast<std::size_t>(window)) continue;
    const double s = std::accumulate(z.end() - window, z.end(), 0.0);
    out[t] = 0.5 * std::erfc(s / std::sqrt(static_cast<double>(window)) / std::sqrt(2.0));
  }
  return out;
}

ExpertBlock block(ExpertId id, const Matrix& w, const Matrix& gate) {
  ExpertBlock b;
  b.id = id;
  b.weight = w;
  b.gate = gate;
  return b;
}

/// Gradient with an exact zero inner product against w.
Matrix orthogonal_to(const Matrix& w, Rng& rng) {
  Matrix g = random_normal<double>(w.rows(), w.cols(), 1.0, rng);
  g -= (g.cwiseProduct(w).sum() / w.squaredNorm()) * w;
  return g;
}

}  // namespace

TEST_CASE("normal_upper_tail: reference values") {
  CHECK(normal_upper_tail(0.0) == doctest::Approx(0.5));
  CHECK(normal_upper_tail(1.6449) == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(normal_upper_tail(2.326348) == doctest::Approx(0.01).epsilon(1e-4));
}

TEST_CASE("detector: silent before warmup + window, bounded buffers, oracle agreement") {
  CpdConfig cfg{10, 20, 0.01};
  GradientShiftDetector d(cfg);
  Rng rng(1);
  std::vector<double> stream;
  for (int i = 0; i < 300; ++i) stream.push_back(std::abs(rng.normal(1.0, 0.2)) + (i > 150 ? 0.5 : 0.0));
  const auto oracle = cpd_oracle(stream, 10, 20);
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const auto st = d.observe(stream[t]);
    CHECK(d.norms().size() <= 10);
    CHECK(d.frozen_z().size() <= 10);
    if (d.steps_observed() < 30) CHECK_FALSE(st.has_value());
    if (d.steps_observed() == 30) CHECK(st.has_value());
    REQUIRE(st.has_value() == oracle[t].has_value());
    if (st) CHECK(std::abs(st->p_value - *oracle[t]) < 1e-12);
  }
}

TEST_CASE("detector: constant stream gives p = 0.5") {
  GradientShiftDetector d(CpdConfig{5, 3, 0.01});
  std::optional<CpdStatistic> last;
  for (int i = 0; i < 20; ++i) last = d.observe(2.0);
  REQUIRE(last);
  CHECK(last->z == 0.0);
  CHECK(last->normalized == 0.0);
  CHECK(last->p_value == 0.5);
  CHECK_THROWS_AS(d.observe(-1.0), std::invalid_argument);
  CHECK_THROWS_AS(d.observe(std::nan("")), std::invalid_argument);
}

TEST_CASE("detector: +5 sigma shift detected within one window in most streams") {
  int detected = 0;
  for (int s = 0; s < 100; ++s) {
    GradientShiftDetector d(CpdConfig{50, 100, 0.01});
    Rng rng(1000 + s);
    const int shift_at = 1000;
    bool hit = false;
    for (int t = 1; t <= 1100; ++t) {
      const double g = rng.normal(10.0, 1.0) + (t > shift_at ? 5.0 : 0.0);
      const auto st = d.observe(std::max(0.0, g));
      if (t > shift_at && t <= shift_at + 50 && st && st->p_value <= 0.01) hit = true;
    }
    detected += hit;
  }
  CHECK(detected >= 95);
}

TEST_CASE("monitor: per-expert streams, reset and erase") {
  CpdMonitor m(CpdConfig{3, 2, 0.01});
  for (int i = 0; i < 4; ++i) {
    m.observe(0, 1.0 + i);
    m.observe(1, 2.0);
  }
  CHECK(m.streams().size() == 2);
  CHECK(m.streams().at(0).steps_observed() == 4);
  m.erase(1);
  CHECK(m.streams().size() == 1);
  m.reset_all();
  CHECK(m.streams().empty());
}

TEST_CASE("alignment_test: parallel, orthogonal, oracle, zero") {
  Rng rng(3);
  const Matrix w = random_normal<double>(6, 6, 1.0, rng);
  CHECK_FALSE(alignment_test(2.0 * w, w, 0.001).drift);
  CHECK(alignment_test(2.0 * w, w, 0.001).cosine == doctest::Approx(1.0));
  CHECK(alignment_test(orthogonal_to(w, rng), w, 0.001).drift);
  for (int i = 0; i < 200; ++i) {
    const Matrix g = random_normal<double>(6, 6, 1.0, rng) + (rng.uniform() < 0.5 ? 0.0 : 1.0) * orthogonal_to(w, rng) * 50.0;
    double dot = 0, ng = 0, nw = 0;
    for (int k = 0; k < 36; ++k) {
      dot += g.data()[k] * w.data()[k];
      ng += g.data()[k] * g.data()[k];
      nw += w.data()[k] * w.data()[k];
    }
    const double cos = dot / std::sqrt(ng * nw);
    const auto a = alignment_test(g, w, 0.05);
    CHECK(a.cosine == doctest::Approx(cos).epsilon(1e-12));
    CHECK(a.drift == (std::abs(cos) < 0.05));
  }
  CHECK_FALSE(alignment_test(Matrix::Zero(6, 6), w, 0.001).drift);
}

TEST_CASE("decompose_gradient: projection identities and conservation") {
  Rng rng(5);
  const Matrix w = random_normal<double>(5, 5, 1.0, rng);
  const auto par = decompose_gradient(3.0 * w, w);
  CHECK((par.aligned - 3.0 * w).cwiseAbs().maxCoeff() < 1e-12);
  const auto orth = decompose_gradient(orthogonal_to(w, rng), w);
  CHECK(orth.aligned.cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 0; i < 200; ++i) {
    const Matrix g = random_normal<double>(5, 5, 1.0, rng);
    const auto s = decompose_gradient(g, w);
    const Matrix residual = s.full - s.aligned;
    CHECK(s.full == g);
    CHECK((s.aligned + residual - g).cwiseAbs().maxCoeff() <= 1e-15 * g.cwiseAbs().maxCoeff() * 4);
    CHECK(std::abs(residual.cwiseProduct(w).sum()) <= 1e-9 * g.norm() * w.norm());
  }
  CHECK(decompose_gradient(w, Matrix::Zero(5, 5)).aligned == Matrix::Zero(5, 5));
  CHECK_THROWS_AS(decompose_gradient(Matrix::Zero(2, 3), Matrix::Zero(3, 2)), ShapeError);
}

TEST_CASE("expansion_phase_end: ceiling of the fraction") {
  CHECK(expansion_phase_end(5000, 0.1) == 500);
  CHECK(expansion_phase_end(1001, 0.1) == 101);
  CHECK(expansion_phase_end(10, 0.1) == 1);
}

TEST_CASE("maybe_expand: gating, decomposed update, bookkeeping") {
  Rng rng(9);
  const int d = 4;
  MoePool pool(d, 4);
  for (int i = 0; i < 3; ++i) {
    pool.push_raw(block(i, random_normal<double>(d, d, 1.0, rng), random_normal<double>(d, 1, 1.0, rng)));
  }
  ExpansionConfig cfg;
  ExpansionLedger ledger = ExpansionLedger::start(cfg, 1000);
  CpdMonitor monitor(cfg.cpd);
  monitor.observe(0, 1.0);

  const Matrix w1 = pool.by_id(1).weight;
  const Matrix g1 = pool.by_id(1).gate;
  const Matrix grad_orth = orthogonal_to(w1, rng);
  const Matrix grad_par = 0.5 * w1;
  const Matrix gate_grad = random_normal<double>(d, 1, 1.0, rng);

  SUBCASE("nothing flagged") {
    const std::vector<ExpertSignal> sig{{1, 0.5, &grad_orth, &gate_grad}, {2, std::nullopt, &grad_orth, &gate_grad}};
    CHECK_FALSE(maybe_expand(pool, monitor, ledger, cfg, 10, sig, 0.1));
    CHECK(pool.size() == 3);
  }
  SUBCASE("significant but aligned gradient") {
    const std::vector<ExpertSignal> sig{{1, 1e-4, &grad_par, &gate_grad}};
    CHECK_FALSE(maybe_expand(pool, monitor, ledger, cfg, 10, sig, 0.1));
    CHECK(pool.size() == 3);
  }
  SUBCASE("forced trigger") {
    const Matrix other = orthogonal_to(pool.by_id(2).weight, rng);
    const std::vector<ExpertSignal> sig{{2, 5e-3, &other, &gate_grad}, {1, 1e-3, &grad_orth, &gate_grad}};
    const auto ev = maybe_expand(pool, monitor, ledger, cfg, 10, sig, 0.1);
    REQUIRE(ev);
    CHECK(ev->parent == 1);
    CHECK(ev->child == 3);
    CHECK(ev->p_value == 1e-3);
    CHECK(std::abs(ev->cosine) < cfg.delta);
    CHECK(pool.size() == 4);
    CHECK(pool.duplicated_pairs() == std::vector<std::pair<ExpertId, ExpertId>>{{1, 3}});
    CHECK(monitor.streams().empty());
    CHECK(ledger.events.size() == 1);
    // Parent moved along its own weight direction only; orthogonal gradient leaves it in place.
    const Matrix dp = pool.by_id(1).weight - w1;
    CHECK(dp.norm() <= 1e-12 * w1.norm());
    CHECK((pool.by_id(3).weight - (w1 - 0.1 * grad_orth)).cwiseAbs().maxCoeff() < 1e-14);
    const auto gs = decompose_gradient(gate_grad, g1);
    CHECK((pool.by_id(1).gate - (g1 - 0.1 * gs.aligned)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((pool.by_id(3).gate - (g1 - 0.1 * gate_grad)).cwiseAbs().maxCoeff() < 1e-14);
    // Pool now at capacity: further triggers are suppressed and expansion stops.
    CHECK(ledger.stopped);
    CHECK_FALSE(maybe_expand(pool, monitor, ledger, cfg, 11, sig, 0.1));
  }
  SUBCASE("parent update stays parallel to its weight") {
    const Matrix mixed = grad_orth + 1e-4 * w1 * (grad_orth.norm() / w1.norm());
    REQUIRE(std::abs(*flat_cosine(mixed, w1)) < cfg.delta);
    const std::vector<ExpertSignal> sig{{1, 1e-3, &mixed, &gate_grad}};
    REQUIRE(maybe_expand(pool, monitor, ledger, cfg, 10, sig, 0.1));
    const Matrix dp = pool.by_id(1).weight - w1;
    CHECK(std::abs(std::abs(*flat_cosine(dp, w1)) - 1.0) < 1e-6);
  }
  SUBCASE("outside the phase") {
    const std::vector<ExpertSignal> sig{{1, 1e-3, &grad_orth, &gate_grad}};
    CHECK_FALSE(maybe_expand(pool, monitor, ledger, cfg, 101, sig, 0.1));
  }
}

TEST_CASE("maybe_expand: capacity suppresses the trigger") {
  Rng rng(2);
  MoePool pool(3, 2);
  for (int i = 0; i < 2; ++i) pool.push_raw(block(i, random_normal<double>(3, 3, 1.0, rng), random_normal<double>(3, 1, 1.0, rng)));
  ExpansionConfig cfg;
  ExpansionLedger ledger = ExpansionLedger::start(cfg, 100);
  CpdMonitor monitor(cfg.cpd);
  const Matrix g = orthogonal_to(pool.by_id(0).weight, rng);
  const std::vector<ExpertSignal> sig{{0, 1e-3, &g, nullptr}};
  CHECK_FALSE(maybe_expand(pool, monitor, ledger, cfg, 1, sig, 0.1));
  CHECK(pool.size() == 2);
  CHECK(ledger.stopped);
  CHECK(ledger.stop_reason == "capacity");
}

TEST_CASE("nll_stopping_check: retain, remove, patience, contract") {
  Rng rng(4);
  MoePool pool(3, 10);
  for (int i = 0; i < 2; ++i) pool.push_raw(block(i, random_normal<double>(3, 3, 1.0, rng), random_normal<double>(3, 1, 1.0, rng)));
  ExpansionConfig cfg;
  cfg.patience = 2;
  ExpansionLedger ledger = ExpansionLedger::start(cfg, 1000);

  double masked = 2.0, original = 1.0;
  const MaskedLossFn loss = [&](std::optional<ExpertId> disabled) { return disabled ? masked : original; };

  // First expansion: |P| = 1, nothing to compare yet.
  const ExpertId a = pool.duplicate(0, 1);
  CHECK_FALSE(nll_stopping_check(pool, ledger, 1, a, loss));
  CHECK(ledger.pending == a);

  // Second expansion with a useful pending expert: retained.
  const ExpertId b = pool.duplicate(1, 2);
  auto c = nll_stopping_check(pool, ledger, 2, b, loss);
  REQUIRE(c);
  CHECK(c->candidate == a);
  CHECK(c->retained);
  CHECK(c->loss_gap == 1.0);
  CHECK(ledger.patience == 2);
  CHECK(pool.position_of(a));

  // Useless pending expert: removed, patience decremented.
  masked = original;
  const ExpertId e3 = pool.duplicate(0, 3);
  c = nll_stopping_check(pool, ledger, 3, e3, loss);
  REQUIRE(c);
  CHECK(c->candidate == b);
  CHECK_FALSE(c->retained);
  CHECK_FALSE(pool.position_of(b));
  for (const auto& [x, y] : pool.duplicated_pairs()) CHECK((x != b && y != b));
  CHECK(ledger.patience == 1);
  CHECK_FALSE(ledger.stopped);

  masked = 0.5;
  const ExpertId e4 = pool.duplicate(0, 4);
  c = nll_stopping_check(pool, ledger, 4, e4, loss);
  REQUIRE(c);
  CHECK_FALSE(c->retained);
  CHECK(ledger.patience == 0);
  CHECK(ledger.stopped);
  CHECK(ledger.stop_reason == "patience");
  CHECK_FALSE(ledger.active(5));

  ledger.pending = 77;
  CHECK_THROWS_AS(nll_stopping_check(pool, ledger, 6, e4, loss), ContractError);
}
