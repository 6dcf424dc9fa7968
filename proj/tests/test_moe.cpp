// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/moe.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace mass;

namespace {

std::vector<double> random_simplex(std::size_t k, Rng& rng) {
  std::vector<double> v(k);
  double s = 0;
  for (auto& x : v) s += (x = rng.exponential());
  for (auto& x : v) x /= s;
  return v;
}

/// Minimal-prefix oracle: scan every prefix length of a full sort.
std::vector<int> top_p_oracle(const std::vector<double>& r, double p) {
  std::vector<int> idx(r.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return r[a] > r[b] || (r[a] == r[b] && a < b); });
  for (std::size_t len = 1; len <= idx.size(); ++len) {
    double mass = 0;
    for (std::size_t i = 0; i < len; ++i) mass += r[static_cast<std::size_t>(idx[i])];
    if (mass >= p) return {idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(len)};
  }
  return idx;
}

MoePool make_pool(int d, int k, std::uint64_t seed, int k_max = 10) {
  Rng rng(seed);
  return MoePool::initialize(d, k, k_max, rng);
}

}  // namespace

TEST_CASE("route_top_p: hand cases") {
  const std::vector<double> one{1.0};
  const auto d1 = route_top_p(one, 0.7);
  CHECK(d1.k_star == 1);
  CHECK(d1.selected == std::vector<int>{0});

  const std::vector<double> r{0.5, 0.3, 0.2};
  const auto d = route_top_p(r, 0.7);
  CHECK(d.k_star == 2);
  CHECK(d.selected == std::vector<int>{0, 1});

  const std::vector<double> tie{0.25, 0.25, 0.25, 0.25};
  CHECK(route_top_p(tie, 0.3).selected == std::vector<int>{0, 1});

  const std::vector<double> none;
  CHECK_THROWS_AS(route_top_p(none, 0.5), ContractError);
  CHECK_THROWS_AS(route_top_p(r, 1.0), ContractError);
  CHECK_THROWS_AS(route_top_p(r, 0.0), ContractError);
}

TEST_CASE("route_top_p: random vectors against the prefix oracle, minimal and monotone") {
  Rng rng(2024);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto r = random_simplex(1 + rng.index(12), rng);
    int prev = 0;
    for (int pi = 1; pi <= 9; ++pi) {
      const double p = pi / 10.0;
      const auto d = route_top_p(r, p);
      CHECK(d.selected == top_p_oracle(r, p));
      double mass = 0;
      for (int j : d.selected) mass += r[static_cast<std::size_t>(j)];
      CHECK(mass >= p - 1e-12);
      if (d.k_star > 1) CHECK(mass - r[static_cast<std::size_t>(d.selected.back())] < p);
      CHECK(d.k_star >= prev);
      prev = d.k_star;
    }
  }
}

TEST_CASE("route_top_k: argmax, full set, sort oracle, range errors") {
  Rng rng(8);
  for (int trial = 0; trial < 500; ++trial) {
    const auto r = random_simplex(5, rng);
    const auto k1 = route_top_k(r, 1);
    CHECK(k1.selected.front() == std::max_element(r.begin(), r.end()) - r.begin());
    auto sorted = top_p_oracle(r, 0.999999999);
    sorted.resize(5);
    const auto k2 = route_top_k(r, 2);
    CHECK(k2.selected == std::vector<int>(sorted.begin(), sorted.begin() + 2));
    CHECK(route_top_k(r, 5).k_star == 5);
  }
  const std::vector<double> r{0.5, 0.5};
  CHECK_THROWS_AS(route_top_k(r, 3), ConfigError);
  CHECK_THROWS_AS(route_top_k(r, 0), ConfigError);
}

TEST_CASE("forward: single expert, dense limit, masked-dense identity") {
  Rng rng(4);
  const MoePool one = make_pool(6, 1, 1);
  const RowVector x = random_normal<double>(1, 6, 1.0, rng);
  CHECK((one.forward(x, TopP{0.7}) - one.at(0).apply(x).row(0)).cwiseAbs().maxCoeff() < 1e-15);

  const MoePool three = make_pool(6, 3, 2);
  RoutingDecision dec;
  const RowVector y = three.forward(x, TopP{0.999999999999}, &dec);
  CHECK(dec.k_star == 3);
  RowVector dense = RowVector::Zero(6);
  const RowVector r = three.scores(x);
  for (int k = 0; k < 3; ++k) dense += r(k) * three.at(k).apply(x).row(0);
  CHECK((y - dense).cwiseAbs().maxCoeff() < 1e-9);

  const MoePool pool = make_pool(8, 6, 3);
  for (int t = 0; t < 200; ++t) {
    const RowVector xi = random_normal<double>(1, 8, 2.0, rng);
    RoutingDecision di;
    const RowVector sparse = pool.forward(xi, TopP{0.1 + 0.8 * rng.uniform()}, &di);
    CHECK((sparse - pool.forward_dense_masked(xi, di)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(std::accumulate(di.scores.begin(), di.scores.end(), 0.0) - 1.0) < 1e-6);
  }
}

TEST_CASE("gating: column count tracks the pool") {
  MoePool pool = make_pool(5, 3, 6);
  CHECK(pool.gating().cols() == 3);
  pool.duplicate(pool.at(1).id, 10);
  CHECK(pool.gating().cols() == 4);
  CHECK(pool.size() == 4);
  pool.remove_expert(pool.at(3).id);
  CHECK(pool.gating().cols() == 3);
  CHECK(pool.duplicated_pairs().empty());
}

TEST_CASE("duplicate: bitwise clone, equal routing scores, pair recorded") {
  MoePool pool = make_pool(6, 6, 11, 8);
  const ExpertId parent = pool.at(2).id;
  const ExpertId child = pool.duplicate(parent, 42);
  CHECK(pool.size() == 7);
  CHECK(pool.by_id(child).weight == pool.by_id(parent).weight);
  CHECK(pool.by_id(child).gate == pool.by_id(parent).gate);
  CHECK(pool.by_id(child).creation_step == 42);
  CHECK(pool.by_id(child).parent == parent);
  REQUIRE(pool.duplicated_pairs().size() == 1);
  CHECK(pool.duplicated_pairs().front() == std::pair{parent, child});

  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const RowVector r = pool.scores(random_normal<double>(1, 6, 1.0, rng));
    CHECK(std::abs(r(*pool.position_of(parent)) - r(*pool.position_of(child))) <= 1e-12);
  }

  pool.duplicate(parent, 43);
  CHECK_THROWS_AS(pool.duplicate(parent, 44), CapacityError);
}

TEST_CASE("add_expert: explicit gate column and pair") {
  MoePool pool = make_pool(4, 2, 13, 3);
  ExpertBlock e;
  e.weight = Matrix::Identity(4, 4);
  Matrix gate = Matrix::Ones(4, 1);
  const ExpertId id = pool.add_expert(e, gate, pool.at(0).id);
  CHECK(pool.by_id(id).gate == gate);
  CHECK(pool.gating().col(2) == gate);
  CHECK_THROWS_AS(pool.add_expert(e, gate, id), CapacityError);
}

TEST_CASE("redundancy_loss: empty, identical, orthogonal, bounded") {
  MoePool pool(3, 6);
  const auto block = [](ExpertId id, Matrix gate) {
    ExpertBlock b;
    b.id = id;
    b.weight = Matrix::Identity(3, 3);
    b.gate = std::move(gate);
    return b;
  };
  Matrix g0(3, 1), g1(3, 1), g2(3, 1);
  g0 << 1, 2, 3;
  g1 << 1, 2, 3;
  g2 << 3, 0, -1;
  pool.push_raw(block(0, g0));
  pool.push_raw(block(1, g1));
  pool.push_raw(block(2, g2));
  CHECK(redundancy_loss(pool) == 0.0);
  pool.set_pairs({{0, 1}});
  CHECK(redundancy_loss(pool) == doctest::Approx(1.0).epsilon(1e-14));
  pool.set_pairs({{0, 2}});
  CHECK(redundancy_loss(pool) == 0.0);
  pool.set_pairs({{0, 1}, {0, 2}});
  CHECK(redundancy_loss(pool) == doctest::Approx(0.5));

  MoePool rnd = make_pool(7, 8, 21);
  Rng rng(22);
  std::vector<std::pair<ExpertId, ExpertId>> pairs;
  for (int i = 0; i < 6; ++i) pairs.emplace_back(rnd.at(static_cast<int>(rng.index(8))).id, rnd.at(static_cast<int>(rng.index(8))).id);
  rnd.set_pairs(pairs);
  const double l = redundancy_loss(rnd);
  CHECK(l >= 0.0);
  CHECK(l <= 1.0);
  CHECK_THROWS_AS(rnd.set_pairs({{0, 99}}), ContractError);
}
