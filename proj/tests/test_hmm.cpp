// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/hmm.hpp"
#include "mass/io.hpp"

#include <doctest.h>

#include <set>

using namespace mass;
using namespace mass::hmm;

namespace {

HmmDataset make(int n, int t_prime, std::uint64_t seed = 0, WorldParams params = {}) {
  const auto world = make_world(params, seed);
  return generate_dataset(world, sample_concepts(world, seed), n, t_prime, seed);
}

}  // namespace

TEST_CASE("world: memory matrix avoids the delimiter and fits the vocabulary") {
  const auto w = make_world({}, 3);
  CHECK(w.delimiter_token == 63);
  CHECK_NOTHROW(w.validate());
  std::set<int> used;
  for (const auto& row : w.memory) {
    for (int t : row) {
      CHECK(t >= 0);
      CHECK(t < 63);
      used.insert(t);
    }
  }
  // 100 cells over 63 tokens: the permutation is repeated, so every token appears.
  CHECK(used.size() == 63);

  WorldParams tiny;
  tiny.vocab_size = 1;
  CHECK_THROWS_AS(make_world(tiny, 0), ConfigError);
  WorldParams bad_stay;
  bad_stay.entity_stay_prob = 0.0;
  CHECK_THROWS_AS(make_world(bad_stay, 0), ConfigError);
}

TEST_CASE("sample_concepts: five row-stochastic matrices, deterministic") {
  const auto w = make_world({}, 0);
  const auto c = sample_concepts(w, 42);
  REQUIRE(c.size() == 5);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(c[i].concept_id == static_cast<int>(i));
    CHECK((c[i].property_transition.array() >= 0).all());
    for (int r = 0; r < c[i].property_transition.rows(); ++r) {
      CHECK(std::abs(c[i].property_transition.row(r).sum() - 1.0) < 1e-9);
    }
  }
  const auto again = sample_concepts(w, 42);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i].property_transition == again[i].property_transition);

  WorldParams one;
  one.num_properties = 1;
  const auto w1 = make_world(one, 0);
  for (const auto& cp : sample_concepts(w1, 0)) CHECK(cp.property_transition == Matrix::Ones(1, 1));
}

TEST_CASE("step_hidden: stickiness and property transition frequencies") {
  const auto w = make_world({}, 0);
  const auto concepts = sample_concepts(w, 0);
  const auto& cp = concepts[0];
  Rng rng(123);
  HiddenState s{0, 0};
  long stays = 0;
  const long steps = 100000;
  Matrix counts = Matrix::Zero(10, 10);
  for (long i = 0; i < steps; ++i) {
    const HiddenState nx = step_hidden(s, cp, w, rng);
    if (nx.entity == s.entity) ++stays;
    counts(s.property, nx.property) += 1;
    s = nx;
  }
  const double stay = static_cast<double>(stays) / steps;
  CHECK(stay >= 0.894);
  CHECK(stay <= 0.906);

  // Total variation of the empirical transition, weighted by visit frequency.
  double tv = 0.0;
  for (int r = 0; r < 10; ++r) {
    const double row_n = counts.row(r).sum();
    if (row_n == 0) continue;
    const double row_tv = 0.5 * (counts.row(r) / row_n - cp.property_transition.row(r)).cwiseAbs().sum();
    tv += row_tv * row_n / steps;
  }
  CHECK(tv < 0.01);

  WorldParams sticky;
  sticky.entity_stay_prob = 1.0;
  const auto ws = make_world(sticky, 0);
  HiddenState t{4, 2};
  for (int i = 0; i < 1000; ++i) {
    t = step_hidden(t, cp, ws, rng);
    CHECK(t.entity == 4);
  }
}

TEST_CASE("emit: deterministic lookup into the memory matrix") {
  const auto w = make_world({}, 1);
  for (int v = 0; v < 10; ++v) {
    for (int s = 0; s < 10; ++s) {
      const int tok = emit({v, s}, w);
      CHECK(tok == emit({v, s}, w));
      CHECK(tok != w.delimiter_token);
      const auto& row = w.memory[static_cast<std::size_t>(v)];
      CHECK(std::find(row.begin(), row.end(), tok) != row.end());
    }
  }
}

TEST_CASE("generate_dataset: length formula and delimiter layout") {
  CHECK(make(2, 3).tokens.size() == 11);
  const auto d = make(1000, 10);
  CHECK(d.tokens.size() == 11010);
  CHECK(d.labels.size() == d.tokens.size());
  std::size_t delims = 0;
  for (std::size_t t = 0; t < d.tokens.size(); ++t) {
    const bool expect = (t + 1) % 11 == 0 && t < 11000;
    CHECK((d.tokens[t] == d.world.delimiter_token) == expect);
    CHECK(d.labels[t].is_delimiter() == expect);
    delims += expect;
  }
  CHECK(delims == 1000);
  CHECK(d.test_span_start == 11000);

  Rng rng(77);
  for (int i = 0; i < 20; ++i) {
    const int n = 1 + static_cast<int>(rng.index(200));
    const int tp = 1 + static_cast<int>(rng.index(15));
    CHECK(make(n, tp, static_cast<std::uint64_t>(i)).tokens.size() == expected_length(n, tp));
  }
}

TEST_CASE("generate_dataset: examples, labels and replay") {
  const auto d = make(300, 6, 5);
  REQUIRE(d.examples.size() == 300);
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    const auto& e = d.examples[i];
    CHECK(e.start == i * 7);
    CHECK(e.length == 5);
    CHECK(e.target == d.tokens[e.start + e.length]);
    // One concept per segment.
    for (std::size_t t = e.start; t <= e.start + e.length; ++t) CHECK(d.labels[t].concept_id == d.labels[e.start].concept_id);
  }
  for (std::size_t t = 0; t < d.tokens.size(); ++t) {
    if (d.labels[t].is_delimiter()) continue;
    CHECK(d.tokens[t] == emit({d.labels[t].entity, d.labels[t].property}, d.world));
  }
  std::set<int> concepts;
  for (const auto& l : d.labels) {
    if (!l.is_delimiter()) concepts.insert(l.concept_id);
  }
  CHECK(concepts.size() == 5);
}

TEST_CASE("generate_dataset: deterministic bytes per seed") {
  const auto a = io::dataset_to_json(make(200, 8, 9)).dump();
  const auto b = io::dataset_to_json(make(200, 8, 9)).dump();
  const auto c = io::dataset_to_json(make(200, 8, 10)).dump();
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("generate_dataset: argument checks") {
  const auto w = make_world({}, 0);
  const auto c = sample_concepts(w, 0);
  CHECK_THROWS_AS(generate_dataset(w, c, 0, 5, 0), ConfigError);
  CHECK_THROWS_AS(generate_dataset(w, c, 5, 0, 0), ConfigError);
}
