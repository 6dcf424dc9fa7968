// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/hmm.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace mass::hmm {

namespace {

int sample_categorical(const auto& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  const int n = static_cast<int>(probs.size());
  for (int i = 0; i < n; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return n - 1;
}

}  // namespace

void WorldSpec::validate() const {
  const auto& p = params;
  if (p.num_entities < 1 || p.num_properties < 1) throw ConfigError("world: need at least one entity and property");
  if (p.num_concepts < 1) throw ConfigError("world.num_concepts: must be >= 1");
  if (!(p.entity_stay_prob > 0.0 && p.entity_stay_prob <= 1.0)) {
    throw ConfigError("world.entity_stay_prob: must lie in (0, 1]");
  }
  if (p.vocab_size < 2) throw ConfigError("world.vocab_size: need a delimiter plus at least one emitted token");
  if (delimiter_token < 0 || delimiter_token >= p.vocab_size) throw ConfigError("world: delimiter outside vocabulary");
  if (static_cast<int>(memory.size()) != p.num_entities) throw ConfigError("world: memory matrix row count");
  for (const auto& row : memory) {
    if (static_cast<int>(row.size()) != p.num_properties) throw ConfigError("world: memory matrix column count");
    for (int tok : row) {
      if (tok < 0 || tok >= p.vocab_size) throw ConfigError("world: memory token " + std::to_string(tok) + " outside vocabulary");
      if (tok == delimiter_token) throw ConfigError("world: memory matrix emits the delimiter");
    }
  }
}

WorldSpec make_world(const WorldParams& params, std::uint64_t seed) {
  WorldSpec w;
  w.params = params;
  if (params.vocab_size < 2) throw ConfigError("world.vocab_size: need a delimiter plus at least one emitted token");
  if (params.num_entities < 1 || params.num_properties < 1) throw ConfigError("world: need at least one entity and property");
  w.delimiter_token = params.vocab_size - 1;

  Rng rng(derive_seed(seed, 0));
  std::vector<int> pool(static_cast<std::size_t>(params.vocab_size - 1));
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<int> cells;
  const std::size_t n_cells = static_cast<std::size_t>(params.num_entities) * static_cast<std::size_t>(params.num_properties);
  while (cells.size() < n_cells) {
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    cells.insert(cells.end(), pool.begin(), pool.end());
  }
  w.memory.assign(static_cast<std::size_t>(params.num_entities), {});
  for (int v = 0; v < params.num_entities; ++v) {
    auto& row = w.memory[static_cast<std::size_t>(v)];
    for (int s = 0; s < params.num_properties; ++s) {
      row.push_back(cells[static_cast<std::size_t>(v * params.num_properties + s)]);
    }
  }
  w.initial_entity.assign(static_cast<std::size_t>(params.num_entities), 1.0 / params.num_entities);
  w.initial_property.assign(static_cast<std::size_t>(params.num_properties), 1.0 / params.num_properties);
  w.validate();
  return w;
}

std::vector<ConceptParams> sample_concepts(const WorldSpec& world, std::uint64_t seed) {
  const int s = world.num_properties();
  Rng rng(derive_seed(seed, 1));
  std::vector<ConceptParams> out;
  out.reserve(static_cast<std::size_t>(world.params.num_concepts));
  for (int c = 0; c < world.params.num_concepts; ++c) {
    ConceptParams cp;
    cp.concept_id = c;
    cp.property_transition.resize(s, s);
    // Symmetric Dirichlet(1) rows: normalized unit exponentials.
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) cp.property_transition(i, j) = rng.exponential();
      cp.property_transition.row(i) /= cp.property_transition.row(i).sum();
    }
    out.push_back(std::move(cp));
  }
  return out;
}

HiddenState step_hidden(HiddenState state, const ConceptParams& concept_params, const WorldSpec& world, Rng& rng) {
  HiddenState next;
  next.property = sample_categorical(concept_params.property_transition.row(state.property), rng);
  const int n_ent = world.num_entities();
  if (n_ent == 1 || rng.uniform() < world.params.entity_stay_prob) {
    next.entity = state.entity;
  } else {
    // Switch to a different entity, uniformly.
    const int j = static_cast<int>(rng.index(static_cast<std::size_t>(n_ent - 1)));
    next.entity = j < state.entity ? j : j + 1;
  }
  return next;
}

int emit(HiddenState state, const WorldSpec& world) {
  return world.memory.at(static_cast<std::size_t>(state.entity)).at(static_cast<std::size_t>(state.property));
}

std::vector<int> HmmDataset::input(const Example& ex) const {
  return {tokens.begin() + static_cast<std::ptrdiff_t>(ex.start),
          tokens.begin() + static_cast<std::ptrdiff_t>(ex.start + ex.length)};
}

HmmDataset generate_dataset(const WorldSpec& world, const std::vector<ConceptParams>& concepts, int n, int t_prime,
                            std::uint64_t seed) {
  if (n < 1) throw ConfigError("dataset.n: must be >= 1");
  if (t_prime < 1) throw ConfigError("dataset.t_prime: must be >= 1");
  if (concepts.empty()) throw ConfigError("dataset: no concepts");
  world.validate();
  for (const auto& c : concepts) {
    if (c.property_transition.rows() != world.num_properties() || c.property_transition.cols() != world.num_properties()) {
      throw ConfigError("dataset: concept transition shape does not match world");
    }
  }

  HmmDataset ds;
  ds.world = world;
  ds.concepts = concepts;
  ds.seed = seed;
  ds.n = n;
  ds.t_prime = t_prime;
  const std::size_t total = expected_length(n, t_prime);
  ds.tokens.reserve(total);
  ds.labels.reserve(total);
  ds.examples.reserve(static_cast<std::size_t>(n));

  Rng rng(derive_seed(seed, 2));
  HiddenState state;
  bool started = false;
  auto emit_segment = [&](int concept_idx, int count) {
    const ConceptParams& cp = concepts[static_cast<std::size_t>(concept_idx)];
    for (int j = 0; j < count; ++j) {
      if (!started) {
        state.entity = sample_categorical(world.initial_entity, rng);
        state.property = sample_categorical(world.initial_property, rng);
        started = true;
      } else {
        state = step_hidden(state, cp, world, rng);
      }
      ds.tokens.push_back(emit(state, world));
      ds.labels.push_back(TokenLabel{state.entity, state.property, cp.concept_id});
    }
  };

  const auto n_concepts = concepts.size();
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.index(n_concepts));
    const std::size_t start = ds.tokens.size();
    emit_segment(c, t_prime);
    const std::size_t len = static_cast<std::size_t>(t_prime - 1);
    ds.examples.push_back(Example{start, len, ds.tokens[start + len]});
    ds.tokens.push_back(world.delimiter_token);
    ds.labels.push_back(TokenLabel{});
  }
  ds.test_span_start = ds.tokens.size();
  emit_segment(static_cast<int>(rng.index(n_concepts)), t_prime);
  return ds;
}

}  // namespace mass::hmm
