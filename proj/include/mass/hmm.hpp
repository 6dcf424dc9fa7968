// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic language from a uniform mixture of multinomial HMMs. Hidden
// states are (entity, property) pairs; entities are sticky, properties follow
// a per-concept transition matrix, and every state emits exactly one token
// through a global memory matrix.

#pragma once

#include "mass/matrix.hpp"

#include <cstdint>
#include <vector>

namespace mass::hmm {

struct WorldParams {
  int num_entities = 10;
  int num_properties = 10;
  int vocab_size = 64;
  int num_concepts = 5;
  double entity_stay_prob = 0.9;
};

struct WorldSpec {
  WorldParams params;
  int delimiter_token = 0;
  /// num_entities x num_properties table of token ids.
  std::vector<std::vector<int>> memory;
  /// Initial distribution over entities and properties (independent, uniform by default).
  std::vector<double> initial_entity;
  std::vector<double> initial_property;

  int num_entities() const { return params.num_entities; }
  int num_properties() const { return params.num_properties; }
  int vocab_size() const { return params.vocab_size; }

  void validate() const;
};

/// Builds the memory matrix from a seeded permutation of the non-delimiter
/// vocabulary; the permutation is repeated when there are more cells than tokens.
WorldSpec make_world(const WorldParams& params, std::uint64_t seed);

struct ConceptParams {
  int concept_id = 0;
  Matrix property_transition;  // row-stochastic, |S| x |S|
};

std::vector<ConceptParams> sample_concepts(const WorldSpec& world, std::uint64_t seed);

struct HiddenState {
  int entity = 0;
  int property = 0;
  bool operator==(const HiddenState&) const = default;
};

HiddenState step_hidden(HiddenState state, const ConceptParams& concept_params, const WorldSpec& world, Rng& rng);

int emit(HiddenState state, const WorldSpec& world);

struct TokenLabel {
  int entity = -1;  // -1 on delimiter positions
  int property = -1;
  int concept_id = -1;
  bool is_delimiter() const { return entity < 0; }
  bool operator==(const TokenLabel&) const = default;
};

/// One (x_i, y_i) pair: the input span is tokens[start, start + length) and
/// the target is the token immediately after it. Each segment of t' + 1
/// stream positions holds x_i (t' - 1 tokens), y_i and one delimiter, which
/// keeps T = n (t' + 1) + t'.
struct Example {
  std::size_t start = 0;
  std::size_t length = 0;
  int target = 0;
  bool operator==(const Example&) const = default;
};

struct HmmDataset {
  WorldSpec world;
  std::vector<ConceptParams> concepts;
  std::uint64_t seed = 0;
  int n = 0;
  int t_prime = 0;
  std::vector<int> tokens;
  std::vector<TokenLabel> labels;
  std::vector<Example> examples;
  /// Start of the trailing x_test span.
  std::size_t test_span_start = 0;

  std::size_t size() const { return tokens.size(); }
  std::vector<int> input(const Example& ex) const;
};

constexpr std::size_t expected_length(int n, int t_prime) {
  return static_cast<std::size_t>(n) * static_cast<std::size_t>(t_prime + 1) + static_cast<std::size_t>(t_prime);
}

/// Layout: [x_1, y_1, delim, ..., x_n, y_n, delim, x_test] with x_test of
/// length t'. One concept is drawn per segment and the hidden chain carries
/// across segment boundaries (delimiters do not advance it).
HmmDataset generate_dataset(const WorldSpec& world, const std::vector<ConceptParams>& concepts, int n, int t_prime,
                            std::uint64_t seed);

}  // namespace mass::hmm
