// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-layer transformer for the synthetic experiments: token embedding,
// fixed sinusoidal positions, one causal self-attention block whose
// feed-forward network is the MoE layer, and a shared decoder head.

#pragma once

#include "mass/matrix.hpp"
#include "mass/moe.hpp"
#include "mass/tape.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mass {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int vocab_size = 64;
  int max_seq_len = 64;
  int k_init = 5;
  int k_max = 25;
  double top_p = 0.7;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ModelState {
  ModelConfig config;
  Matrix embedding;   // |O| x d
  Matrix positional;  // max_seq_len x d, not trained
  Matrix wq, wk, wv, wo;
  Matrix bq, bk, bv, bo;  // 1 x d
  Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  MoePool pool;
  Matrix decoder;       // d x |O|
  Matrix decoder_bias;  // 1 x |O|
};

Matrix sinusoidal_encoding(int max_len, int d_model);

ModelState init_model(const ModelConfig& config);

struct ParamRef {
  std::string name;
  Matrix* value;
};

/// Every trainable tensor, in a fixed order. Experts appear as
/// "expert.<id>.weight" and "expert.<id>.gate".
std::vector<ParamRef> parameters(ModelState& state);
std::vector<std::pair<std::string, const Matrix*>> parameters(const ModelState& state);

std::string expert_weight_name(ExpertId id);
std::string expert_gate_name(ExpertId id);

/// Equal-length sequences flattened row-major; one target per sequence
/// (the token following the sequence's last position).
struct Batch {
  std::vector<int> tokens;
  int seq_len = 0;
  std::vector<int> targets;

  int num_sequences() const { return seq_len == 0 ? 0 : static_cast<int>(tokens.size()) / seq_len; }
};

struct ForwardOptions {
  RoutingRule rule = TopP{0.7};
  /// Expert whose routing score is dropped before selection (NLL masking).
  std::optional<ExpertId> disabled;
  /// When true only the last position of each sequence goes through the
  /// MoE and decoder; attention still sees the whole prefix.
  bool last_position_only = true;
};

using RealTape = Tape<Real>;

struct Graph {
  RealTape tape;
  std::vector<std::pair<std::string, RealTape::Var>> params;
  RealTape::Var logits;
  /// Flat token row of each logits row.
  std::vector<int> rows;
  std::vector<RoutingDecision> routing;
};

/// Builds the forward graph. Parameters become tape leaves that require
/// gradients only when `trainable` is set.
Graph build_forward(const ModelState& state, std::span<const int> tokens, int seq_len, const ForwardOptions& opts,
                    bool trainable);

/// Logits for every position, shape (len, |O|).
Matrix forward_sequence(const ModelState& state, std::span<const int> tokens, const ForwardOptions& opts,
                        std::vector<RoutingDecision>* routing = nullptr);

struct GradientResult {
  double task_loss = 0.0;
  double redundancy = 0.0;
  double objective = 0.0;
  std::map<std::string, Matrix> grads;
  std::vector<RoutingDecision> routing;
};

/// Task loss (mean cross-entropy at target positions) plus lambda * L_red,
/// with gradients for every parameter.
GradientResult compute_gradients(const ModelState& state, const Batch& batch, const ForwardOptions& opts,
                                 double lambda_red);

/// Task loss only; no parameter mutation.
double batch_loss(const ModelState& state, const Batch& batch, const ForwardOptions& opts);

}  // namespace mass
