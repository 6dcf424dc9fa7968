// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-phase training. In mass mode the first ceil(phase_fraction * total)
// steps run the expansion engine with the redundancy penalty active; the
// remaining steps train the frozen pool on task loss alone. Naive mode trains
// a fixed pool with top-k routing under the same loop.

#pragma once

#include "mass/config.hpp"
#include "mass/cpd.hpp"
#include "mass/expansion.hpp"
#include "mass/hmm.hpp"
#include "mass/model.hpp"
#include "mass/optimizer.hpp"

#include <json.hpp>

#include <functional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mass {

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  /// Fixed validation batch for NLL comparisons, disjoint from train and
  /// test when the dataset is large enough (otherwise taken from train).
  std::vector<std::size_t> eval;
};

/// Holds out ceil(test_fraction * n) test examples chosen by a seeded
/// permutation, then a validation batch of `eval_batch_size`.
DataSplit split_examples(const hmm::HmmDataset& data, double test_fraction, int eval_batch_size, std::uint64_t seed);

Batch make_batch(const hmm::HmmDataset& data, std::span<const std::size_t> example_indices);

/// Mean target cross-entropy over the given examples, evaluated in chunks.
double dataset_loss(const ModelState& model, const hmm::HmmDataset& data, std::span<const std::size_t> examples,
                    const ForwardOptions& opts);

struct RoutingRecord {
  int example = 0;
  int position = 0;
  int token = 0;
  int entity = -1;
  int property = -1;
  int concept_id = -1;
  int k_star = 0;
  std::vector<double> scores;
};

/// Full routing distribution and active count for every input token of the
/// given examples.
std::vector<RoutingRecord> routing_log(const ModelState& model, const hmm::HmmDataset& data,
                                       std::span<const std::size_t> examples, const RoutingRule& rule);

struct TrainingDiverged : std::runtime_error {
  TrainingDiverged(const std::string& what, nlohmann::json diag) : std::runtime_error(what), diagnostic(std::move(diag)) {}
  nlohmann::json diagnostic;
};

using MetricsSink = std::function<void(const nlohmann::json&)>;

/// Everything needed to continue a run bit-exactly.
struct TrainerState {
  ExperimentConfig config;
  long step = 0;
  ModelState model;
  Adam optimizer;
  CpdMonitor monitor;
  ExpansionLedger ledger;
  std::string rng_state;
};

class Trainer {
 public:
  Trainer(const ExperimentConfig& config, const hmm::HmmDataset& data);
  Trainer(TrainerState state, const hmm::HmmDataset& data);

  /// Runs steps up to and including `until_step` (clamped to total_steps).
  void run(long until_step, const MetricsSink& sink);
  void step(const MetricsSink& sink);

  long current_step() const { return state_.step; }
  bool finished() const { return state_.step >= state_.config.train.total_steps; }

  RoutingRule rule() const;
  ForwardOptions forward_options() const;

  double test_loss() const;
  std::vector<RoutingRecord> test_routing() const;

  /// Closing summary: test loss, pool size, mean active experts on the test split.
  nlohmann::json final_summary(const std::vector<RoutingRecord>& routing) const;

  /// Snapshot with the generator state captured.
  TrainerState snapshot() const;

  const ModelState& model() const { return state_.model; }
  const ExpansionLedger& ledger() const { return state_.ledger; }
  const ExperimentConfig& config() const { return state_.config; }
  const DataSplit& split() const { return split_; }

 private:
  void expansion_step(const GradientResult& gr, std::vector<std::pair<ExpertId, double>>& p_values,
                      std::set<std::string>& skip, const MetricsSink& sink);

  TrainerState state_;
  const hmm::HmmDataset& data_;
  DataSplit split_;
  Rng rng_;
};

}  // namespace mass
