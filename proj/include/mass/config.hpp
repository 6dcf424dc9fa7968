// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mass/expansion.hpp"
#include "mass/hmm.hpp"
#include "mass/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mass {

enum class Mode { mass, naive };

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

struct DataConfig {
  hmm::WorldParams world;
  int n = 50000;
  int t_prime = 10;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  long total_steps = 5000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";
  double lambda_red = 0.01;
  Mode mode = Mode::mass;
  int naive_k = 2;
  std::uint64_t seed = 0;
  long eval_every = 500;
  int eval_batch_size = 256;
  double test_fraction = 0.1;
  bool save_checkpoint = true;
  /// Test examples whose routing is logged after training; 0 logs the whole split.
  int routing_examples = 1000;
  ExpansionConfig expansion;
};

struct SweepConfig {
  std::vector<int> expert_counts{5, 10, 15, 20, 25};
  std::vector<int> top_k{1, 2, 3, 4, 5};
  std::vector<std::uint64_t> naive_seeds{0, 1, 2};
  std::vector<std::uint64_t> mass_seeds{0, 1, 2, 3, 4};
  std::vector<double> top_p{0.7};
  bool save_checkpoints = false;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  SweepConfig sweep;
  std::string output_dir = "runs";

  /// Cross-field checks; throws ConfigError naming the offending field.
  void validate() const;

  /// Model config with vocabulary, sequence length and seed taken from the
  /// data and training sections.
  ModelConfig resolved_model() const;
};

nlohmann::json to_json(const ExperimentConfig& c);

/// Strict parse: unknown fields and type mismatches raise ConfigError with the
/// dotted field path. Missing fields keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::string& path);

}  // namespace mass
