// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline plumbing behind the `mass` command: dataset generation, single
// runs, the K/k/p sweep and the post-hoc report.
//
// A run directory holds config.json (the resolved config), metrics.jsonl,
// expansions.jsonl (mass mode), routing.csv, checkpoint.cbor and, once the
// run has finished, summary.json.

#pragma once

#include "mass/analysis.hpp"
#include "mass/config.hpp"
#include "mass/hmm.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mass::cli {

namespace fs = std::filesystem;

/// Bad invocation or missing inputs; maps to exit code 2 like ConfigError.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

hmm::HmmDataset generate_data(const ExperimentConfig& config);

/// Writes dataset.json, labels.csv and config.json into `dir`.
void write_dataset_dir(const ExperimentConfig& config, const hmm::HmmDataset& data, const fs::path& dir);

struct RunOptions {
  bool resume = false;
  /// Stop (and checkpoint) after this step; the run can be resumed later.
  std::optional<long> stop_after;
};

/// Trains one configuration into `dir`. Returns the final summary, or a
/// {"type":"stopped"} record when `stop_after` cut the run short.
nlohmann::json train_run(const ExperimentConfig& config, const hmm::HmmDataset& data, const fs::path& dir,
                         const RunOptions& options = {});

bool run_completed(const fs::path& dir);

struct Cell {
  std::string name;
  ExperimentConfig config;
};

/// Naive cells for every (K, k <= K, seed) and mass cells for every (p, seed).
std::vector<Cell> sweep_cells(const ExperimentConfig& config);

struct SweepReport {
  int trained = 0;
  int skipped = 0;
};

/// Runs every incomplete cell with up to `jobs` concurrent workers. A
/// non-empty directory that belongs to a different sweep is refused unless
/// `force` is set, in which case its contents are removed first.
SweepReport run_sweep(const ExperimentConfig& config, const fs::path& dir, int jobs, bool force, std::ostream& log);

struct RunSummary {
  std::string name;
  std::string mode;
  int k_experts = 0;
  std::optional<int> top_k;
  std::optional<double> top_p;
  std::uint64_t seed = 0;
  double test_loss = 0.0;
  double mean_k_star = 0.0;
  std::optional<JsdSummary> entity_jsd;
  std::optional<JsdSummary> property_jsd;
};

struct AnalysisReport {
  std::vector<RunSummary> runs;
  Frontier frontier;
  nlohmann::json report;
};

/// Reads every completed run directly under `dir` (or `dir` itself).
AnalysisReport analyze_dir(const fs::path& dir);

/// report.json, runs.csv, frontier.csv and jsd_pairs.csv.
void write_analysis(const AnalysisReport& report, const fs::path& out);

/// Entry point of the `mass` executable; returns the process exit code.
int run(int argc, char** argv);

}  // namespace mass::cli
