// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mass/hmm.hpp"
#include "mass/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace mass::io {

namespace fs = std::filesystem;

inline constexpr int kCheckpointVersion = 1;

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

nlohmann::json dataset_to_json(const hmm::HmmDataset& data);
hmm::HmmDataset dataset_from_json(const nlohmann::json& j);

/// One row per stream position: position,token,entity,property,concept.
std::string labels_csv(const hmm::HmmDataset& data);

void save_dataset(const hmm::HmmDataset& data, const fs::path& path);
hmm::HmmDataset load_dataset(const fs::path& path);

nlohmann::json checkpoint_to_json(const TrainerState& state);
TrainerState checkpoint_from_json(const nlohmann::json& j);

/// Binary CBOR encoding; doubles round-trip exactly.
void save_checkpoint(const TrainerState& state, const fs::path& path);
TrainerState load_checkpoint(const fs::path& path);

/// example,position,token,entity,property,concept,k_star,r_0..r_{K-1}
std::string routing_csv(const std::vector<RoutingRecord>& records);
std::vector<RoutingRecord> parse_routing_csv(const std::string& text);

/// Writes `text` to a sibling temp file and renames it into place.
void write_atomic(const fs::path& path, const std::string& text);
std::string read_file(const fs::path& path);

/// Append-only JSON lines, flushed after every record.
class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path, bool append = false);
  void write(const nlohmann::json& record);

 private:
  std::ofstream out_;
};

std::vector<nlohmann::json> read_jsonl(const fs::path& path);

}  // namespace mass::io
