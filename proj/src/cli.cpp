// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/cli.hpp"

#include "mass/io.hpp"
#include "mass/log.hpp"
#include "mass/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace mass::cli {

using nlohmann::json;

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kMetricsFile = "metrics.jsonl";
constexpr const char* kExpansionsFile = "expansions.jsonl";
constexpr const char* kCheckpointFile = "checkpoint.cbor";
constexpr const char* kRoutingFile = "routing.csv";
constexpr const char* kSummaryFile = "summary.json";
constexpr const char* kDatasetFile = "dataset.json";
constexpr const char* kManifestFile = "sweep.json";

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// Keeps only records at or before `step` so a resumed run appends cleanly.
void truncate_jsonl(const fs::path& path, long step) {
  if (!fs::exists(path)) return;
  std::string kept;
  for (const auto& rec : io::read_jsonl(path)) {
    if (rec.value("step", 0L) <= step && rec.value("type", "") != "final") kept += rec.dump() + "\n";
  }
  io::write_atomic(path, kept);
}

json load_json(const fs::path& path) { return json::parse(io::read_file(path)); }

}  // namespace

hmm::HmmDataset generate_data(const ExperimentConfig& config) {
  const auto& d = config.data;
  const auto world = hmm::make_world(d.world, d.seed);
  const auto concepts = hmm::sample_concepts(world, d.seed);
  return hmm::generate_dataset(world, concepts, d.n, d.t_prime, d.seed);
}

void write_dataset_dir(const ExperimentConfig& config, const hmm::HmmDataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  io::save_dataset(data, dir / kDatasetFile);
  io::write_atomic(dir / "labels.csv", io::labels_csv(data));
  io::write_atomic(dir / kConfigFile, to_json(config).dump(2) + "\n");
}

bool run_completed(const fs::path& dir) { return fs::exists(dir / kSummaryFile); }

json train_run(const ExperimentConfig& config, const hmm::HmmDataset& data, const fs::path& dir,
               const RunOptions& options) {
  fs::create_directories(dir);
  const fs::path ckpt = dir / kCheckpointFile;
  const bool mass_mode = config.train.mode == Mode::mass;

  std::optional<Trainer> trainer;
  bool resumed = false;
  if (options.resume && fs::exists(ckpt)) {
    TrainerState state = io::load_checkpoint(ckpt);
    if (to_json(state.config) != to_json(config)) {
      throw UsageError(ckpt.string() + ": checkpoint was written with a different config");
    }
    truncate_jsonl(dir / kMetricsFile, state.step);
    truncate_jsonl(dir / kExpansionsFile, state.step);
    trainer.emplace(std::move(state), data);
    resumed = true;
  } else {
    trainer.emplace(config, data);
    fs::remove(dir / kSummaryFile);
    fs::remove(ckpt);
  }
  io::write_atomic(dir / kConfigFile, to_json(config).dump(2) + "\n");

  io::MetricsWriter metrics(dir / kMetricsFile, resumed);
  std::optional<io::MetricsWriter> expansions;
  if (mass_mode) expansions.emplace(dir / kExpansionsFile, resumed);
  const MetricsSink sink = [&](const json& rec) {
    metrics.write(rec);
    if (expansions) {
      const auto& type = rec.at("type");
      if (type == "expansion" || type == "nll_check") expansions->write(rec);
    }
  };

  const auto& tc = config.train;
  try {
    while (!trainer->finished()) {
      trainer->step(sink);
      const long t = trainer->current_step();
      if (options.stop_after && t >= *options.stop_after && !trainer->finished()) {
        io::save_checkpoint(trainer->snapshot(), ckpt);
        return json{{"type", "stopped"}, {"step", t}};
      }
      if (tc.save_checkpoint && t % tc.eval_every == 0 && !trainer->finished()) {
        io::save_checkpoint(trainer->snapshot(), ckpt);
      }
    }
  } catch (const TrainingDiverged& e) {
    io::write_atomic(dir / "abort.json", e.diagnostic.dump(2) + "\n");
    throw;
  }

  const auto routing = trainer->test_routing();
  io::write_atomic(dir / kRoutingFile, io::routing_csv(routing));
  json summary = trainer->final_summary(routing);
  sink(summary);
  if (tc.save_checkpoint) io::save_checkpoint(trainer->snapshot(), ckpt);
  io::write_atomic(dir / kSummaryFile, summary.dump(2) + "\n");
  return summary;
}

std::vector<Cell> sweep_cells(const ExperimentConfig& config) {
  std::vector<Cell> cells;
  const auto& sw = config.sweep;
  char buf[64];
  for (int k_experts : sw.expert_counts) {
    for (int k : sw.top_k) {
      if (k > k_experts) continue;
      for (auto seed : sw.naive_seeds) {
        ExperimentConfig c = config;
        c.model.k_init = k_experts;
        c.model.k_max = std::max(c.model.k_max, k_experts);
        c.train.mode = Mode::naive;
        c.train.naive_k = k;
        c.train.seed = seed;
        c.train.save_checkpoint = sw.save_checkpoints;
        std::snprintf(buf, sizeof buf, "naive_K%02d_k%d_s%llu", k_experts, k, static_cast<unsigned long long>(seed));
        cells.push_back({buf, c});
      }
    }
  }
  for (double p : sw.top_p) {
    for (auto seed : sw.mass_seeds) {
      ExperimentConfig c = config;
      c.model.top_p = p;
      c.train.mode = Mode::mass;
      c.train.seed = seed;
      c.train.save_checkpoint = sw.save_checkpoints;
      std::snprintf(buf, sizeof buf, "mass_p%g_s%llu", p, static_cast<unsigned long long>(seed));
      cells.push_back({buf, c});
    }
  }
  for (const auto& c : cells) c.config.validate();
  return cells;
}

SweepReport run_sweep(const ExperimentConfig& config, const fs::path& dir, int jobs, bool force, std::ostream& log) {
  if (jobs < 1) throw UsageError("--jobs must be >= 1");
  const auto cells = sweep_cells(config);
  const json manifest{{"config", to_json(config)}, {"cells", [&] {
                         json names = json::array();
                         for (const auto& c : cells) names.push_back(c.name);
                         return names;
                       }()}};

  if (fs::exists(dir) && !fs::is_empty(dir)) {
    const fs::path mpath = dir / kManifestFile;
    const bool ours = fs::exists(mpath) && load_json(mpath).value("config", json()) == manifest.at("config");
    if (!ours) {
      if (!force) {
        throw UsageError(dir.string() + ": directory is not empty and holds a different sweep (use --force to replace it)");
      }
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
  io::write_atomic(dir / kManifestFile, manifest.dump(2) + "\n");

  const hmm::HmmDataset data = generate_data(config);
  if (!fs::exists(dir / kDatasetFile)) write_dataset_dir(config, data, dir);

  SweepReport report;
  std::vector<const Cell*> todo;
  for (const auto& c : cells) {
    const fs::path cdir = dir / c.name;
    if (run_completed(cdir) && load_json(cdir / kConfigFile) == to_json(c.config)) {
      ++report.skipped;
      continue;
    }
    todo.push_back(&c);
  }
  report.trained = static_cast<int>(todo.size());
  log << "sweep: " << cells.size() << " cells, " << report.skipped << " already complete, " << todo.size()
      << " to train\n";

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::vector<std::string> failures;
  const auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const Cell& c = *todo[i];
      const fs::path cdir = dir / c.name;
      try {
        fs::remove_all(cdir);
        const json s = train_run(c.config, data, cdir);
        std::lock_guard lock(mu);
        log << "  " << c.name << ": test_loss " << s.at("test_loss").get<double>() << ", K " << s.at("K").get<int>()
            << '\n';
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        failures.push_back(c.name + ": " + e.what());
        log << "  " << c.name << ": FAILED " << e.what() << '\n';
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int n = std::min<int>(jobs, static_cast<int>(std::max<std::size_t>(todo.size(), 1)));
    for (int j = 0; j < n; ++j) pool.emplace_back(worker);
  }
  if (!failures.empty()) {
    throw std::runtime_error(std::to_string(failures.size()) + " sweep cell(s) failed; first: " + failures.front());
  }
  return report;
}

namespace {

RunSummary summarize_run(const fs::path& dir) {
  const json s = load_json(dir / kSummaryFile);
  RunSummary r;
  r.name = dir.filename().string();
  r.mode = s.at("mode");
  r.k_experts = s.at("K");
  if (s.contains("k")) r.top_k = s.at("k").get<int>();
  if (s.contains("p")) r.top_p = s.at("p").get<double>();
  r.seed = s.at("seed");
  r.test_loss = s.at("test_loss");
  r.mean_k_star = s.at("mean_k_star");
  const fs::path rpath = dir / kRoutingFile;
  if (fs::exists(rpath)) {
    const auto records = io::parse_routing_csv(io::read_file(rpath));
    if (!records.empty()) {
      double k = 0.0;
      for (const auto& rec : records) k += rec.k_star;
      r.mean_k_star = k / static_cast<double>(records.size());
      const auto tables = routing_by_semantics(records);
      if (tables.entity.distributions.size() >= 2) r.entity_jsd = pairwise_jsd_summary(tables.entity);
      if (tables.property.distributions.size() >= 2) r.property_jsd = pairwise_jsd_summary(tables.property);
    }
  }
  return r;
}

json optional_num(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json run_json(const RunSummary& r) {
  return json{{"run", r.name},
              {"mode", r.mode},
              {"K", r.k_experts},
              {"k", r.top_k ? json(*r.top_k) : json(nullptr)},
              {"p", optional_num(r.top_p)},
              {"seed", r.seed},
              {"test_loss", r.test_loss},
              {"mean_k_star", r.mean_k_star},
              {"jsd_entity", r.entity_jsd ? json(r.entity_jsd->mean) : json(nullptr)},
              {"jsd_property", r.property_jsd ? json(r.property_jsd->mean) : json(nullptr)}};
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

AnalysisReport analyze_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError(dir.string() + ": not a directory");
  std::vector<fs::path> run_dirs;
  if (run_completed(dir)) run_dirs.push_back(dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && run_completed(entry.path())) run_dirs.push_back(entry.path());
  }
  if (run_dirs.empty()) throw UsageError(dir.string() + ": no completed runs found");
  std::sort(run_dirs.begin(), run_dirs.end());

  AnalysisReport out;
  for (const auto& d : run_dirs) out.runs.push_back(summarize_run(d));

  std::vector<RunRecord> naive, all;
  for (const auto& r : out.runs) {
    all.push_back({r.name, r.k_experts, r.test_loss});
    if (r.mode == "naive") naive.push_back(all.back());
  }
  const auto& frontier_runs = naive.empty() ? all : naive;
  out.frontier = build_frontier(frontier_runs, false);

  json runs = json::array();
  for (const auto& r : out.runs) runs.push_back(run_json(r));
  json frontier = json::array();
  for (const auto& p : out.frontier.points) {
    frontier.push_back({{"K", p.k_experts}, {"best_test_loss", p.best_loss}, {"best_run", p.best_run}, {"runs", p.runs}});
  }

  json mass_stats = nullptr;
  std::vector<double> k, ks, loss, je, jp;
  for (const auto& r : out.runs) {
    if (r.mode != "mass") continue;
    k.push_back(r.k_experts);
    ks.push_back(r.mean_k_star);
    loss.push_back(r.test_loss);
    if (r.entity_jsd) je.push_back(r.entity_jsd->mean);
    if (r.property_jsd) jp.push_back(r.property_jsd->mean);
  }
  if (!k.empty()) {
    mass_stats = {{"runs", k.size()},
                  {"mean_K", mean_of(k)},
                  {"mean_k_star", mean_of(ks)},
                  {"mean_test_loss", mean_of(loss)},
                  {"mean_jsd_entity", je.empty() ? json(nullptr) : json(mean_of(je))},
                  {"mean_jsd_property", jp.empty() ? json(nullptr) : json(mean_of(jp))}};
  }
  json naive_best = nullptr;
  const RunSummary* best = nullptr;
  for (const auto& r : out.runs) {
    if (r.mode == "naive" && (!best || r.test_loss < best->test_loss)) best = &r;
  }
  if (best) naive_best = run_json(*best);

  out.report = {{"runs", runs},
                {"frontier", frontier},
                {"elbow_K", out.frontier.elbow ? json(*out.frontier.elbow) : json(nullptr)},
                {"frontier_source", naive.empty() ? "all" : "naive"},
                {"mass", mass_stats},
                {"naive_best", naive_best}};
  return out;
}

void write_analysis(const AnalysisReport& a, const fs::path& out) {
  fs::create_directories(out);
  io::write_atomic(out / "report.json", a.report.dump(2) + "\n");

  std::ostringstream runs;
  runs << "run,mode,K,k,p,seed,test_loss,mean_k_star,jsd_entity,jsd_property\n";
  for (const auto& r : a.runs) {
    runs << r.name << ',' << r.mode << ',' << r.k_experts << ',' << (r.top_k ? std::to_string(*r.top_k) : "") << ','
         << (r.top_p ? num(*r.top_p) : "") << ',' << r.seed << ',' << num(r.test_loss) << ',' << num(r.mean_k_star)
         << ',' << (r.entity_jsd ? num(r.entity_jsd->mean) : "") << ','
         << (r.property_jsd ? num(r.property_jsd->mean) : "") << '\n';
  }
  io::write_atomic(out / "runs.csv", runs.str());

  std::ostringstream fr;
  fr << "K,best_test_loss,best_run,n_runs,elbow\n";
  for (const auto& p : a.frontier.points) {
    fr << p.k_experts << ',' << num(p.best_loss) << ',' << p.best_run << ',' << p.runs.size() << ','
       << (a.frontier.elbow == p.k_experts ? 1 : 0) << '\n';
  }
  io::write_atomic(out / "frontier.csv", fr.str());

  std::ostringstream jp;
  jp << "run,group,label_a,label_b,jsd\n";
  for (const auto& r : a.runs) {
    for (const auto& [group, s] : {std::pair{"entity", &r.entity_jsd}, std::pair{"property", &r.property_jsd}}) {
      if (!*s) continue;
      for (std::size_t i = 0; i < (*s)->values.size(); ++i) {
        jp << r.name << ',' << group << ',' << (*s)->pairs[i].first << ',' << (*s)->pairs[i].second << ','
           << num((*s)->values[i]) << '\n';
      }
    }
  }
  io::write_atomic(out / "jsd_pairs.csv", jp.str());
}

namespace {

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  if (!fs::exists(path)) throw UsageError(path + ": config file not found");
  return load_config(path);
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Adaptive mixture-of-experts laboratory on synthetic HMM data"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out, data_path, mode, analyze_dir_arg;
  std::optional<std::uint64_t> seed;
  std::optional<long> stop_after;
  int jobs = 1;
  bool force = false, resume = false, quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress warnings");

  auto* gen = app.add_subcommand("generate", "Generate the synthetic dataset");
  gen->add_option("--config", config_path, "Experiment config (JSON)");
  gen->add_option("--seed", seed, "Override data.seed");
  gen->add_option("--out", out, "Output directory (default: output_dir)");

  auto* train = app.add_subcommand("train", "Train one model");
  train->add_option("--config", config_path, "Experiment config (JSON)");
  train->add_option("--mode", mode, "mass or naive")->check(CLI::IsMember({"mass", "naive"}));
  train->add_option("--seed", seed, "Override train.seed");
  train->add_option("--out", out, "Run directory (default: <output_dir>/<mode>_s<seed>)");
  train->add_option("--data", data_path, "Dataset file (default: <output_dir>/dataset.json)");
  train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");
  train->add_option("--stop-after", stop_after, "Checkpoint and stop after this step");

  auto* sweep = app.add_subcommand("sweep", "Train the naive K x k grid and the mass seeds");
  sweep->add_option("--config", config_path, "Experiment config (JSON)");
  sweep->add_option("--out", out, "Sweep directory (default: output_dir)");
  sweep->add_option("--jobs", jobs, "Concurrent cells")->check(CLI::PositiveNumber);
  sweep->add_flag("--force", force, "Replace a non-empty directory holding a different sweep");

  auto* analyze = app.add_subcommand("analyze", "Frontier, elbow and JSD report for completed runs");
  analyze->add_option("dir", analyze_dir_arg, "Run or sweep directory")->required();
  analyze->add_option("--out", out, "Report directory (default: <dir>/analysis)");

  auto* print_cfg = app.add_subcommand("print-default-config", "Print the default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  log::set_quiet(quiet);

  try {
    if (print_cfg->parsed()) {
      std::cout << to_json(ExperimentConfig{}).dump(2) << '\n';
      return kExitOk;
    }
    if (gen->parsed()) {
      ExperimentConfig cfg = config_or_default(config_path);
      if (seed) cfg.data.seed = *seed;
      cfg.validate();
      const fs::path dir = out.empty() ? fs::path(cfg.output_dir) : fs::path(out);
      const auto data = generate_data(cfg);
      write_dataset_dir(cfg, data, dir);
      std::cout << "T=" << data.tokens.size() << " n=" << data.n << " t'=" << data.t_prime << '\n'
                << "wrote " << (dir / kDatasetFile).string() << '\n';
      return kExitOk;
    }
    if (train->parsed()) {
      ExperimentConfig cfg = config_or_default(config_path);
      if (!mode.empty()) cfg.train.mode = parse_mode(mode);
      if (seed) cfg.train.seed = *seed;
      cfg.validate();
      const fs::path dpath = data_path.empty() ? fs::path(cfg.output_dir) / kDatasetFile : fs::path(data_path);
      if (!fs::exists(dpath)) throw UsageError(dpath.string() + ": dataset not found (run `mass generate` first)");
      const auto data = io::load_dataset(dpath);
      const fs::path dir =
          out.empty() ? fs::path(cfg.output_dir) / (to_string(cfg.train.mode) + "_s" + std::to_string(cfg.train.seed))
                      : fs::path(out);
      const json s = train_run(cfg, data, dir, RunOptions{resume, stop_after});
      std::cout << s.dump() << '\n';
      return kExitOk;
    }
    if (sweep->parsed()) {
      ExperimentConfig cfg = config_or_default(config_path);
      const fs::path dir = out.empty() ? fs::path(cfg.output_dir) : fs::path(out);
      const auto r = run_sweep(cfg, dir, jobs, force, std::cout);
      std::cout << "trained " << r.trained << ", skipped " << r.skipped << '\n';
      return kExitOk;
    }
    if (analyze->parsed()) {
      const fs::path dir(analyze_dir_arg);
      const auto report = analyze_dir(dir);
      const fs::path dest = out.empty() ? dir / "analysis" : fs::path(out);
      write_analysis(report, dest);
      std::cout << "runs " << report.runs.size() << ", elbow K "
                << (report.frontier.elbow ? std::to_string(*report.frontier.elbow) : "none") << '\n'
                << "wrote " << dest.string() << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n' << e.diagnostic.dump() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mass::cli
