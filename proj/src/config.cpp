// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/config.hpp"

#include <fstream>
#include <functional>
#include <set>

namespace mass {

using nlohmann::json;

std::string to_string(Mode m) { return m == Mode::mass ? "mass" : "naive"; }

Mode parse_mode(const std::string& s) {
  if (s == "mass") return Mode::mass;
  if (s == "naive") return Mode::naive;
  throw ConfigError("mode: expected 'mass' or 'naive', got '" + s + "'");
}

void ExperimentConfig::validate() const {
  const auto& t = train;
  if (data.n < 1) throw ConfigError("data.n: must be >= 1");
  if (data.t_prime < 2) throw ConfigError("data.t_prime: must be >= 2 so every input span is non-empty");
  if (t.total_steps < 1) throw ConfigError("train.total_steps: must be >= 1");
  if (t.batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (!(t.learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be > 0");
  if (t.optimizer != "adam") throw ConfigError("train.optimizer: only 'adam' is supported");
  if (t.lambda_red < 0.0) throw ConfigError("train.lambda_red: must be >= 0");
  if (t.eval_every < 1) throw ConfigError("train.eval_every: must be >= 1");
  if (t.routing_examples < 0) throw ConfigError("train.routing_examples: must be >= 0");
  if (t.eval_batch_size < 1) throw ConfigError("train.eval_batch_size: must be >= 1");
  if (!(t.test_fraction > 0.0 && t.test_fraction < 1.0)) throw ConfigError("train.test_fraction: must lie in (0, 1)");
  if (t.mode == Mode::naive && (t.naive_k < 1 || t.naive_k > model.k_init)) {
    throw ConfigError("train.naive_k: must lie in [1, model.k_init]");
  }
  t.expansion.validate();
  resolved_model().validate();
}

ModelConfig ExperimentConfig::resolved_model() const {
  ModelConfig m = model;
  m.vocab_size = data.world.vocab_size;
  m.max_seq_len = std::max(m.max_seq_len, data.t_prime);
  m.seed = train.seed;
  return m;
}

json to_json(const ExperimentConfig& c) {
  const auto& w = c.data.world;
  const auto& t = c.train;
  const auto& e = t.expansion;
  return json{
      {"data",
       {{"world",
         {{"num_entities", w.num_entities},
          {"num_properties", w.num_properties},
          {"vocab_size", w.vocab_size},
          {"num_concepts", w.num_concepts},
          {"entity_stay_prob", w.entity_stay_prob}}},
        {"n", c.data.n},
        {"t_prime", c.data.t_prime},
        {"seed", c.data.seed}}},
      {"model",
       {{"d_model", c.model.d_model},
        {"n_heads", c.model.n_heads},
        {"max_seq_len", c.model.max_seq_len},
        {"k_init", c.model.k_init},
        {"k_max", c.model.k_max},
        {"top_p", c.model.top_p}}},
      {"train",
       {{"total_steps", t.total_steps},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"optimizer", t.optimizer},
        {"lambda_red", t.lambda_red},
        {"mode", to_string(t.mode)},
        {"naive_k", t.naive_k},
        {"seed", t.seed},
        {"eval_every", t.eval_every},
        {"eval_batch_size", t.eval_batch_size},
        {"test_fraction", t.test_fraction},
        {"save_checkpoint", t.save_checkpoint},
        {"routing_examples", t.routing_examples},
        {"expansion",
         {{"window", e.cpd.window},
          {"warmup", e.cpd.warmup},
          {"alpha", e.cpd.alpha},
          {"delta", e.delta},
          {"patience", e.patience},
          {"phase_fraction", e.phase_fraction}}}}},
      {"sweep",
       {{"expert_counts", c.sweep.expert_counts},
        {"top_k", c.sweep.top_k},
        {"naive_seeds", c.sweep.naive_seeds},
        {"mass_seeds", c.sweep.mass_seeds},
        {"top_p", c.sweep.top_p},
        {"save_checkpoints", c.sweep.save_checkpoints}}},
      {"output_dir", c.output_dir},
  };
}

namespace {

/// Walks one JSON object, consuming known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  /// Rejects any key that no get()/sub() call consumed.
  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError(where(k) + ": unknown field");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (!it->is_number_unsigned() && it->template get<long long>() < 0) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where(key) + ": expected " + type_name<T>() + ", got " + it->dump());
    }
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array()) throw ConfigError(where(key) + ": expected a list");
    std::vector<T> v;
    for (std::size_t i = 0; i < it->size(); ++i) {
      const json& e = (*it)[i];
      const bool ok = std::is_floating_point_v<T> ? e.is_number()
                      : std::is_unsigned_v<T>     ? e.is_number_integer() && (e.is_number_unsigned() || e.get<long long>() >= 0)
                                                  : e.is_number_integer();
      if (!ok) throw ConfigError(where(key) + "[" + std::to_string(i) + "]: expected " + type_name<T>());
      v.push_back(e.get<T>());
    }
    out = std::move(v);
  }

  void sub(const std::string& key, const std::function<void(Section&)>& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    Section s(*it, where(key));
    fn(s);
    s.finish();
  }

 private:
  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else return "a string";
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  {
    Section root(j, "");
    root.sub("data", [&](Section& d) {
      d.sub("world", [&](Section& w) {
        w.get("num_entities", c.data.world.num_entities);
        w.get("num_properties", c.data.world.num_properties);
        w.get("vocab_size", c.data.world.vocab_size);
        w.get("num_concepts", c.data.world.num_concepts);
        w.get("entity_stay_prob", c.data.world.entity_stay_prob);
      });
      d.get("n", c.data.n);
      d.get("t_prime", c.data.t_prime);
      d.get("seed", c.data.seed);
    });
    root.sub("model", [&](Section& m) {
      m.get("d_model", c.model.d_model);
      m.get("n_heads", c.model.n_heads);
      m.get("max_seq_len", c.model.max_seq_len);
      m.get("k_init", c.model.k_init);
      m.get("k_max", c.model.k_max);
      m.get("top_p", c.model.top_p);
    });
    root.sub("train", [&](Section& t) {
      auto& tr = c.train;
      t.get("total_steps", tr.total_steps);
      t.get("batch_size", tr.batch_size);
      t.get("learning_rate", tr.learning_rate);
      t.get("optimizer", tr.optimizer);
      t.get("lambda_red", tr.lambda_red);
      std::string mode = to_string(tr.mode);
      t.get("mode", mode);
      try {
        tr.mode = parse_mode(mode);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("train.") + e.what());
      }
      t.get("naive_k", tr.naive_k);
      t.get("seed", tr.seed);
      t.get("eval_every", tr.eval_every);
      t.get("eval_batch_size", tr.eval_batch_size);
      t.get("test_fraction", tr.test_fraction);
      t.get("save_checkpoint", tr.save_checkpoint);
      t.get("routing_examples", tr.routing_examples);
      t.sub("expansion", [&](Section& e) {
        e.get("window", tr.expansion.cpd.window);
        e.get("warmup", tr.expansion.cpd.warmup);
        e.get("alpha", tr.expansion.cpd.alpha);
        e.get("delta", tr.expansion.delta);
        e.get("patience", tr.expansion.patience);
        e.get("phase_fraction", tr.expansion.phase_fraction);
      });
    });
    root.sub("sweep", [&](Section& s) {
      s.get_list("expert_counts", c.sweep.expert_counts);
      s.get_list("top_k", c.sweep.top_k);
      s.get_list("naive_seeds", c.sweep.naive_seeds);
      s.get_list("mass_seeds", c.sweep.mass_seeds);
      s.get_list("top_p", c.sweep.top_p);
      s.get("save_checkpoints", c.sweep.save_checkpoints);
    });
    root.get("output_dir", c.output_dir);
    root.finish();
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace mass
