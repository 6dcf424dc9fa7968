// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/trainer.hpp"

#include "mass/log.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mass {

using nlohmann::json;

namespace {

constexpr std::size_t kEvalChunk = 256;

void check_data(const hmm::HmmDataset& data) {
  if (data.examples.empty()) throw ContractError("trainer: dataset has no examples");
  if (data.examples.front().length < 1) throw ContractError("trainer: examples need a non-empty input span");
}

}  // namespace

DataSplit split_examples(const hmm::HmmDataset& data, double test_fraction, int eval_batch_size, std::uint64_t seed) {
  const std::size_t n = data.examples.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 20));
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::size_t n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n) - 1e-9));
  n_test = std::clamp<std::size_t>(n_test, 1, n > 1 ? n - 1 : 1);
  DataSplit s;
  const auto at = [&](std::size_t i) { return perm.begin() + static_cast<std::ptrdiff_t>(i); };
  s.test.assign(perm.begin(), at(n_test));
  // The validation batch comes out of the remainder only when enough is left to train on.
  const std::size_t rest = n - n_test;
  const auto want = static_cast<std::size_t>(eval_batch_size);
  const std::size_t n_eval = rest > 2 * want ? want : 0;
  s.eval.assign(at(n_test), at(n_test + n_eval));
  s.train.assign(at(n_test + n_eval), perm.end());
  if (s.train.empty()) s.train = s.test;
  if (s.eval.empty()) s.eval.assign(s.train.begin(), s.train.begin() + static_cast<std::ptrdiff_t>(std::min(want, s.train.size())));
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

Batch make_batch(const hmm::HmmDataset& data, std::span<const std::size_t> example_indices) {
  Batch b;
  if (example_indices.empty()) return b;
  b.seq_len = static_cast<int>(data.examples.at(example_indices.front()).length);
  b.tokens.reserve(example_indices.size() * static_cast<std::size_t>(b.seq_len));
  for (std::size_t idx : example_indices) {
    const auto& ex = data.examples.at(idx);
    if (static_cast<int>(ex.length) != b.seq_len) throw ShapeError("make_batch: ragged example lengths");
    b.tokens.insert(b.tokens.end(), data.tokens.begin() + static_cast<std::ptrdiff_t>(ex.start),
                    data.tokens.begin() + static_cast<std::ptrdiff_t>(ex.start + ex.length));
    b.targets.push_back(ex.target);
  }
  return b;
}

double dataset_loss(const ModelState& model, const hmm::HmmDataset& data, std::span<const std::size_t> examples,
                    const ForwardOptions& opts) {
  if (examples.empty()) throw ContractError("dataset_loss: no examples");
  double total = 0.0;
  for (std::size_t off = 0; off < examples.size(); off += kEvalChunk) {
    const auto chunk = examples.subspan(off, std::min(kEvalChunk, examples.size() - off));
    total += batch_loss(model, make_batch(data, chunk), opts) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(examples.size());
}

std::vector<RoutingRecord> routing_log(const ModelState& model, const hmm::HmmDataset& data,
                                       std::span<const std::size_t> examples, const RoutingRule& rule) {
  std::vector<RoutingRecord> out;
  ForwardOptions opts;
  opts.rule = rule;
  opts.last_position_only = false;
  for (std::size_t off = 0; off < examples.size(); off += kEvalChunk) {
    const auto chunk = examples.subspan(off, std::min(kEvalChunk, examples.size() - off));
    const Batch b = make_batch(data, chunk);
    Graph g = build_forward(model, b.tokens, b.seq_len, opts, false);
    for (std::size_t i = 0; i < g.routing.size(); ++i) {
      const std::size_t seq = i / static_cast<std::size_t>(b.seq_len);
      const int pos = static_cast<int>(i % static_cast<std::size_t>(b.seq_len));
      const std::size_t ex_idx = chunk[seq];
      const std::size_t t = data.examples[ex_idx].start + static_cast<std::size_t>(pos);
      RoutingRecord r;
      r.example = static_cast<int>(ex_idx);
      r.position = pos;
      r.token = data.tokens[t];
      r.entity = data.labels[t].entity;
      r.property = data.labels[t].property;
      r.concept_id = data.labels[t].concept_id;
      r.k_star = g.routing[i].k_star;
      r.scores = std::move(g.routing[i].scores);
      out.push_back(std::move(r));
    }
  }
  return out;
}

Trainer::Trainer(const ExperimentConfig& config, const hmm::HmmDataset& data) : data_(data) {
  config.validate();
  check_data(data);
  if (data.world.vocab_size() != config.data.world.vocab_size) {
    throw ConfigError("data.world.vocab_size: does not match the dataset");
  }
  state_.config = config;
  state_.model = init_model(config.resolved_model());
  state_.optimizer = Adam(AdamConfig{config.train.learning_rate});
  state_.monitor = CpdMonitor(config.train.expansion.cpd);
  state_.ledger = ExpansionLedger::start(config.train.expansion, config.train.total_steps);
  split_ = split_examples(data, config.train.test_fraction, config.train.eval_batch_size, config.train.seed);
  rng_ = Rng(derive_seed(config.train.seed, 30));
}

Trainer::Trainer(TrainerState state, const hmm::HmmDataset& data) : state_(std::move(state)), data_(data) {
  check_data(data);
  const auto& c = state_.config;
  split_ = split_examples(data, c.train.test_fraction, c.train.eval_batch_size, c.train.seed);
  rng_.restore(state_.rng_state);
}

TrainerState Trainer::snapshot() const {
  TrainerState s = state_;
  s.rng_state = rng_.state();
  return s;
}

RoutingRule Trainer::rule() const {
  if (state_.config.train.mode == Mode::naive) return TopK{state_.config.train.naive_k};
  return TopP{state_.config.model.top_p};
}

ForwardOptions Trainer::forward_options() const {
  ForwardOptions o;
  o.rule = rule();
  return o;
}

void Trainer::run(long until_step, const MetricsSink& sink) {
  const long end = std::min(until_step, state_.config.train.total_steps);
  while (state_.step < end) step(sink);
}

void Trainer::step(const MetricsSink& sink) {
  auto& st = state_;
  const auto& cfg = st.config.train;
  if (finished()) throw ContractError("Trainer::step: run already finished");
  const long t = ++st.step;
  const bool mass_mode = cfg.mode == Mode::mass;
  const bool in_phase = mass_mode && t <= st.ledger.phase_end_step;

  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
  for (auto& i : idx) i = split_.train[rng_.index(split_.train.size())];
  const Batch batch = make_batch(data_, idx);

  const double lambda = in_phase ? cfg.lambda_red : 0.0;
  GradientResult gr = compute_gradients(st.model, batch, forward_options(), lambda);

  if (!std::isfinite(gr.objective)) {
    json diag{{"type", "abort"}, {"step", t}, {"reason", "non-finite loss"}, {"loss", gr.task_loss},
              {"K", st.model.pool.size()}};
    if (sink) sink(diag);
    throw TrainingDiverged("training diverged at step " + std::to_string(t), diag);
  }

  json grad_norms = json::object();
  for (const auto& e : st.model.pool.experts()) {
    grad_norms[std::to_string(e.id)] = gr.grads.at(expert_weight_name(e.id)).norm();
  }
  double mean_k = 0.0;
  for (const auto& d : gr.routing) mean_k += d.k_star;
  mean_k /= static_cast<double>(gr.routing.size());

  std::vector<std::pair<ExpertId, double>> p_values;
  std::set<std::string> skip;
  if (mass_mode) expansion_step(gr, p_values, skip, sink);

  st.optimizer.step(parameters(st.model), gr.grads, skip);

  json rec{{"type", "step"},
           {"step", t},
           {"loss", gr.task_loss},
           {"objective", gr.objective},
           {"l_red", redundancy_loss(st.model.pool)},
           {"l_red_active", in_phase},
           {"K", st.model.pool.size()},
           {"mean_k", mean_k},
           {"grad_norms", std::move(grad_norms)}};
  if (mass_mode) {
    json pv = json::object();
    for (const auto& [id, p] : p_values) pv[std::to_string(id)] = p;
    rec["p_values"] = std::move(pv);
  }
  if (sink) sink(rec);

  if (t % cfg.eval_every == 0 || t == cfg.total_steps) {
    if (sink) sink(json{{"type", "eval"}, {"step", t}, {"test_loss", test_loss()}, {"K", st.model.pool.size()}});
  }
}

void Trainer::expansion_step(const GradientResult& gr, std::vector<std::pair<ExpertId, double>>& p_values,
                             std::set<std::string>& skip, const MetricsSink& sink) {
  auto& st = state_;
  const auto& cfg = st.config.train;
  const long t = st.step;
  if (!st.ledger.active(t)) return;

  std::vector<ExpertSignal> signals;
  for (const auto& e : st.model.pool.experts()) {
    ExpertSignal s;
    s.id = e.id;
    s.weight_grad = &gr.grads.at(expert_weight_name(e.id));
    s.gate_grad = &gr.grads.at(expert_gate_name(e.id));
    if (auto stat = st.monitor.observe(e.id, s.weight_grad->norm())) {
      s.p_value = stat->p_value;
      p_values.emplace_back(e.id, stat->p_value);
    }
    signals.push_back(s);
  }

  const auto ev = maybe_expand(st.model.pool, st.monitor, st.ledger, cfg.expansion, t, signals, cfg.learning_rate);
  if (!ev) return;

  for (const auto& name : {expert_weight_name(ev->parent), expert_gate_name(ev->parent)}) skip.insert(name);
  st.optimizer.copy_state(expert_weight_name(ev->parent), expert_weight_name(ev->child));
  st.optimizer.copy_state(expert_gate_name(ev->parent), expert_gate_name(ev->child));
  if (sink) {
    sink(json{{"type", "expansion"},
              {"step", ev->step},
              {"parent", ev->parent},
              {"child", ev->child},
              {"p_value", ev->p_value},
              {"cosine", ev->cosine},
              {"grad_norm", ev->grad_norm},
              {"K", st.model.pool.size()}});
  }

  const auto eval_batch = make_batch(data_, split_.eval);
  const MaskedLossFn loss = [&](std::optional<ExpertId> disabled) {
    ForwardOptions o = forward_options();
    o.disabled = disabled;
    return batch_loss(st.model, eval_batch, o);
  };
  const auto check = nll_stopping_check(st.model.pool, st.ledger, t, ev->child, loss);
  if (check) {
    if (!check->retained) {
      st.optimizer.erase(expert_weight_name(check->candidate));
      st.optimizer.erase(expert_gate_name(check->candidate));
      st.monitor.erase(check->candidate);
    }
    if (sink) {
      sink(json{{"type", "nll_check"},
                {"step", check->step},
                {"candidate", check->candidate},
                {"loss_masked", check->loss_masked},
                {"loss_original", check->loss_original},
                {"loss_gap", check->loss_gap},
                {"retained", check->retained},
                {"patience", check->patience_after},
                {"stopped", check->stopped_after},
                {"K", st.model.pool.size()}});
    }
  }
}

double Trainer::test_loss() const { return dataset_loss(state_.model, data_, split_.test, forward_options()); }

std::vector<RoutingRecord> Trainer::test_routing() const {
  std::span<const std::size_t> ex(split_.test);
  const auto cap = static_cast<std::size_t>(state_.config.train.routing_examples);
  if (cap > 0 && cap < ex.size()) ex = ex.first(cap);
  return routing_log(state_.model, data_, ex, rule());
}

json Trainer::final_summary(const std::vector<RoutingRecord>& routing) const {
  double mean_k = 0.0;
  for (const auto& r : routing) mean_k += r.k_star;
  if (!routing.empty()) mean_k /= static_cast<double>(routing.size());
  json ids = json::array();
  for (const auto& e : state_.model.pool.experts()) ids.push_back(e.id);
  const auto& c = state_.config;
  json out{{"type", "final"},
           {"mode", to_string(c.train.mode)},
           {"seed", c.train.seed},
           {"step", state_.step},
           {"test_loss", test_loss()},
           {"K", state_.model.pool.size()},
           {"K_init", c.model.k_init},
           {"mean_k_star", mean_k},
           {"expert_ids", ids},
           {"expansions", state_.ledger.events.size()},
           {"stopped", state_.ledger.stopped}};
  if (c.train.mode == Mode::naive) {
    out["k"] = c.train.naive_k;
  } else {
    out["p"] = c.model.top_p;
  }
  return out;
}

}  // namespace mass
