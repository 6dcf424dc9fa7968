// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mass {

void ModelConfig::validate() const {
  if (d_model < 1) throw ConfigError("model.d_model: must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) throw ConfigError("model.n_heads: must divide d_model");
  if (vocab_size < 2) throw ConfigError("model.vocab_size: must be >= 2");
  if (max_seq_len < 1) throw ConfigError("model.max_seq_len: must be >= 1");
  if (k_init < 1) throw ConfigError("model.k_init: must be >= 1");
  if (k_init > k_max) throw ConfigError("model.k_init: must not exceed model.k_max");
  if (!(top_p > 0.0 && top_p < 1.0)) throw ConfigError("model.top_p: must lie in (0, 1)");
}

Matrix sinusoidal_encoding(int max_len, int d_model) {
  Matrix pe(max_len, d_model);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
      pe(pos, i) = std::sin(pos * freq);
      if (i + 1 < d_model) pe(pos, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

ModelState init_model(const ModelConfig& config) {
  config.validate();
  ModelState s;
  s.config = config;
  const int d = config.d_model;
  Rng rng(derive_seed(config.seed, 10));
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  s.embedding = random_normal<Real>(config.vocab_size, d, 1.0, rng);
  s.positional = sinusoidal_encoding(config.max_seq_len, d);
  s.wq = random_normal<Real>(d, d, std_d, rng);
  s.wk = random_normal<Real>(d, d, std_d, rng);
  s.wv = random_normal<Real>(d, d, std_d, rng);
  s.wo = random_normal<Real>(d, d, std_d, rng);
  s.bq = Matrix::Zero(1, d);
  s.bk = Matrix::Zero(1, d);
  s.bv = Matrix::Zero(1, d);
  s.bo = Matrix::Zero(1, d);
  s.ln1_gain = Matrix::Ones(1, d);
  s.ln1_bias = Matrix::Zero(1, d);
  s.ln2_gain = Matrix::Ones(1, d);
  s.ln2_bias = Matrix::Zero(1, d);
  s.pool = MoePool::initialize(d, config.k_init, config.k_max, rng);
  // Small head keeps the untrained predictive distribution close to uniform.
  s.decoder = random_normal<Real>(d, config.vocab_size, 0.02, rng);
  s.decoder_bias = Matrix::Zero(1, config.vocab_size);
  return s;
}

std::string expert_weight_name(ExpertId id) { return "expert." + std::to_string(id) + ".weight"; }
std::string expert_gate_name(ExpertId id) { return "expert." + std::to_string(id) + ".gate"; }

namespace {

template <typename State, typename Out>
void collect(State& s, Out& out) {
  out.push_back({"embedding", &s.embedding});
  out.push_back({"attn.wq", &s.wq});
  out.push_back({"attn.wk", &s.wk});
  out.push_back({"attn.wv", &s.wv});
  out.push_back({"attn.wo", &s.wo});
  out.push_back({"attn.bq", &s.bq});
  out.push_back({"attn.bk", &s.bk});
  out.push_back({"attn.bv", &s.bv});
  out.push_back({"attn.bo", &s.bo});
  out.push_back({"ln1.gain", &s.ln1_gain});
  out.push_back({"ln1.bias", &s.ln1_bias});
  out.push_back({"ln2.gain", &s.ln2_gain});
  out.push_back({"ln2.bias", &s.ln2_bias});
  for (int k = 0; k < s.pool.size(); ++k) {
    auto& e = s.pool.at(k);
    out.push_back({expert_weight_name(e.id), &e.weight});
    out.push_back({expert_gate_name(e.id), &e.gate});
  }
  out.push_back({"decoder.weight", &s.decoder});
  out.push_back({"decoder.bias", &s.decoder_bias});
}

}  // namespace

std::vector<ParamRef> parameters(ModelState& state) {
  std::vector<ParamRef> out;
  collect(state, out);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> parameters(const ModelState& state) {
  std::vector<std::pair<std::string, const Matrix*>> out;
  collect(state, out);
  return out;
}

Graph build_forward(const ModelState& state, std::span<const int> tokens, int seq_len, const ForwardOptions& opts,
                    bool trainable) {
  using Var = RealTape::Var;
  const auto& cfg = state.config;
  if (seq_len < 1 || tokens.empty() || tokens.size() % static_cast<std::size_t>(seq_len) != 0) {
    throw ShapeError("build_forward: token count not a positive multiple of seq_len");
  }
  if (seq_len > cfg.max_seq_len) throw ShapeError("build_forward: sequence longer than max_seq_len");
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("build_forward: token id " + std::to_string(t));
  }
  if (state.pool.empty()) throw ContractError("build_forward: empty expert pool");

  Graph g;
  RealTape& tp = g.tape;
  std::map<std::string, Var> p;
  for (const auto& [name, m] : parameters(state)) {
    const Var v = trainable ? tp.parameter(*m) : tp.constant(*m);
    g.params.emplace_back(name, v);
    p.emplace(name, v);
  }

  const int n = static_cast<int>(tokens.size());
  const int n_seq = n / seq_len;
  Matrix pos(n, cfg.d_model);
  for (int s = 0; s < n_seq; ++s) pos.middleRows(s * seq_len, seq_len) = state.positional.topRows(seq_len);

  const Var x0 = tp.add(tp.rows(p.at("embedding"), tokens), tp.constant(std::move(pos)));
  const Var q = tp.add_row(tp.matmul(x0, p.at("attn.wq")), p.at("attn.bq"));
  const Var k = tp.add_row(tp.matmul(x0, p.at("attn.wk")), p.at("attn.bk"));
  const Var v = tp.add_row(tp.matmul(x0, p.at("attn.wv")), p.at("attn.bv"));
  const Var att = tp.causal_attention(q, k, v, seq_len, cfg.n_heads);
  const Var o = tp.add_row(tp.matmul(att, p.at("attn.wo")), p.at("attn.bo"));
  Var h1 = tp.layer_norm(tp.add(x0, o), p.at("ln1.gain"), p.at("ln1.bias"));

  if (opts.last_position_only) {
    for (int s = 0; s < n_seq; ++s) g.rows.push_back(s * seq_len + seq_len - 1);
    h1 = tp.rows(h1, g.rows);
  } else {
    for (int i = 0; i < n; ++i) g.rows.push_back(i);
  }
  const int m = static_cast<int>(g.rows.size());

  // Gating and selection.
  const auto& pool = state.pool;
  const int K = pool.size();
  std::vector<Var> gate_cols;
  for (const auto& e : pool.experts()) gate_cols.push_back(p.at(expert_gate_name(e.id)));
  const Var logits_r = tp.matmul(h1, tp.hconcat(gate_cols));
  const Var r = tp.softmax_rows(logits_r);

  const std::optional<int> disabled_at = opts.disabled ? pool.position_of(*opts.disabled) : std::nullopt;
  if (opts.disabled && !disabled_at) throw ContractError("build_forward: disabled expert not in pool");
  const int disabled_pos = disabled_at.value_or(-1);

  Matrix mask = Matrix::Zero(m, K);
  std::vector<std::vector<int>> rows_for(static_cast<std::size_t>(K));
  g.routing.reserve(static_cast<std::size_t>(m));
  const Matrix& rv = tp.value(r);
  std::vector<double> sel_scores(static_cast<std::size_t>(K));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < K; ++j) sel_scores[static_cast<std::size_t>(j)] = rv(i, j);
    if (disabled_pos >= 0) sel_scores[static_cast<std::size_t>(disabled_pos)] = 0.0;
    RoutingDecision dec = route(sel_scores, opts.rule);
    for (int j : dec.selected) {
      if (j == disabled_pos) continue;
      mask(i, j) = 1.0;
      rows_for[static_cast<std::size_t>(j)].push_back(i);
    }
    dec.scores.assign(rv.row(i).data(), rv.row(i).data() + K);
    g.routing.push_back(std::move(dec));
  }
  const Var mix = tp.hadamard(r, tp.constant(std::move(mask)));

  // Sparse expert evaluation: each expert only sees the rows routed to it.
  std::optional<Var> y;
  for (int j = 0; j < K; ++j) {
    const auto& sel = rows_for[static_cast<std::size_t>(j)];
    if (sel.empty()) continue;
    const Var xin = tp.rows(h1, sel);
    const Var act = tp.silu(tp.matmul(xin, p.at(expert_weight_name(pool.at(j).id))));
    const Var weighted = tp.scale_rows(act, tp.rows(tp.column(mix, j), sel));
    const Var part = tp.scatter_rows(weighted, sel, m);
    y = y ? tp.add(*y, part) : part;
  }
  if (!y) y = tp.constant(Matrix::Zero(m, cfg.d_model));

  const Var h2 = tp.layer_norm(tp.add(h1, *y), p.at("ln2.gain"), p.at("ln2.bias"));
  g.logits = tp.add_row(tp.matmul(h2, p.at("decoder.weight")), p.at("decoder.bias"));
  return g;
}

Matrix forward_sequence(const ModelState& state, std::span<const int> tokens, const ForwardOptions& opts,
                        std::vector<RoutingDecision>* routing) {
  ForwardOptions o = opts;
  o.last_position_only = false;
  Graph g = build_forward(state, tokens, static_cast<int>(tokens.size()), o, false);
  if (routing) *routing = std::move(g.routing);
  return g.tape.value(g.logits);
}

namespace {

void check_batch(const Batch& batch) {
  if (batch.seq_len < 1 || batch.tokens.empty()) throw ContractError("batch: empty");
  if (static_cast<int>(batch.targets.size()) != batch.num_sequences()) {
    throw ShapeError("batch: one target per sequence required");
  }
}

}  // namespace

GradientResult compute_gradients(const ModelState& state, const Batch& batch, const ForwardOptions& opts,
                                 double lambda_red) {
  check_batch(batch);
  ForwardOptions o = opts;
  o.last_position_only = true;
  Graph g = build_forward(state, batch.tokens, batch.seq_len, o, true);
  RealTape& tp = g.tape;
  const auto task = tp.cross_entropy(g.logits, batch.targets);

  GradientResult res;
  res.task_loss = tp.scalar(task);
  auto objective = task;
  const auto& pairs = state.pool.duplicated_pairs();
  if (lambda_red != 0.0 && !pairs.empty()) {
    std::map<std::string, RealTape::Var> by_name(g.params.begin(), g.params.end());
    std::optional<RealTape::Var> acc;
    for (const auto& [a, b] : pairs) {
      const auto c2 = tp.cosine_squared(by_name.at(expert_gate_name(a)), by_name.at(expert_gate_name(b)));
      acc = acc ? tp.add(*acc, c2) : c2;
    }
    const auto red = tp.scale(*acc, 1.0 / static_cast<double>(pairs.size()));
    res.redundancy = tp.scalar(red);
    objective = tp.add(task, tp.scale(red, lambda_red));
  }
  res.objective = tp.scalar(objective);
  tp.backward(objective);
  for (const auto& [name, v] : g.params) res.grads.emplace(name, tp.grad(v));
  res.routing = std::move(g.routing);
  return res;
}

double batch_loss(const ModelState& state, const Batch& batch, const ForwardOptions& opts) {
  check_batch(batch);
  ForwardOptions o = opts;
  o.last_position_only = true;
  Graph g = build_forward(state, batch.tokens, batch.seq_len, o, false);
  return cross_entropy(g.tape.value(g.logits), std::span<const int>(batch.targets));
}

}  // namespace mass
