// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/io.hpp"

#include <charconv>
#include <sstream>

namespace mass::io {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw ShapeError("matrix_from_json: " + std::to_string(data.size()) + " values for " + shape_str(rows, cols));
  }
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

json dataset_to_json(const hmm::HmmDataset& data) {
  const auto& w = data.world;
  json concepts = json::array();
  for (const auto& c : data.concepts) {
    concepts.push_back({{"concept_id", c.concept_id}, {"property_transition", matrix_to_json(c.property_transition)}});
  }
  json labels = json::array();
  for (const auto& l : data.labels) labels.push_back({l.entity, l.property, l.concept_id});
  json examples = json::array();
  for (const auto& e : data.examples) examples.push_back({e.start, e.length, e.target});
  return json{{"format", "mass-hmm-dataset"},
              {"version", 1},
              {"world",
               {{"num_entities", w.params.num_entities},
                {"num_properties", w.params.num_properties},
                {"vocab_size", w.params.vocab_size},
                {"num_concepts", w.params.num_concepts},
                {"entity_stay_prob", w.params.entity_stay_prob},
                {"delimiter_token", w.delimiter_token},
                {"memory", w.memory},
                {"initial_entity", w.initial_entity},
                {"initial_property", w.initial_property}}},
              {"concepts", concepts},
              {"seed", data.seed},
              {"n", data.n},
              {"t_prime", data.t_prime},
              {"T", data.tokens.size()},
              {"test_span_start", data.test_span_start},
              {"tokens", data.tokens},
              {"labels", labels},
              {"examples", examples}};
}

hmm::HmmDataset dataset_from_json(const json& j) {
  if (j.value("format", "") != "mass-hmm-dataset") throw std::runtime_error("not a dataset file");
  hmm::HmmDataset d;
  const auto& w = j.at("world");
  d.world.params.num_entities = w.at("num_entities");
  d.world.params.num_properties = w.at("num_properties");
  d.world.params.vocab_size = w.at("vocab_size");
  d.world.params.num_concepts = w.at("num_concepts");
  d.world.params.entity_stay_prob = w.at("entity_stay_prob");
  d.world.delimiter_token = w.at("delimiter_token");
  d.world.memory = w.at("memory").get<std::vector<std::vector<int>>>();
  d.world.initial_entity = w.at("initial_entity").get<std::vector<double>>();
  d.world.initial_property = w.at("initial_property").get<std::vector<double>>();
  d.world.validate();
  for (const auto& c : j.at("concepts")) {
    d.concepts.push_back({c.at("concept_id").get<int>(), matrix_from_json(c.at("property_transition"))});
  }
  d.seed = j.at("seed");
  d.n = j.at("n");
  d.t_prime = j.at("t_prime");
  d.test_span_start = j.at("test_span_start");
  d.tokens = j.at("tokens").get<std::vector<int>>();
  for (const auto& l : j.at("labels")) d.labels.push_back({l.at(0).get<int>(), l.at(1).get<int>(), l.at(2).get<int>()});
  for (const auto& e : j.at("examples")) {
    d.examples.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<int>()});
  }
  if (d.labels.size() != d.tokens.size()) throw std::runtime_error("dataset: label count does not match token count");
  for (const auto& e : d.examples) {
    if (e.start + e.length >= d.tokens.size()) throw std::runtime_error("dataset: example span out of range");
  }
  return d;
}

std::string labels_csv(const hmm::HmmDataset& data) {
  std::ostringstream os;
  os << "position,token,entity,property,concept\n";
  for (std::size_t i = 0; i < data.tokens.size(); ++i) {
    const auto& l = data.labels[i];
    os << i << ',' << data.tokens[i] << ',' << l.entity << ',' << l.property << ',' << l.concept_id << '\n';
  }
  return os.str();
}

void save_dataset(const hmm::HmmDataset& data, const fs::path& path) {
  write_atomic(path, dataset_to_json(data).dump() + "\n");
}

hmm::HmmDataset load_dataset(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error(path.string() + ": dataset not found");
  try {
    return dataset_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed dataset: " + e.what());
  }
}

namespace {

json detector_to_json(const GradientShiftDetector& d) {
  return json{{"steps", d.steps_observed()},
              {"norms", std::vector<double>(d.norms().begin(), d.norms().end())},
              {"z", std::vector<double>(d.frozen_z().begin(), d.frozen_z().end())}};
}

std::deque<double> to_deque(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return {v.begin(), v.end()};
}

json optional_id(const std::optional<ExpertId>& id) { return id ? json(*id) : json(nullptr); }

std::optional<ExpertId> optional_id(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<ExpertId>();
}

}  // namespace

json checkpoint_to_json(const TrainerState& s) {
  json params = json::object();
  for (const auto& [name, m] : parameters(s.model)) {
    if (name.rfind("expert.", 0) == 0) continue;
    params[name] = matrix_to_json(*m);
  }
  const auto& pool = s.model.pool;
  json experts = json::array();
  for (const auto& e : pool.experts()) {
    experts.push_back({{"id", e.id},
                       {"weight", matrix_to_json(e.weight)},
                       {"gate", matrix_to_json(e.gate)},
                       {"creation_step", e.creation_step},
                       {"parent", optional_id(e.parent)}});
  }
  json slots = json::object();
  for (const auto& [name, slot] : s.optimizer.slots()) {
    slots[name] = {{"m", matrix_to_json(slot.m)}, {"v", matrix_to_json(slot.v)}, {"t", slot.t}};
  }
  json streams = json::object();
  for (const auto& [id, d] : s.monitor.streams()) streams[std::to_string(id)] = detector_to_json(d);
  const auto& l = s.ledger;
  json events = json::array();
  for (const auto& e : l.events) {
    events.push_back({{"step", e.step},
                      {"parent", e.parent},
                      {"child", e.child},
                      {"p_value", e.p_value},
                      {"cosine", e.cosine},
                      {"grad_norm", e.grad_norm}});
  }
  json checks = json::array();
  for (const auto& c : l.checks) {
    checks.push_back({{"step", c.step},
                      {"candidate", c.candidate},
                      {"loss_masked", c.loss_masked},
                      {"loss_original", c.loss_original},
                      {"loss_gap", c.loss_gap},
                      {"retained", c.retained},
                      {"patience_after", c.patience_after},
                      {"stopped_after", c.stopped_after}});
  }
  const auto& ac = s.optimizer.config();
  return json{{"format", "mass-checkpoint"},
              {"version", kCheckpointVersion},
              {"config", to_json(s.config)},
              {"step", s.step},
              {"rng_state", s.rng_state},
              {"params", params},
              {"pool",
               {{"d_model", pool.d_model()},
                {"max_experts", pool.max_experts()},
                {"next_id", pool.next_id()},
                {"experts", experts},
                {"pairs", pool.duplicated_pairs()}}},
              {"adam",
               {{"learning_rate", ac.learning_rate},
                {"beta1", ac.beta1},
                {"beta2", ac.beta2},
                {"epsilon", ac.epsilon},
                {"slots", slots}}},
              {"monitor", streams},
              {"ledger",
               {{"events", events},
                {"checks", checks},
                {"patience", l.patience},
                {"stopped", l.stopped},
                {"stop_reason", l.stop_reason},
                {"pending", optional_id(l.pending)},
                {"phase_end_step", l.phase_end_step}}}};
}

TrainerState checkpoint_from_json(const json& j) {
  if (j.value("format", "") != "mass-checkpoint") throw std::runtime_error("not a checkpoint file");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + j.at("version").dump());
  }
  TrainerState s;
  s.config = config_from_json(j.at("config"));
  s.step = j.at("step");
  s.rng_state = j.at("rng_state");
  s.model = init_model(s.config.resolved_model());

  const auto& pj = j.at("pool");
  MoePool pool(pj.at("d_model").get<int>(), pj.at("max_experts").get<int>());
  for (const auto& e : pj.at("experts")) {
    ExpertBlock b;
    b.id = e.at("id");
    b.weight = matrix_from_json(e.at("weight"));
    b.gate = matrix_from_json(e.at("gate"));
    b.creation_step = e.at("creation_step");
    b.parent = optional_id(e.at("parent"));
    pool.push_raw(std::move(b));
  }
  pool.set_pairs(pj.at("pairs").get<std::vector<std::pair<ExpertId, ExpertId>>>());
  pool.set_next_id(pj.at("next_id").get<ExpertId>());
  s.model.pool = std::move(pool);

  const auto& params = j.at("params");
  for (auto& p : parameters(s.model)) {
    if (p.name.rfind("expert.", 0) == 0) continue;
    Matrix m = matrix_from_json(params.at(p.name));
    if (m.rows() != p.value->rows() || m.cols() != p.value->cols()) {
      throw ShapeError("checkpoint: " + p.name + " has shape " + shape_str(m.rows(), m.cols()));
    }
    *p.value = std::move(m);
  }

  const auto& aj = j.at("adam");
  s.optimizer = Adam(AdamConfig{aj.at("learning_rate"), aj.at("beta1"), aj.at("beta2"), aj.at("epsilon")});
  for (const auto& [name, slot] : aj.at("slots").items()) {
    s.optimizer.slots()[name] = Adam::Slot{matrix_from_json(slot.at("m")), matrix_from_json(slot.at("v")), slot.at("t")};
  }

  s.monitor = CpdMonitor(s.config.train.expansion.cpd);
  for (const auto& [id, d] : j.at("monitor").items()) {
    s.monitor.stream(std::stoi(id)).restore(d.at("steps"), to_deque(d.at("norms")), to_deque(d.at("z")));
  }

  const auto& lj = j.at("ledger");
  auto& l = s.ledger;
  for (const auto& e : lj.at("events")) {
    l.events.push_back({e.at("step"), e.at("parent"), e.at("child"), e.at("p_value"), e.at("cosine"), e.at("grad_norm")});
  }
  for (const auto& c : lj.at("checks")) {
    l.checks.push_back({c.at("step"), c.at("candidate"), c.at("loss_masked"), c.at("loss_original"), c.at("loss_gap"),
                        c.at("retained"), c.at("patience_after"), c.at("stopped_after")});
  }
  l.patience = lj.at("patience");
  l.stopped = lj.at("stopped");
  l.stop_reason = lj.at("stop_reason");
  l.pending = optional_id(lj.at("pending"));
  l.phase_end_step = lj.at("phase_end_step");
  return s;
}

void save_checkpoint(const TrainerState& state, const fs::path& path) {
  const auto bytes = json::to_cbor(checkpoint_to_json(state));
  write_atomic(path, std::string(bytes.begin(), bytes.end()));
}

TrainerState load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error(path.string() + ": checkpoint not found");
  const std::string bytes = read_file(path);
  try {
    return checkpoint_from_json(json::from_cbor(bytes));
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed checkpoint: " + e.what());
  }
}

std::string routing_csv(const std::vector<RoutingRecord>& records) {
  std::ostringstream os;
  os << "example,position,token,entity,property,concept,k_star";
  const std::size_t k = records.empty() ? 0 : records.front().scores.size();
  for (std::size_t i = 0; i < k; ++i) os << ",r_" << i;
  os << '\n';
  char buf[32];
  for (const auto& r : records) {
    os << r.example << ',' << r.position << ',' << r.token << ',' << r.entity << ',' << r.property << ','
       << r.concept_id << ',' << r.k_star;
    for (double v : r.scores) {
      const auto res = std::to_chars(buf, buf + sizeof buf, v);
      os << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    os << '\n';
  }
  return os.str();
}

std::vector<RoutingRecord> parse_routing_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<RoutingRecord> out;
  if (!std::getline(in, line) || line.rfind("example,", 0) != 0) throw std::runtime_error("routing csv: bad header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view sv(line);
    for (std::size_t pos = 0;;) {
      const auto c = sv.find(',', pos);
      cells.push_back(sv.substr(pos, c == std::string_view::npos ? std::string_view::npos : c - pos));
      if (c == std::string_view::npos) break;
      pos = c + 1;
    }
    if (cells.size() < 7) throw std::runtime_error("routing csv: short row");
    const auto num = [](std::string_view s, auto& v) {
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw std::runtime_error("routing csv: bad number");
    };
    RoutingRecord r;
    num(cells[0], r.example);
    num(cells[1], r.position);
    num(cells[2], r.token);
    num(cells[3], r.entity);
    num(cells[4], r.property);
    num(cells[5], r.concept_id);
    num(cells[6], r.k_star);
    r.scores.resize(cells.size() - 7);
    for (std::size_t i = 7; i < cells.size(); ++i) num(cells[i], r.scores[i - 7]);
    out.push_back(std::move(r));
  }
  return out;
}

void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    out << text;
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

MetricsWriter::MetricsWriter(const fs::path& path, bool append) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw std::runtime_error(path.string() + ": cannot open metrics file");
}

void MetricsWriter::write(const json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace mass::io
