// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/optimizer.hpp"

#include <cmath>

namespace mass {

void Adam::step(const std::vector<ParamRef>& params, const std::map<std::string, Matrix>& grads,
                const std::set<std::string>& skip) {
  const auto& c = config_;
  for (const auto& [name, value] : params) {
    if (skip.contains(name)) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Matrix& g = git->second;
    auto [it, fresh] = slots_.try_emplace(name);
    Slot& s = it->second;
    if (fresh || s.m.rows() != g.rows() || s.m.cols() != g.cols()) {
      s.m = Matrix::Zero(g.rows(), g.cols());
      s.v = Matrix::Zero(g.rows(), g.cols());
      s.t = 0;
    }
    ++s.t;
    s.m = c.beta1 * s.m + (1.0 - c.beta1) * g;
    s.v = c.beta2 * s.v + (1.0 - c.beta2) * g.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
    const double step = c.learning_rate / bc1;
    *value -= (step * s.m.array() / ((s.v.array() / bc2).sqrt() + c.epsilon)).matrix();
  }
}

void Adam::copy_state(const std::string& from, const std::string& to) {
  auto it = slots_.find(from);
  if (it == slots_.end()) {
    slots_.erase(to);
    return;
  }
  slots_[to] = it->second;
}

}  // namespace mass
