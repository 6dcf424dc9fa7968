// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace mass::log {

inline std::atomic<bool>& quiet_flag() {
  static std::atomic<bool> quiet{false};
  return quiet;
}

inline void set_quiet(bool quiet) { quiet_flag() = quiet; }

inline void warn(std::string_view msg) {
  if (!quiet_flag()) std::cerr << "warning: " << msg << '\n';
}

inline void info(std::string_view msg) {
  if (!quiet_flag()) std::cerr << msg << '\n';
}

}  // namespace mass::log
