// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "mass/cli.hpp"

int main(int argc, char** argv) { return mass::cli::run(argc, argv); }
