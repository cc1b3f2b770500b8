// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "finermoe/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return finermoe::cli::run(std::move(args));
}
