// SPDX-License-Identifier: Apache-2.0

#include "nexus/cli.hpp"

int main(int argc, char** argv) { return nexus::cli::run(argc, argv); }
