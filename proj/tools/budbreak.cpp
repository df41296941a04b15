// SPDX-License-Identifier: Apache-2.0
#include "budbreak/cli.hpp"

int main(int argc, char** argv) { return budbreak::run_cli(argc, argv); }
