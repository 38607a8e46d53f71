// SPDX-License-Identifier: Apache-2.0
#include "ear/cli.hpp"

int main(int argc, char** argv) { return ear::cli::run(argc, argv); }
