// SPDX-License-Identifier: Apache-2.0
#include "csimae/cli/cli.hpp"

int main(int argc, char** argv) { return csimae::cli_main(argc, argv); }
