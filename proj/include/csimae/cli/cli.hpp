// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>

namespace csimae {

inline int cli_main(int, char**) {
    std::fprintf(stderr, "csimae: not wired up yet\n");
    return 2;
}

}  // namespace csimae
