// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/random.hpp"

#include "cogs/errors.hpp"

#include <sstream>

namespace cogs {

std::string rng_to_string(const Rng& rng) {
    std::ostringstream out;
    out << rng;
    return out.str();
}

Rng rng_from_string(const std::string& text) {
    std::istringstream in(text);
    Rng rng;
    in >> rng;
    if (in.fail()) throw CheckpointError("malformed random engine state");
    return rng;
}

}  // namespace cogs
