// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "xkws/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace xkws {

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
};

// Central-difference checks over every layer type and the composed
// score_pair on a 4-frame, 3-character instance. The full model samples
// `model_coords` coordinates per parameter.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, std::size_t model_coords = 32);

}  // namespace xkws
