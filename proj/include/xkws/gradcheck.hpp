// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "xkws/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace xkws {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many per
  // parameter (large recurrent input matrices make the full sweep slow).
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // When a coordinate fails and its one-sided differences disagree, the
  // +-step probe straddles a kink (leaky ReLU, max); it is re-probed once at
  // step * kink_step_factor. 0 disables the retry.
  double kink_step_factor = 0.01;
};

struct ParamGradCheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  std::size_t kink_refinements = 0;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

// Builds a fresh graph through `loss_fn` for every evaluation. The forward
// must be deterministic. Relative error per coordinate is
// |a - n| / max(1, |a|, |n|) with n from central differences. Parameters with
// requires_grad off are skipped. Parameter gradients are zero on return.
GradCheckReport grad_check(const std::function<Var(Graph&)>& loss_fn,
                           std::span<Parameter* const> params, const GradCheckOptions& options = {});

}  // namespace xkws
