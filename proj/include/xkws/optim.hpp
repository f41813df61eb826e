// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "xkws/autodiff.hpp"

#include <span>

namespace xkws {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update of every parameter that requires grad.
// Gradients are left as they are; the caller resets them.
void adam_step(std::span<Parameter* const> params, const AdamConfig& config = {});

void zero_grads(std::span<Parameter* const> params);

}  // namespace xkws
