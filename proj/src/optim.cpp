// SPDX-License-Identifier: Apache-2.0
#include "xkws/optim.hpp"

#include "xkws/errors.hpp"

#include <cmath>

namespace xkws {

void adam_step(std::span<Parameter* const> params, const AdamConfig& config) {
  if (!(config.learning_rate > 0.0)) throw InvalidArgument("adam: learning rate must be positive");
  if (config.beta1 < 0.0 || config.beta1 >= 1.0 || config.beta2 < 0.0 || config.beta2 >= 1.0) {
    throw InvalidArgument("adam: betas must lie in [0, 1)");
  }
  for (Parameter* p : params) {
    if (!p->requires_grad) continue;
    if (p->grad.shape() != p->value.shape()) {
      throw ShapeError("adam: gradient of " + p->name + " has shape " + shape_str(p->grad.shape()));
    }
    if (p->adam_m.shape() != p->value.shape()) p->adam_m = Tensor(p->value.shape());
    if (p->adam_v.shape() != p->value.shape()) p->adam_v = Tensor(p->value.shape());
    ++p->step_count;
    const double t = static_cast<double>(p->step_count);
    const double m_correction = 1.0 - std::pow(config.beta1, t);
    const double v_correction = 1.0 - std::pow(config.beta2, t);
    auto g = p->grad.vec().array();
    auto m = p->adam_m.vec().array();
    auto v = p->adam_v.vec().array();
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.square();
    p->value.vec().array() -=
        config.learning_rate * (m / m_correction) / ((v / v_correction).sqrt() + config.eps);
  }
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) p->grad = Tensor(p->value.shape());
    p->zero_grad();
  }
}

}  // namespace xkws
