// SPDX-License-Identifier: Apache-2.0
#include "xkws/gradcheck.hpp"

#include "xkws/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace xkws {
namespace {

double evaluate(const std::function<Var(Graph&)>& loss_fn) {
  Graph g;
  return loss_fn(g).value()[0];
}

std::vector<std::size_t> pick_coords(std::size_t size, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> all(size);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (limit == 0 || limit >= size) return all;
  for (std::size_t i = 0; i < limit; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, size - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(limit);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Graph&)>& loss_fn,
                           std::span<Parameter* const> params, const GradCheckOptions& options) {
  zero_grads(params);
  {
    Graph g;
    const Var loss = loss_fn(g);
    g.backward(loss);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);
  zero_grads(params);

  const double centre = evaluate(loss_fn);
  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!p.requires_grad) continue;
    ParamGradCheck entry;
    entry.name = p.name;
    for (std::size_t i : pick_coords(p.value.size(), options.max_coords_per_param, rng)) {
      const double saved = p.value[i];
      const double a = analytic[k][i];
      auto probe = [&](double step, double& forward, double& backward) {
        p.value[i] = saved + step;
        const double plus = evaluate(loss_fn);
        p.value[i] = saved - step;
        const double minus = evaluate(loss_fn);
        p.value[i] = saved;
        forward = (plus - centre) / step;
        backward = (centre - minus) / step;
        const double numeric = (plus - minus) / (2.0 * step);
        return std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      };
      double forward = 0.0, backward = 0.0;
      double rel = probe(options.step, forward, backward);
      const bool one_sided_disagree =
          std::abs(forward - backward) > options.tolerance * std::max({1.0, std::abs(forward), std::abs(backward)});
      if (rel > options.tolerance && one_sided_disagree && options.kink_step_factor > 0.0) {
        rel = probe(options.step * options.kink_step_factor, forward, backward);
        ++entry.kink_refinements;
      }
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.params.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace xkws
