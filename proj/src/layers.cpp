// SPDX-License-Identifier: Apache-2.0
#include "xkws/layers.hpp"

#include "xkws/errors.hpp"

#include <cmath>

namespace xkws {

double xavier_bound(std::int64_t fan_in, std::int64_t fan_out) {
  if (fan_in < 1 || fan_out < 1) {
    throw InvalidArgument("xavier_init: fan_in and fan_out must be positive (got " +
                          std::to_string(fan_in) + ", " + std::to_string(fan_out) + ")");
  }
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void xavier_fill(Tensor& t, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  const double bound = xavier_bound(fan_in, fan_out);
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (double& v : t.values()) v = uniform(rng);
}

Tensor xavier_init(std::int64_t fan_in, std::int64_t fan_out, std::uint64_t rng_seed) {
  xavier_bound(fan_in, fan_out);
  Tensor t({static_cast<std::size_t>(fan_out), static_cast<std::size_t>(fan_in)});
  Rng rng(rng_seed);
  xavier_fill(t, fan_in, fan_out, rng);
  return t;
}

DenseParams::DenseParams(const std::string& name, std::size_t in, std::size_t out, bool with_bias)
    : weight(name + ".weight", Tensor({out, in})),
      bias(with_bias ? Parameter(name + ".bias", Tensor({out})) : Parameter()) {}

void DenseParams::init(Rng& rng) {
  xavier_fill(weight.value, static_cast<std::int64_t>(weight.value.dim(1)),
              static_cast<std::int64_t>(weight.value.dim(0)), rng);
  bias.value.fill(0.0);
}

std::vector<Parameter*> DenseParams::parameters() {
  std::vector<Parameter*> out{&weight};
  if (!bias.value.empty()) out.push_back(&bias);
  return out;
}

Var dense_forward(Graph& g, Var x, DenseParams& p) {
  const Var w = g.param(p.weight);
  if (p.bias.value.empty()) return dense(x, w);
  return dense(x, w, g.param(p.bias));
}

GruParams::GruParams(const std::string& name, std::size_t input, std::size_t hidden_)
    : w_input(name + ".w_input", Tensor({3 * hidden_, input})),
      w_hidden(name + ".w_hidden", Tensor({3 * hidden_, hidden_})),
      bias(name + ".bias", Tensor({3 * hidden_})),
      hidden(hidden_) {}

void GruParams::init(Rng& rng) {
  // Each gate block is its own Glorot matrix.
  const auto in = static_cast<std::int64_t>(input_size());
  const auto h = static_cast<std::int64_t>(hidden);
  xavier_fill(w_input.value, in, h, rng);
  xavier_fill(w_hidden.value, h, h, rng);
  bias.value.fill(0.0);
}

std::vector<Parameter*> GruParams::parameters() { return {&w_input, &w_hidden, &bias}; }

BiGruParams::BiGruParams(const std::string& name, std::size_t input, std::size_t hidden)
    : forward(name + ".fwd", input, hidden), backward(name + ".bwd", input, hidden) {}

void BiGruParams::init(Rng& rng) {
  forward.init(rng);
  backward.init(rng);
}

std::vector<Parameter*> BiGruParams::parameters() {
  auto out = forward.parameters();
  for (Parameter* p : backward.parameters()) out.push_back(p);
  return out;
}

Var bigru_forward(Graph& g, Var x, GruParams& fwd, GruParams& bwd, const Mask& mask) {
  if (x.value().rank() != 2) throw ShapeError("bigru: expected [T x input], got " + shape_str(x.shape()));
  const std::size_t steps = x.value().rows();
  if (mask.size() != steps) {
    throw InvalidArgument("bigru: mask length " + std::to_string(mask.size()) + " for " +
                          std::to_string(steps) + " steps");
  }
  if (fwd.input_size() != x.value().cols() || bwd.input_size() != x.value().cols()) {
    throw ShapeError("bigru: input width " + std::to_string(x.value().cols()) + " vs parameters " +
                     std::to_string(fwd.input_size()));
  }
  const std::size_t valid = valid_prefix_length(mask);
  if (valid == 0) throw InvalidArgument("bigru: sequence has no unmasked steps");
  const Var body = valid == steps ? x : slice_rows(x, 0, valid);

  const Var proj_f = dense(body, g.param(fwd.w_input), g.param(fwd.bias));
  const Var states_f = gru_scan(proj_f, g.param(fwd.w_hidden), false);
  const Var proj_b = dense(body, g.param(bwd.w_input), g.param(bwd.bias));
  const Var states_b = gru_scan(proj_b, g.param(bwd.w_hidden), true);
  const Var both[] = {states_f, states_b};
  return pad_rows(concat_cols(both), steps);
}

Var bigru_forward(Graph& g, Var x, BiGruParams& p, const Mask& mask) {
  return bigru_forward(g, x, p.forward, p.backward, mask);
}

Conv2dParams::Conv2dParams(const std::string& name, std::size_t in_channels, std::size_t out_channels)
    : kernels(name + ".kernels", Tensor({out_channels, in_channels, 3, 3})),
      bias(name + ".bias", Tensor({out_channels})) {}

void Conv2dParams::init(Rng& rng) {
  const auto receptive = static_cast<std::int64_t>(9);
  xavier_fill(kernels.value, static_cast<std::int64_t>(kernels.value.dim(1)) * receptive,
              static_cast<std::int64_t>(kernels.value.dim(0)) * receptive, rng);
  bias.value.fill(0.0);
}

std::vector<Parameter*> Conv2dParams::parameters() { return {&kernels, &bias}; }

BatchNormParams::BatchNormParams(const std::string& name, std::size_t channels)
    : gamma(name + ".gamma", Tensor::filled({channels}, 1.0)),
      beta(name + ".beta", Tensor({channels})),
      stats(channels) {}

std::vector<Parameter*> BatchNormParams::parameters() { return {&gamma, &beta}; }

}  // namespace xkws
