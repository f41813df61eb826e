// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "xkws/autodiff.hpp"
#include "xkws/ops.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace xkws {

// Glorot-uniform [fan_out x fan_in] matrix, values in [-a, a] with
// a = sqrt(6 / (fan_in + fan_out)). Deterministic in the seed.
Tensor xavier_init(std::int64_t fan_in, std::int64_t fan_out, std::uint64_t rng_seed);
double xavier_bound(std::int64_t fan_in, std::int64_t fan_out);
// Same distribution for an arbitrary shape with explicit fans.
void xavier_fill(Tensor& t, std::int64_t fan_in, std::int64_t fan_out, Rng& rng);

struct DenseParams {
  DenseParams() = default;
  DenseParams(const std::string& name, std::size_t in, std::size_t out, bool with_bias = true);

  void init(Rng& rng);
  std::vector<Parameter*> parameters();

  Parameter weight;  // [out x in]
  Parameter bias;    // [out]; empty when bias-free
};

Var dense_forward(Graph& g, Var x, DenseParams& p);

// One GRU direction. Gate blocks are stacked in the order (z, r, h):
//   z  = sigmoid(W_z x + U_z h + b_z)
//   r  = sigmoid(W_r x + U_r h + b_r)
//   h~ = tanh(W_h x + U_h (r * h) + b_h)
//   h' = (1 - z) * h + z * h~
struct GruParams {
  GruParams() = default;
  GruParams(const std::string& name, std::size_t input, std::size_t hidden);

  std::size_t hidden_size() const { return hidden; }
  std::size_t input_size() const { return w_input.value.dim(1); }
  void init(Rng& rng);
  std::vector<Parameter*> parameters();

  Parameter w_input;   // [3H x input]
  Parameter w_hidden;  // [3H x H]
  Parameter bias;      // [3H]
  std::size_t hidden = 0;
};

struct BiGruParams {
  BiGruParams() = default;
  BiGruParams(const std::string& name, std::size_t input, std::size_t hidden);

  void init(Rng& rng);
  std::vector<Parameter*> parameters();

  GruParams forward;
  GruParams backward;
};

// x: [T x input]. Output [T x 2H], concat(forward state, backward state).
// The backward direction starts at the last unmasked step; masked steps
// produce zero rows.
Var bigru_forward(Graph& g, Var x, GruParams& fwd, GruParams& bwd, const Mask& mask);
Var bigru_forward(Graph& g, Var x, BiGruParams& p, const Mask& mask);

struct Conv2dParams {
  Conv2dParams() = default;
  Conv2dParams(const std::string& name, std::size_t in_channels, std::size_t out_channels);

  void init(Rng& rng);
  std::vector<Parameter*> parameters();

  Parameter kernels;  // [Cout x Cin x 3 x 3]
  Parameter bias;     // [Cout]
};

struct BatchNormParams {
  BatchNormParams() = default;
  BatchNormParams(const std::string& name, std::size_t channels);

  std::vector<Parameter*> parameters();

  Parameter gamma;
  Parameter beta;
  BatchNormStats stats;
};

}  // namespace xkws
