// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives recorded on a Graph. Sequences are stored as
// [time x features] matrices; feature maps as [channels x time x frequency].
#pragma once

#include "xkws/autodiff.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace xkws {

enum class Mode { kTrain, kEval };
enum class Activation { kLeakyRelu, kSigmoid, kTanh };

inline constexpr double kLeakyReluAlpha = 0.01;
inline constexpr double kBceClampEps = 1e-7;

using Mask = std::vector<bool>;
using Rng = std::mt19937_64;

// Number of leading `true` entries. Throws InvalidArgument when a `true`
// follows a `false` (padding must be a suffix).
std::size_t valid_prefix_length(const Mask& mask);
Mask prefix_mask(std::size_t valid, std::size_t total);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var sum(Var x);

Var sigmoid(Var x);
Var tanh(Var x);
Var leaky_relu(Var x, double alpha = kLeakyReluAlpha);
Var activation(Var x, Activation kind, double alpha = kLeakyReluAlpha);

// Inverted dropout: scales survivors by 1/(1-p) in train mode, identity in eval.
Var dropout(Var x, double p, Mode mode, Rng& rng);

// Rank-1 or rank-2 operands; rank-1 is treated as a row.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
// y = W x + b applied to x (rank-1) or to every row of x (rank-2).
// `b` may be a default-constructed Var for a bias-free projection.
Var dense(Var x, Var w, Var b = {});

Var reshape(Var x, Shape shape);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t start, std::size_t count);
// Appends zero rows up to `total_rows`.
Var pad_rows(Var x, std::size_t total_rows);
// Rank-3 [C x T x F] along the time axis.
Var concat_time(std::span<const Var> parts);
Var slice_time(Var x, std::size_t start, std::size_t count);
// [C x T x F] -> [T x (C*F)], channel-major within each frame.
Var channels_to_frames(Var x);

// Output length along time for a 3-tap "same" convolution: ceil(t / stride).
std::size_t conv_output_length(std::size_t t, std::size_t stride);
// x: [Cin x T x F], kernels: [Cout x Cin x 3 x 3], bias: [Cout].
// Zero "same" padding; stride applies to time only.
Var conv2d(Var x, Var kernels, Var bias, std::size_t stride_time);

struct BatchNormStats {
  explicit BatchNormStats(std::size_t channels = 0);

  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalisation of a batch of [C x T_i x F] maps. Train mode uses
// statistics over batch x time x frequency and updates `stats` (running
// variance uses the unbiased estimate); eval mode uses `stats`.
std::vector<Var> batchnorm(std::span<const Var> batch, Var gamma, Var beta,
                           BatchNormStats& stats, Mode mode);

// One GRU direction over precomputed input projections.
// input_proj: [T x 3H] holding W x + b for gates (z, r, h) in that order.
// w_hidden:   [3H x H] recurrent weights for the same gate order.
// Returns [T x H] hidden states, h_0 = 0. reverse=true scans from T-1 to 0
// and stores each state at its own time index.
Var gru_scan(Var input_proj, Var w_hidden, bool reverse);

// Softmax along the last axis of rank-1 or rank-2 logits, with masked
// columns forced to exactly 0.
Var masked_softmax(Var logits, const Mask& mask);

// Mean binary cross-entropy; probabilities are clamped to
// [clamp_eps, 1 - clamp_eps] before the log.
Var bce_loss(Var probs, std::span<const double> labels, double clamp_eps = kBceClampEps);

}  // namespace xkws
