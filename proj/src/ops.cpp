// SPDX-License-Identifier: Apache-2.0
#include "xkws/ops.hpp"

#include "xkws/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace xkws {
namespace {

using Eigen::Index;
using RowVector = Eigen::RowVectorXd;

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const char* op, Var x, std::size_t rank) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

Graph& graph_of(Var x) {
  if (!x.valid()) throw InvalidArgument("operation on an empty variable");
  return x.graph();
}

}  // namespace

std::size_t valid_prefix_length(const Mask& mask) {
  std::size_t valid = 0;
  while (valid < mask.size() && mask[valid]) ++valid;
  for (std::size_t i = valid; i < mask.size(); ++i) {
    if (mask[i]) {
      throw InvalidArgument("mask has an interior gap at position " + std::to_string(valid) +
                            "; padding must be a suffix");
    }
  }
  return valid;
}

Mask prefix_mask(std::size_t valid, std::size_t total) {
  Mask mask(total, false);
  for (std::size_t i = 0; i < valid && i < total; ++i) mask[i] = true;
  return mask;
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  out.vec() = a.value().vec() + b.value().vec();
  return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& dy) {
    if (a.requires_grad()) g.grad_of(a).vec() += dy.vec();
    if (b.requires_grad()) g.grad_of(b).vec() += dy.vec();
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  out.vec() = a.value().vec() - b.value().vec();
  return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& dy) {
    if (a.requires_grad()) g.grad_of(a).vec() += dy.vec();
    if (b.requires_grad()) g.grad_of(b).vec() -= dy.vec();
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  out.vec() = a.value().vec().cwiseProduct(b.value().vec());
  return graph_of(a).record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& dy) {
    if (a.requires_grad()) g.grad_of(a).vec() += dy.vec().cwiseProduct(b.value().vec());
    if (b.requires_grad()) g.grad_of(b).vec() += dy.vec().cwiseProduct(a.value().vec());
  });
}

Var scale(Var x, double factor) {
  Tensor out(x.shape());
  out.vec() = x.value().vec() * factor;
  return graph_of(x).record(std::move(out), {x}, [x, factor](Graph& g, const Tensor&, const Tensor& dy) {
    g.grad_of(x).vec() += dy.vec() * factor;
  });
}

Var sum(Var x) {
  Tensor out({1});
  out[0] = x.value().vec().sum();
  return graph_of(x).record(std::move(out), {x}, [x](Graph& g, const Tensor&, const Tensor& dy) {
    g.grad_of(x).vec().array() += dy[0];
  });
}

Var sigmoid(Var x) {
  Tensor out(x.shape());
  out.vec() = x.value().vec().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return graph_of(x).record(std::move(out), {x}, [x](Graph& g, const Tensor& y, const Tensor& dy) {
    g.grad_of(x).vec().array() += dy.vec().array() * y.vec().array() * (1.0 - y.vec().array());
  });
}

Var tanh(Var x) {
  Tensor out(x.shape());
  out.vec() = x.value().vec().array().tanh().matrix();
  return graph_of(x).record(std::move(out), {x}, [x](Graph& g, const Tensor& y, const Tensor& dy) {
    g.grad_of(x).vec().array() += dy.vec().array() * (1.0 - y.vec().array().square());
  });
}

Var leaky_relu(Var x, double alpha) {
  Tensor out(x.shape());
  out.vec() = x.value().vec().unaryExpr([alpha](double v) { return v >= 0.0 ? v : alpha * v; });
  return graph_of(x).record(std::move(out), {x}, [x, alpha](Graph& g, const Tensor&, const Tensor& dy) {
    const auto& xv = x.value();
    Tensor& gx = g.grad_of(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += xv[i] >= 0.0 ? dy[i] : alpha * dy[i];
  });
}

Var activation(Var x, Activation kind, double alpha) {
  switch (kind) {
    case Activation::kLeakyRelu:
      return leaky_relu(x, alpha);
    case Activation::kSigmoid:
      return sigmoid(x);
    case Activation::kTanh:
      return tanh(x);
  }
  throw InvalidArgument("unknown activation");
}

Var dropout(Var x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw InvalidArgument("dropout: p must lie in [0, 1)");
  if (mode == Mode::kEval || p == 0.0) return x;
  auto keep = std::make_shared<Tensor>(x.shape());
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double survivor_scale = 1.0 / (1.0 - p);
  for (double& k : keep->values()) k = uniform(rng) >= p ? survivor_scale : 0.0;
  Tensor out(x.shape());
  out.vec() = x.value().vec().cwiseProduct(keep->vec());
  return graph_of(x).record(std::move(out), {x}, [x, keep](Graph& g, const Tensor&, const Tensor& dy) {
    g.grad_of(x).vec() += dy.vec().cwiseProduct(keep->vec());
  });
}

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  const auto am = a.value().mat();
  const auto bm = b.value().mat();
  const Index inner_a = transpose_a ? am.rows() : am.cols();
  const Index inner_b = transpose_b ? bm.cols() : bm.rows();
  if (inner_a != inner_b) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + (transpose_a ? "^T" : "") + " x " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const Index m = transpose_a ? am.cols() : am.rows();
  const Index n = transpose_b ? bm.rows() : bm.cols();
  const bool vector_out = a.value().rank() == 1 && !transpose_a;
  Tensor out(vector_out ? Shape{static_cast<std::size_t>(n)}
                        : Shape{static_cast<std::size_t>(m), static_cast<std::size_t>(n)});
  auto om = out.mat();
  if (!transpose_a && !transpose_b) om.noalias() = am * bm;
  if (!transpose_a && transpose_b) om.noalias() = am * bm.transpose();
  if (transpose_a && !transpose_b) om.noalias() = am.transpose() * bm;
  if (transpose_a && transpose_b) om.noalias() = am.transpose() * bm.transpose();

  return graph_of(a).record(
      std::move(out), {a, b}, [a, b, transpose_a, transpose_b](Graph& g, const Tensor&, const Tensor& dy) {
        const auto dm = dy.mat();
        const auto av = a.value().mat();
        const auto bv = b.value().mat();
        if (a.requires_grad()) {
          auto ga = g.grad_of(a).mat();
          if (!transpose_a && !transpose_b) ga.noalias() += dm * bv.transpose();
          if (!transpose_a && transpose_b) ga.noalias() += dm * bv;
          if (transpose_a && !transpose_b) ga.noalias() += bv * dm.transpose();
          if (transpose_a && transpose_b) ga.noalias() += bv.transpose() * dm.transpose();
        }
        if (b.requires_grad()) {
          auto gb = g.grad_of(b).mat();
          if (!transpose_a && !transpose_b) gb.noalias() += av.transpose() * dm;
          if (!transpose_a && transpose_b) gb.noalias() += dm.transpose() * av;
          if (transpose_a && !transpose_b) gb.noalias() += av * dm;
          if (transpose_a && transpose_b) gb.noalias() += dm.transpose() * av.transpose();
        }
      });
}

Var dense(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.rank() > 2 || xv.cols() != wv.dim(1)) {
    throw ShapeError("dense: input " + shape_str(xv.shape()) + " vs weights " +
                     shape_str(wv.shape()));
  }
  const std::size_t out_width = wv.dim(0);
  if (b.valid() && b.value().shape() != Shape{out_width}) {
    throw ShapeError("dense: bias " + shape_str(b.shape()) + " for " + std::to_string(out_width) +
                     " outputs");
  }
  Tensor out(xv.rank() == 1 ? Shape{out_width} : Shape{xv.rows(), out_width});
  auto om = out.mat();
  om.noalias() = xv.mat() * wv.mat().transpose();
  if (b.valid()) om.rowwise() += b.value().vec().transpose();

  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return graph_of(x).record(std::move(out), inputs, [x, w, b](Graph& g, const Tensor&, const Tensor& dy) {
    const auto dm = dy.mat();
    if (x.requires_grad()) g.grad_of(x).mat().noalias() += dm * w.value().mat();
    if (w.requires_grad()) g.grad_of(w).mat().noalias() += dm.transpose() * x.value().mat();
    if (b.valid() && b.requires_grad()) g.grad_of(b).vec() += dm.colwise().sum().transpose();
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return graph_of(x).record(std::move(out), {x}, [x](Graph& g, const Tensor&, const Tensor& dy) {
    g.grad_of(x).vec() += dy.vec();
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != rows) {
      throw ShapeError("concat_cols: part " + shape_str(p.shape()) + " with " +
                       std::to_string(rows) + " rows expected");
    }
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  Index offset = 0;
  for (Var p : parts) {
    const auto pm = p.value().mat();
    out.mat().middleCols(offset, pm.cols()) = pm;
    offset += pm.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return graph_of(parts[0]).record(std::move(out), inputs, [inputs](Graph& g, const Tensor&, const Tensor& dy) {
    Index off = 0;
    for (Var p : inputs) {
      const Index c = static_cast<Index>(p.value().cols());
      if (p.requires_grad()) g.grad_of(p).mat() += dy.mat().middleCols(off, c);
      off += c;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    if (p.value().rank() > 2 || p.value().cols() != cols) {
      throw ShapeError("concat_rows: part " + shape_str(p.shape()) + " with " +
                       std::to_string(cols) + " columns expected");
    }
    rows += p.value().rows();
  }
  Tensor out({rows, cols});
  Index offset = 0;
  for (Var p : parts) {
    const auto pm = p.value().mat();
    out.mat().middleRows(offset, pm.rows()) = pm;
    offset += pm.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return graph_of(parts[0]).record(std::move(out), inputs, [inputs](Graph& g, const Tensor&, const Tensor& dy) {
    Index off = 0;
    for (Var p : inputs) {
      const Index r = static_cast<Index>(p.value().rows());
      if (p.requires_grad()) g.grad_of(p).mat() += dy.mat().middleRows(off, r);
      off += r;
    }
  });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  require_rank("slice_rows", x, 2);
  if (start + count > x.value().rows() || count == 0) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") of " + shape_str(x.shape()));
  }
  Tensor out({count, x.value().cols()});
  out.mat() = x.value().mat().middleRows(static_cast<Index>(start), static_cast<Index>(count));
  return graph_of(x).record(std::move(out), {x}, [x, start, count](Graph& g, const Tensor&, const Tensor& dy) {
    g.grad_of(x).mat().middleRows(static_cast<Index>(start), static_cast<Index>(count)) += dy.mat();
  });
}

Var pad_rows(Var x, std::size_t total_rows) {
  require_rank("pad_rows", x, 2);
  const std::size_t rows = x.value().rows();
  if (total_rows < rows) throw ShapeError("pad_rows: target shorter than input");
  if (total_rows == rows) return x;
  Tensor out({total_rows, x.value().cols()});
  out.mat().topRows(static_cast<Index>(rows)) = x.value().mat();
  return graph_of(x).record(std::move(out), {x}, [x, rows](Graph& g, const Tensor&, const Tensor& dy) {
    g.grad_of(x).mat() += dy.mat().topRows(static_cast<Index>(rows));
  });
}

Var concat_time(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_time: no inputs");
  const Shape& first = parts[0].shape();
  if (first.size() != 3) throw ShapeError("concat_time: expected rank-3 parts");
  const std::size_t channels = first[0];
  const std::size_t freq = first[2];
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 3 || s[0] != channels || s[2] != freq) {
      throw ShapeError("concat_time: part " + shape_str(s) + " vs " + shape_str(first));
    }
    total += s[1];
  }
  Tensor out({channels, total, freq});
  std::size_t offset = 0;
  for (Var p : parts) {
    const std::size_t t = p.shape()[1];
    for (std::size_t c = 0; c < channels; ++c) {
      const double* src = p.value().data() + c * t * freq;
      std::copy(src, src + t * freq, out.data() + (c * total + offset) * freq);
    }
    offset += t;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return graph_of(parts[0]).record(
      std::move(out), inputs, [inputs, channels, total, freq](Graph& g, const Tensor&, const Tensor& dy) {
        std::size_t off = 0;
        for (Var p : inputs) {
          const std::size_t t = p.shape()[1];
          if (p.requires_grad()) {
            Tensor& gp = g.grad_of(p);
            for (std::size_t c = 0; c < channels; ++c) {
              const double* src = dy.data() + (c * total + off) * freq;
              double* dst = gp.data() + c * t * freq;
              for (std::size_t i = 0; i < t * freq; ++i) dst[i] += src[i];
            }
          }
          off += t;
        }
      });
}

Var slice_time(Var x, std::size_t start, std::size_t count) {
  require_rank("slice_time", x, 3);
  const Shape& s = x.shape();
  if (count == 0 || start + count > s[1]) {
    throw ShapeError("slice_time: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") of " + shape_str(s));
  }
  const std::size_t channels = s[0], total = s[1], freq = s[2];
  Tensor out({channels, count, freq});
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = x.value().data() + (c * total + start) * freq;
    std::copy(src, src + count * freq, out.data() + c * count * freq);
  }
  return graph_of(x).record(
      std::move(out), {x}, [x, start, count, channels, total, freq](Graph& g, const Tensor&, const Tensor& dy) {
        Tensor& gx = g.grad_of(x);
        for (std::size_t c = 0; c < channels; ++c) {
          const double* src = dy.data() + c * count * freq;
          double* dst = gx.data() + (c * total + start) * freq;
          for (std::size_t i = 0; i < count * freq; ++i) dst[i] += src[i];
        }
      });
}

Var channels_to_frames(Var x) {
  require_rank("channels_to_frames", x, 3);
  const std::size_t channels = x.shape()[0], frames = x.shape()[1], freq = x.shape()[2];
  Tensor out({frames, channels * freq});
  const double* src = x.value().data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      std::copy(src + (c * frames + t) * freq, src + (c * frames + t + 1) * freq,
                out.data() + t * channels * freq + c * freq);
    }
  }
  return graph_of(x).record(
      std::move(out), {x}, [x, channels, frames, freq](Graph& g, const Tensor&, const Tensor& dy) {
        Tensor& gx = g.grad_of(x);
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t t = 0; t < frames; ++t) {
            const double* src = dy.data() + t * channels * freq + c * freq;
            double* dst = gx.data() + (c * frames + t) * freq;
            for (std::size_t f = 0; f < freq; ++f) dst[f] += src[f];
          }
        }
      });
}

std::size_t conv_output_length(std::size_t t, std::size_t stride) {
  if (stride == 0) throw InvalidArgument("conv: stride must be positive");
  return (t + stride - 1) / stride;
}

namespace {

struct ConvGeometry {
  std::size_t in_channels, frames, freq, out_frames, stride;
};

// Rows: (channel, dt, df); columns: (output frame, frequency).
RowMatrix im2col(const Tensor& x, const ConvGeometry& geo) {
  const std::size_t cols = geo.out_frames * geo.freq;
  RowMatrix out = RowMatrix::Zero(static_cast<Index>(geo.in_channels * 9), static_cast<Index>(cols));
  for (std::size_t c = 0; c < geo.in_channels; ++c) {
    for (std::size_t dt = 0; dt < 3; ++dt) {
      for (std::size_t df = 0; df < 3; ++df) {
        double* row = out.data() + (c * 9 + dt * 3 + df) * cols;
        for (std::size_t to = 0; to < geo.out_frames; ++to) {
          const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(to * geo.stride + dt) - 1;
          if (t < 0 || t >= static_cast<std::ptrdiff_t>(geo.frames)) continue;
          const double* src = x.data() + (c * geo.frames + static_cast<std::size_t>(t)) * geo.freq;
          double* dst = row + to * geo.freq;
          const std::size_t f_begin = df == 0 ? 1 : 0;
          const std::size_t f_end = df == 2 ? geo.freq - 1 : geo.freq;
          for (std::size_t f = f_begin; f < f_end; ++f) dst[f] = src[f + df - 1];
        }
      }
    }
  }
  return out;
}

void col2im_add(const RowMatrix& cols_grad, const ConvGeometry& geo, Tensor& dx) {
  const std::size_t cols = geo.out_frames * geo.freq;
  for (std::size_t c = 0; c < geo.in_channels; ++c) {
    for (std::size_t dt = 0; dt < 3; ++dt) {
      for (std::size_t df = 0; df < 3; ++df) {
        const double* row = cols_grad.data() + (c * 9 + dt * 3 + df) * cols;
        for (std::size_t to = 0; to < geo.out_frames; ++to) {
          const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(to * geo.stride + dt) - 1;
          if (t < 0 || t >= static_cast<std::ptrdiff_t>(geo.frames)) continue;
          double* dst = dx.data() + (c * geo.frames + static_cast<std::size_t>(t)) * geo.freq;
          const double* src = row + to * geo.freq;
          const std::size_t f_begin = df == 0 ? 1 : 0;
          const std::size_t f_end = df == 2 ? geo.freq - 1 : geo.freq;
          for (std::size_t f = f_begin; f < f_end; ++f) dst[f + df - 1] += src[f];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var kernels, Var bias, std::size_t stride_time) {
  require_rank("conv2d", x, 3);
  if (stride_time != 1 && stride_time != 2) throw InvalidArgument("conv2d: stride must be 1 or 2");
  const Shape& xs = x.shape();
  const Shape& ks = kernels.shape();
  if (x.value().empty()) throw InvalidArgument("conv2d: empty input");
  if (ks.size() != 4 || ks[1] != xs[0] || ks[2] != 3 || ks[3] != 3) {
    throw ShapeError("conv2d: kernels " + shape_str(ks) + " for input " + shape_str(xs));
  }
  const std::size_t out_channels = ks[0];
  if (bias.shape() != Shape{out_channels}) throw ShapeError("conv2d: bias " + shape_str(bias.shape()));

  const ConvGeometry geo{xs[0], xs[1], xs[2], conv_output_length(xs[1], stride_time), stride_time};
  const RowMatrix cols = im2col(x.value(), geo);
  const ConstMatrixMap kmat(kernels.value().data(), static_cast<Index>(out_channels),
                            static_cast<Index>(geo.in_channels * 9));
  Tensor out({out_channels, geo.out_frames, geo.freq});
  MatrixMap om(out.data(), static_cast<Index>(out_channels),
               static_cast<Index>(geo.out_frames * geo.freq));
  om.noalias() = kmat * cols;
  om.colwise() += bias.value().vec();

  return graph_of(x).record(
      std::move(out), {x, kernels, bias}, [x, kernels, bias, geo, out_channels](Graph& g, const Tensor&, const Tensor& dy) {
        const ConstMatrixMap dm(dy.data(), static_cast<Index>(out_channels),
                                static_cast<Index>(geo.out_frames * geo.freq));
        const std::size_t patch = geo.in_channels * 9;
        if (kernels.requires_grad()) {
          // Recomputed rather than cached: the patch matrix dominates memory.
          const RowMatrix cols_again = im2col(x.value(), geo);
          MatrixMap gk(g.grad_of(kernels).data(), static_cast<Index>(out_channels),
                       static_cast<Index>(patch));
          gk.noalias() += dm * cols_again.transpose();
        }
        if (bias.requires_grad()) g.grad_of(bias).vec() += dm.rowwise().sum();
        if (x.requires_grad()) {
          const ConstMatrixMap km(kernels.value().data(), static_cast<Index>(out_channels),
                                  static_cast<Index>(patch));
          const RowMatrix cols_grad = km.transpose() * dm;
          col2im_add(cols_grad, geo, g.grad_of(x));
        }
      });
}

BatchNormStats::BatchNormStats(std::size_t channels)
    : running_mean({channels}), running_var(Tensor::filled({channels}, 1.0)) {}

namespace {

Var batchnorm_train(Var x, Var gamma, Var beta, BatchNormStats& stats) {
  const std::size_t channels = x.shape()[0];
  const std::size_t per_channel = x.shape()[1] * x.shape()[2];
  const ConstMatrixMap xm(x.value().data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
  const Eigen::VectorXd mean = xm.rowwise().mean();
  RowMatrix centered = xm.colwise() - mean;
  const Eigen::VectorXd var = centered.rowwise().squaredNorm() / static_cast<double>(per_channel);
  const Eigen::VectorXd inv_std = (var.array() + stats.eps).rsqrt();
  auto xhat = std::make_shared<RowMatrix>(inv_std.asDiagonal() * centered);

  Tensor out(x.shape());
  MatrixMap om(out.data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
  om = (gamma.value().vec().asDiagonal() * (*xhat)).colwise() + beta.value().vec();

  const double unbiased = per_channel > 1 ? static_cast<double>(per_channel) / (per_channel - 1) : 1.0;
  stats.running_mean.vec() = (1.0 - stats.momentum) * stats.running_mean.vec() + stats.momentum * mean;
  stats.running_var.vec() =
      (1.0 - stats.momentum) * stats.running_var.vec() + stats.momentum * unbiased * var;

  return x.graph().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, channels, per_channel](Graph& g, const Tensor&, const Tensor& dy) {
        const ConstMatrixMap dm(dy.data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
        const Eigen::VectorXd sum_dy = dm.rowwise().sum();
        const Eigen::VectorXd sum_dy_xhat = dm.cwiseProduct(*xhat).rowwise().sum();
        if (gamma.requires_grad()) g.grad_of(gamma).vec() += sum_dy_xhat;
        if (beta.requires_grad()) g.grad_of(beta).vec() += sum_dy;
        if (x.requires_grad()) {
          const double count = static_cast<double>(per_channel);
          const Eigen::VectorXd k = gamma.value().vec().cwiseProduct(inv_std) / count;
          MatrixMap gx(g.grad_of(x).data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
          RowMatrix term = count * dm;
          term.colwise() -= sum_dy;
          term -= sum_dy_xhat.asDiagonal() * (*xhat);
          gx += k.asDiagonal() * term;
        }
      });
}

Var batchnorm_eval(Var x, Var gamma, Var beta, const BatchNormStats& stats) {
  const std::size_t channels = x.shape()[0];
  const std::size_t per_channel = x.shape()[1] * x.shape()[2];
  const Eigen::VectorXd inv_std = (stats.running_var.vec().array() + stats.eps).rsqrt();
  const Eigen::VectorXd mean = stats.running_mean.vec();
  const ConstMatrixMap xm(x.value().data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
  Tensor out(x.shape());
  MatrixMap om(out.data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
  om = (gamma.value().vec().cwiseProduct(inv_std)).asDiagonal() * (xm.colwise() - mean);
  om.colwise() += beta.value().vec();
  return x.graph().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, inv_std, mean, channels, per_channel](Graph& g, const Tensor&, const Tensor& dy) {
        const ConstMatrixMap dm(dy.data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
        const ConstMatrixMap xm2(x.value().data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
        if (gamma.requires_grad()) {
          const RowMatrix xhat = inv_std.asDiagonal() * (xm2.colwise() - mean);
          g.grad_of(gamma).vec() += dm.cwiseProduct(xhat).rowwise().sum();
        }
        if (beta.requires_grad()) g.grad_of(beta).vec() += dm.rowwise().sum();
        if (x.requires_grad()) {
          MatrixMap gx(g.grad_of(x).data(), static_cast<Index>(channels), static_cast<Index>(per_channel));
          gx += (gamma.value().vec().cwiseProduct(inv_std)).asDiagonal() * dm;
        }
      });
}

}  // namespace

std::vector<Var> batchnorm(std::span<const Var> batch, Var gamma, Var beta, BatchNormStats& stats,
                           Mode mode) {
  if (batch.empty()) throw InvalidArgument("batchnorm: empty batch");
  const std::size_t channels = gamma.value().size();
  if (beta.value().size() != channels || stats.running_mean.size() != channels ||
      stats.running_var.size() != channels) {
    throw ShapeError("batchnorm: parameter/statistics width mismatch");
  }
  for (Var x : batch) {
    if (x.value().rank() != 3 || x.shape()[0] != channels) {
      throw ShapeError("batchnorm: input " + shape_str(x.shape()) + " for " +
                       std::to_string(channels) + " channels");
    }
  }
  std::vector<Var> out;
  out.reserve(batch.size());
  if (mode == Mode::kEval) {
    for (Var x : batch) out.push_back(batchnorm_eval(x, gamma, beta, stats));
    return out;
  }
  if (batch.size() < 2) throw InvalidArgument("batchnorm: train mode needs a batch of at least 2");
  const Var joined = concat_time(batch);
  const Var normed = batchnorm_train(joined, gamma, beta, stats);
  std::size_t offset = 0;
  for (Var x : batch) {
    out.push_back(slice_time(normed, offset, x.shape()[1]));
    offset += x.shape()[1];
  }
  return out;
}

namespace {

struct GruCache {
  RowMatrix z, r, candidate, prev;
};

}  // namespace

Var gru_scan(Var input_proj, Var w_hidden, bool reverse) {
  require_rank("gru_scan", input_proj, 2);
  const Tensor& xp = input_proj.value();
  const std::size_t steps = xp.rows();
  const std::size_t h3 = xp.cols();
  if (h3 % 3 != 0 || w_hidden.shape() != Shape{h3, h3 / 3}) {
    throw ShapeError("gru_scan: projections " + shape_str(xp.shape()) + " vs recurrent weights " +
                     shape_str(w_hidden.shape()));
  }
  const Index hidden = static_cast<Index>(h3 / 3);
  const auto xm = xp.mat();
  const auto um = w_hidden.value().mat();
  const auto u_zr = um.topRows(2 * hidden);
  const auto u_h = um.bottomRows(hidden);

  auto cache = std::make_shared<GruCache>();
  const Index t_count = static_cast<Index>(steps);
  cache->z.resize(t_count, hidden);
  cache->r.resize(t_count, hidden);
  cache->candidate.resize(t_count, hidden);
  cache->prev.resize(t_count, hidden);

  Tensor out({steps, static_cast<std::size_t>(hidden)});
  auto om = out.mat();
  RowVector h = RowVector::Zero(hidden);
  RowVector zr(2 * hidden);
  RowVector ah(hidden);
  for (Index s = 0; s < t_count; ++s) {
    const Index t = reverse ? t_count - 1 - s : s;
    cache->prev.row(t) = h;
    zr.noalias() = h * u_zr.transpose();
    zr += xm.row(t).head(2 * hidden);
    zr = zr.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    const RowVector rh = zr.tail(hidden).cwiseProduct(h);
    ah.noalias() = rh * u_h.transpose();
    ah += xm.row(t).tail(hidden);
    const RowVector cand = ah.array().tanh().matrix();
    h = (1.0 - zr.head(hidden).array()).matrix().cwiseProduct(h) + zr.head(hidden).cwiseProduct(cand);
    cache->z.row(t) = zr.head(hidden);
    cache->r.row(t) = zr.tail(hidden);
    cache->candidate.row(t) = cand;
    om.row(t) = h;
  }

  return graph_of(input_proj).record(
      std::move(out), {input_proj, w_hidden},
      [input_proj, w_hidden, cache, reverse, hidden, t_count](Graph& g, const Tensor&, const Tensor& dy) {
        const auto dm = dy.mat();
        const auto um2 = w_hidden.value().mat();
        const auto uzr = um2.topRows(2 * hidden);
        const auto uh = um2.bottomRows(hidden);
        RowMatrix da(t_count, 3 * hidden);
        RowVector carry = RowVector::Zero(hidden);
        for (Index s = t_count; s-- > 0;) {
          const Index t = reverse ? t_count - 1 - s : s;
          const auto z = cache->z.row(t).array();
          const auto r = cache->r.row(t).array();
          const auto cand = cache->candidate.row(t).array();
          const auto prev = cache->prev.row(t).array();
          const Eigen::ArrayXXd dh = (dm.row(t) + carry).array();
          const Eigen::ArrayXXd dz = dh * (cand - prev);
          const Eigen::ArrayXXd dah = dh * z * (1.0 - cand.square());
          RowVector dprev = (dh * (1.0 - z)).matrix();
          const RowVector drh = dah.matrix() * uh;
          const Eigen::ArrayXXd dr = drh.array() * prev;
          dprev += (drh.array() * r).matrix();
          da.row(t).head(hidden) = (dz * z * (1.0 - z)).matrix();
          da.row(t).segment(hidden, hidden) = (dr * r * (1.0 - r)).matrix();
          da.row(t).tail(hidden) = dah.matrix();
          dprev.noalias() += da.row(t).head(2 * hidden) * uzr;
          carry = dprev;
        }
        if (input_proj.requires_grad()) g.grad_of(input_proj).mat() += da;
        if (w_hidden.requires_grad()) {
          auto gu = g.grad_of(w_hidden).mat();
          gu.topRows(2 * hidden).noalias() += da.leftCols(2 * hidden).transpose() * cache->prev;
          const RowMatrix rh = cache->r.cwiseProduct(cache->prev);
          gu.bottomRows(hidden).noalias() += da.rightCols(hidden).transpose() * rh;
        }
      });
}

Var masked_softmax(Var logits, const Mask& mask) {
  const Tensor& lv = logits.value();
  if (lv.rank() < 1 || lv.rank() > 2) throw ShapeError("masked_softmax: rank-1 or rank-2 logits");
  const std::size_t rows = lv.rows();
  const std::size_t cols = lv.cols();
  if (mask.size() != cols) {
    throw ShapeError("masked_softmax: mask of " + std::to_string(mask.size()) + " for " +
                     std::to_string(cols) + " logits");
  }
  bool any = false;
  for (bool m : mask) any = any || m;
  if (!any) throw InvalidArgument("masked_softmax: every position is masked");

  Tensor out(lv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = lv.data() + i * cols;
    double* dst = out.data() + i * cols;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (mask[j]) peak = std::max(peak, row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      dst[j] = mask[j] ? std::exp(row[j] - peak) : 0.0;
      total += dst[j];
    }
    for (std::size_t j = 0; j < cols; ++j) dst[j] /= total;
  }
  return graph_of(logits).record(
      std::move(out), {logits}, [logits, rows, cols](Graph& g, const Tensor& y, const Tensor& dy) {
        Tensor& gl = g.grad_of(logits);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* yr = y.data() + i * cols;
          const double* dr = dy.data() + i * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += yr[j] * dr[j];
          double* gr = gl.data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) gr[j] += yr[j] * (dr[j] - dot);
        }
      });
}

Var bce_loss(Var probs, std::span<const double> labels, double clamp_eps) {
  const Tensor& pv = probs.value();
  if (labels.empty() || pv.empty()) throw InvalidArgument("bce_loss: empty batch");
  if (pv.size() != labels.size()) {
    throw ShapeError("bce_loss: " + std::to_string(pv.size()) + " probabilities for " +
                     std::to_string(labels.size()) + " labels");
  }
  const double batch = static_cast<double>(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(pv[i], clamp_eps, 1.0 - clamp_eps);
    total -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  Tensor out({1});
  out[0] = total / batch;
  std::vector<double> y(labels.begin(), labels.end());
  return graph_of(probs).record(
      std::move(out), {probs}, [probs, y = std::move(y), clamp_eps, batch](Graph& g, const Tensor&, const Tensor& dy) {
        const Tensor& p = probs.value();
        Tensor& gp = g.grad_of(probs);
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (p[i] < clamp_eps || p[i] > 1.0 - clamp_eps) continue;
          gp[i] += dy[0] * (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i])) / batch;
        }
      });
}

}  // namespace xkws
