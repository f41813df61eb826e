// SPDX-License-Identifier: Apache-2.0
#include "xkws/grad_suite.hpp"

#include "xkws/layers.hpp"
#include "xkws/model.hpp"
#include "xkws/ops.hpp"
#include "xkws/text.hpp"

#include <random>

namespace xkws {
namespace {

Tensor normal_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.values()) v = n(rng);
  return t;
}

// Weighted sum with fixed random weights so every output coordinate matters.
Var probe(Var y, std::uint64_t seed) {
  Graph& g = y.graph();
  return sum(mul(y, g.constant(normal_tensor(y.shape(), seed))));
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, std::size_t model_coords) {
  std::vector<GradSuiteEntry> out;
  auto s = [&](std::uint64_t k) { return mix_seed(seed, k); };
  Rng rng(s(0));

  {
    Parameter x("x", normal_tensor({4, 5}, s(1)));
    DenseParams d("dense", 5, 3);
    d.init(rng);
    d.bias.value = normal_tensor({3}, s(2));
    std::vector<Parameter*> ps{&x, &d.weight, &d.bias};
    out.push_back({"dense", grad_check([&](Graph& g) { return probe(dense_forward(g, g.param(x), d), s(3)); }, ps)});
  }
  for (std::size_t stride : {1u, 2u}) {
    Parameter x("x", normal_tensor({2, 5, 4}, s(4)));
    Conv2dParams c("conv", 2, 3);
    c.init(rng);
    c.bias.value = normal_tensor({3}, s(5));
    std::vector<Parameter*> ps{&x, &c.kernels, &c.bias};
    out.push_back({"conv2d_stride" + std::to_string(stride), grad_check([&](Graph& g) {
                     return probe(conv2d(g.param(x), g.param(c.kernels), g.param(c.bias), stride), s(6));
                   }, ps)});
  }
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    Parameter a("a", normal_tensor({2, 3, 4}, s(7), 2.0));
    Parameter b("b", normal_tensor({2, 2, 4}, s(8), 2.0));
    BatchNormParams bn("bn", 2);
    bn.gamma.value = Tensor::vector({1.3, 0.7});
    bn.beta.value = Tensor::vector({0.1, -0.2});
    bn.stats.running_var = Tensor::vector({0.8, 1.9});
    std::vector<Parameter*> ps{&a, &b, &bn.gamma, &bn.beta};
    out.push_back({mode == Mode::kTrain ? "batchnorm_train" : "batchnorm_eval", grad_check([&](Graph& g) {
                     BatchNormStats stats = bn.stats;
                     const Var batch[] = {g.param(a), g.param(b)};
                     const auto y = batchnorm(batch, g.param(bn.gamma), g.param(bn.beta), stats, mode);
                     return add(probe(y[0], s(9)), probe(y[1], s(10)));
                   }, ps)});
  }
  {
    Parameter x("x", normal_tensor({6, 3}, s(11)));
    BiGruParams p("bigru", 3, 5);
    p.init(rng);
    p.forward.bias.value = normal_tensor({15}, s(12), 0.3);
    p.backward.bias.value = normal_tensor({15}, s(13), 0.3);
    std::vector<Parameter*> ps{&x};
    for (Parameter* q : p.parameters()) ps.push_back(q);
    Mask mask(6, true);
    mask[4] = mask[5] = false;
    out.push_back({"bigru", grad_check([&](Graph& g) { return probe(bigru_forward(g, g.param(x), p, mask), s(14)); }, ps)});
  }
  {
    Parameter x("x", normal_tensor({3, 5}, s(15)));
    std::vector<Parameter*> ps{&x};
    const Mask mask{true, false, true, true, false};
    out.push_back({"masked_softmax", grad_check([&](Graph& g) { return probe(masked_softmax(g.param(x), mask), s(16)); }, ps)});
  }
  {
    Parameter logits("logits", normal_tensor({6}, s(17)));
    std::vector<Parameter*> ps{&logits};
    const double labels[] = {1, 0, 0, 1, 1, 0};
    out.push_back({"bce_loss", grad_check([&](Graph& g) { return bce_loss(sigmoid(g.param(logits)), labels); }, ps)});
  }
  {
    model::KwsModel m(model::ModelConfig{512, model::kDefaultDropout, s(18)});
    // Non-zero biases so the check does not sit on the symmetric init.
    Rng prng(s(19));
    std::normal_distribution<double> n(0.0, 0.1);
    for (Parameter* p : m.parameters()) {
      if (p->value.rank() == 1) {
        for (double& v : p->value.values()) v += n(prng);
      }
    }
    const Tensor mel = normal_tensor({4, dsp::kNumMels}, s(20));
    const Tensor text = normal_tensor({3, 512}, s(21));
    GradCheckOptions opts;
    opts.max_coords_per_param = model_coords;
    opts.seed = s(22);
    const auto ps = m.parameters();
    out.push_back({"score_pair", grad_check([&](Graph& g) {
                     Rng drop(0);
                     const Var p = model::score_pair(g, m, g.constant(mel), Mask(4, true), g.constant(text),
                                                     Mask(3, true), Mode::kEval, drop);
                     const double label[] = {1.0};
                     return bce_loss(p, label);
                   }, ps, opts)});
  }
  return out;
}

}  // namespace xkws
