// SPDX-License-Identifier: Apache-2.0
#include "xkws/errors.hpp"
#include "xkws/gradcheck.hpp"
#include "xkws/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace xkws::model {
namespace {

namespace fs = std::filesystem;

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Tensor t({rows, cols});
  for (double& v : t.values()) v = n(rng);
  return t;
}

void zero_all(KwsModel& m) {
  for (Parameter* p : m.parameters()) p->value.fill(0.0);
}

// Breaks the zero-bias symmetry of a fresh model so tests see non-trivial
// biases and batch-norm affine terms.
void perturb(KwsModel& m, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (Parameter* p : m.parameters()) {
    if (p->value.rank() == 1) {
      for (double& v : p->value.values()) v += n(rng);
    }
  }
}

TEST(TextEncode, E3InputGives128PerCharacter) {
  KwsModel m;
  Graph g;
  Rng rng(1);
  const Var out = text_encode(g, m, g.constant(random_matrix(5, 512, 1)), Mask(5, true), Mode::kEval, rng);
  EXPECT_EQ(out.shape(), (Shape{5, 128}));
}

TEST(TextEncode, RejectsWrongWidth) {
  KwsModel m;
  Graph g;
  Rng rng(1);
  EXPECT_THROW(text_encode(g, m, g.constant(random_matrix(5, 80, 1)), Mask(5, true), Mode::kEval, rng), ShapeError);
  KwsModel e7(ModelConfig{80, 0.2, 0});
  EXPECT_NO_THROW(text_encode(g, e7, g.constant(random_matrix(5, 80, 1)), Mask(5, true), Mode::kEval, rng));
}

TEST(TextEncode, EvalIsDeterministicTrainIsNot) {
  KwsModel m(ModelConfig{512, 0.2, 3});
  const Tensor x = random_matrix(4, 512, 2);
  auto run = [&](Mode mode, std::uint64_t seed) {
    Graph g;
    Rng rng(seed);
    return text_encode(g, m, g.constant(x), Mask(4, true), mode, rng).value();
  };
  EXPECT_EQ(run(Mode::kEval, 1), run(Mode::kEval, 2));
  EXPECT_NE(run(Mode::kTrain, 1), run(Mode::kTrain, 2));
  EXPECT_EQ(run(Mode::kTrain, 1), run(Mode::kTrain, 1));
}

TEST(ZeroNetwork, EncodersGiveZeroAndScoreIsHalf) {
  KwsModel m;
  zero_all(m);
  Graph g;
  Rng rng(1);
  const Var t = text_encode(g, m, g.constant(random_matrix(3, 512, 1)), Mask(3, true), Mode::kEval, rng);
  for (double v : t.value().values()) EXPECT_EQ(v, 0.0);
  const Var mel = g.constant(random_matrix(10, 80, 2));
  const Mask mask(10, true);
  const Var a = audio_encode(g, m, std::span(&mel, 1), std::span(&mask, 1), Mode::kEval, rng)[0];
  for (double v : a.value().values()) EXPECT_EQ(v, 0.0);
  const Var s = score_pair(g, m, mel, mask, g.constant(random_matrix(3, 512, 1)), Mask(3, true), Mode::kEval, rng);
  EXPECT_EQ(s.value()[0], 0.5);
}

TEST(AudioEncode, FrameCountsHalveRoundingUp) {
  KwsModel m;
  Rng rng(1);
  for (std::size_t n : {1u, 2u, 3u, 17u, 98u}) {
    Graph g;
    const Var mel = g.constant(random_matrix(n, 80, n));
    const Mask mask(n, true);
    const Var a = audio_encode(g, m, std::span(&mel, 1), std::span(&mask, 1), Mode::kEval, rng)[0];
    EXPECT_EQ(a.shape(), (Shape{(n + 1) / 2, 128})) << n;
  }
}

TEST(AudioEncode, TrainModeNeedsTwoUtterances) {
  KwsModel m;
  Graph g;
  Rng rng(1);
  const Var mels[] = {g.constant(random_matrix(6, 80, 1)), g.constant(random_matrix(9, 80, 2))};
  const Mask masks[] = {Mask(6, true), Mask(9, true)};
  const auto out = audio_encode(g, m, mels, masks, Mode::kTrain, rng);
  EXPECT_EQ(out[1].shape(), (Shape{5, 128}));
  EXPECT_THROW(audio_encode(g, m, std::span(mels, 1), std::span(masks, 1), Mode::kTrain, rng), InvalidArgument);
}

TEST(AudioMask, HalvesValidAndTotal) {
  EXPECT_EQ(audio_mask(prefix_mask(5, 8)), prefix_mask(3, 4));
  EXPECT_EQ(audio_mask(prefix_mask(1, 1)), prefix_mask(1, 1));
}

TEST(CrossAttend, SingleAudioPositionCopiesItsValue) {
  KwsModel m;
  perturb(m, 4);
  Graph g;
  const Var text = g.constant(random_matrix(3, 128, 1));
  const Var audio = g.constant(random_matrix(1, 128, 2));
  const Attention att = cross_attend(g, m, text, audio, Mask(1, true));
  const Var projected = dense_forward(g, audio, m.value);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(att.weights.value().at(i, 0), 1.0);
    for (std::size_t j = 0; j < 128; ++j) EXPECT_NEAR(att.context.value().at(i, j), projected.value().at(0, j), 1e-12);
  }
}

TEST(CrossAttend, EqualLogitsAverageProjectedValues) {
  KwsModel m;
  m.query.weight.value.fill(0.0);
  Graph g;
  const Var text = g.constant(random_matrix(2, 128, 1));
  const Var audio = g.constant(random_matrix(5, 128, 2));
  const Attention att = cross_attend(g, m, text, audio, Mask(5, true));
  const Var projected = dense_forward(g, audio, m.value);
  for (std::size_t j = 0; j < 128; ++j) {
    double mean = 0.0;
    for (std::size_t k = 0; k < 5; ++k) mean += projected.value().at(k, j) / 5.0;
    EXPECT_NEAR(att.context.value().at(1, j), mean, 1e-12);
  }
}

TEST(CrossAttend, MaskedPositionsGetZeroWeightAndRowsSumToOne) {
  KwsModel m;
  Graph g;
  const Var text = g.constant(random_matrix(4, 128, 1, 3.0));
  const Var audio = g.constant(random_matrix(7, 128, 2, 3.0));
  const Attention att = cross_attend(g, m, text, audio, prefix_mask(5, 7));
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      EXPECT_GE(att.weights.value().at(i, k), 0.0);
      total += att.weights.value().at(i, k);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(att.weights.value().at(i, 5), 0.0);
    EXPECT_EQ(att.weights.value().at(i, 6), 0.0);
  }
  EXPECT_THROW(cross_attend(g, m, text, audio, Mask(7, false)), InvalidArgument);
}

TEST(Discriminate, RangeAndPaddingInvariance) {
  KwsModel m;
  perturb(m, 5);
  Graph g;
  const Tensor ctx = random_matrix(4, 128, 3);
  const double base = discriminate(g, m, g.constant(ctx), Mask(4, true)).value()[0];
  EXPECT_GT(base, 0.0);
  EXPECT_LT(base, 1.0);
  Tensor padded({6, 128});
  std::copy(ctx.data(), ctx.data() + ctx.size(), padded.data());
  for (std::size_t j = 0; j < 128; ++j) padded.at(5, j) = 9.0;  // junk in masked rows
  EXPECT_EQ(discriminate(g, m, g.constant(padded), prefix_mask(4, 6)).value()[0], base);
}

TEST(ScorePair, PaddingAudioOrTextLeavesScoreUnchanged) {
  KwsModel m(ModelConfig{512, 0.2, 9});
  perturb(m, 6);
  const Tensor mel = random_matrix(13, 80, 1);
  const Tensor text = random_matrix(3, 512, 2);
  auto score = [&](const Tensor& a, const Mask& am, const Tensor& t, const Mask& tm) {
    Graph g;
    Rng rng(0);
    return score_pair(g, m, g.constant(a), am, g.constant(t), tm, Mode::kEval, rng).value()[0];
  };
  const double base = score(mel, Mask(13, true), text, Mask(3, true));
  Tensor mel_p = random_matrix(20, 80, 7);
  std::copy(mel.data(), mel.data() + mel.size(), mel_p.data());
  Tensor text_p = random_matrix(5, 512, 8);
  std::copy(text.data(), text.data() + text.size(), text_p.data());
  EXPECT_EQ(score(mel_p, prefix_mask(13, 20), text, Mask(3, true)), base);
  EXPECT_EQ(score(mel, Mask(13, true), text_p, prefix_mask(3, 5)), base);
  EXPECT_EQ(score(mel_p, prefix_mask(13, 20), text_p, prefix_mask(3, 5)), base);
}

TEST(ScorePair, BatchMatchesSinglePairsInEval) {
  KwsModel m(ModelConfig{512, 0.2, 2});
  perturb(m, 7);
  data::FeatureStore store;
  for (int i = 0; i < 3; ++i) store.mels["a" + std::to_string(i)].values = random_matrix(8 + 3 * i, 80, i);
  for (const char* kw : {"on", "stop"}) {
    store.texts[kw].keyword = kw;
    store.texts[kw].values = random_matrix(std::string(kw).size(), 512, std::string(kw).size());
  }
  std::vector<data::PairExample> pairs;
  for (int i = 0; i < 3; ++i) {
    for (const char* kw : {"on", "stop"}) pairs.push_back({"a" + std::to_string(i), kw, 1, data::Difficulty::kPositive, 1, false});
  }
  const auto batch = data::batch_with_padding(pairs, store, 16)[0];
  const std::vector<double> scores = score_batch(m, batch);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(scores[i], score_pair(m, store.mel(pairs[i].audio_id), store.text(pairs[i].keyword))) << i;
  }
}

TEST(ScorePair, ShapeSweepRuns) {
  KwsModel m(ModelConfig{512, 0.2, 1});
  for (std::size_t n : {1u, 2u, 7u, 31u, 60u}) {
    for (std::size_t t : {1u, 4u, 12u}) {
      embeddings::TtsEmbeddingSequence e{"x", embeddings::Tag::E1, random_matrix(t, 512, t)};
      dsp::MelSpectrogram mel{random_matrix(n, 80, n)};
      const double s = score_pair(m, mel, e);
      EXPECT_GT(s, 0.0);
      EXPECT_LT(s, 1.0);
    }
  }
}

TEST(GradCheck, FullModelEvalOnFourFramesThreeCharacters) {
  KwsModel m(ModelConfig{512, 0.2, 11});
  perturb(m, 8);
  const Tensor mel = random_matrix(4, 80, 1);
  const Tensor text = random_matrix(3, 512, 2);
  auto loss = [&](Graph& g) {
    Rng rng(0);
    const Var p = score_pair(g, m, g.constant(mel), Mask(4, true), g.constant(text), Mask(3, true), Mode::kEval, rng);
    const double label[] = {1.0};
    return bce_loss(p, label);
  };
  GradCheckOptions opts;
  opts.max_coords_per_param = 12;
  opts.seed = 3;
  const auto params = m.parameters();
  const GradCheckReport r = grad_check(loss, params, opts);
  for (const auto& p : r.params) EXPECT_LE(p.max_rel_error, 1e-4) << p.name;
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, TrainModeBatchThroughBatchNorm) {
  KwsModel m(ModelConfig{512, 0.0, 12});
  perturb(m, 9);
  data::FeatureStore store;
  store.mels["a"].values = random_matrix(4, 80, 1);
  store.mels["b"].values = random_matrix(3, 80, 2);
  store.texts["on"].values = random_matrix(2, 512, 3);
  store.texts["go"].values = random_matrix(2, 512, 4);
  const std::vector<data::PairExample> pairs{{"a", "on", 1, data::Difficulty::kPositive, 1, false},
                                             {"b", "on", 0, data::Difficulty::kEasy, 1, false},
                                             {"b", "go", 1, data::Difficulty::kPositive, 1, false}};
  const data::Batch batch = data::batch_with_padding(pairs, store, 8)[0];
  auto loss = [&](Graph& g) {
    Rng rng(0);
    return bce_loss(forward_batch(g, m, batch, Mode::kTrain, rng), batch.labels);
  };
  GradCheckOptions opts;
  opts.max_coords_per_param = 8;
  opts.seed = 4;
  const auto params = m.parameters();
  const GradCheckReport r = grad_check(loss, params, opts);
  for (const auto& p : r.params) EXPECT_LE(p.max_rel_error, 1e-4) << p.name;
}

TEST(Init, SeededAndXavierBounded) {
  KwsModel a(ModelConfig{512, 0.2, 5}), b(ModelConfig{512, 0.2, 5}), c(ModelConfig{512, 0.2, 6});
  EXPECT_EQ(a.audio_gru1.forward.w_input.value, b.audio_gru1.forward.w_input.value);
  EXPECT_NE(a.audio_gru1.forward.w_input.value, c.audio_gru1.forward.w_input.value);
  const double bound = xavier_bound(128, 128);
  for (double v : a.query.weight.value.values()) EXPECT_LE(std::abs(v), bound);
  for (double v : a.disc_gru.forward.bias.value.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(a.query.weight.value.shape(), (Shape{128, 128}));
  EXPECT_TRUE(a.query.bias.value.empty());
  EXPECT_EQ(a.disc_dense.weight.value.shape(), (Shape{1, 256}));
  EXPECT_EQ(a.audio_gru1.forward.w_input.value.shape(), (Shape{192, 64 * 80}));
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "xkws_model_test";
  fs::create_directories(dir);
  return dir / name;
}

TEST(Checkpoint, RoundTripIsBitwise) {
  KwsModel m(ModelConfig{80, 0.3, 21});
  perturb(m, 10);
  m.bn2.stats.running_mean.fill(0.25);
  save_checkpoint(m, temp_path("rt.ckpt"));
  KwsModel back = load_checkpoint(temp_path("rt.ckpt"));
  EXPECT_EQ(back.config().text_width, 80u);
  EXPECT_EQ(back.config().dropout, 0.3);
  EXPECT_EQ(back.config().seed, 21u);
  const auto sa = m.state(), sb = back.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].first, sb[i].first);
    EXPECT_EQ(*sa[i].second, *sb[i].second) << sa[i].first;
  }
  dsp::MelSpectrogram mel{random_matrix(9, 80, 1)};
  embeddings::TtsEmbeddingSequence e{"x", embeddings::Tag::E7, random_matrix(6, 80, 2)};
  EXPECT_EQ(score_pair(m, mel, e), score_pair(back, mel, e));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary | std::ios::trunc) << s; }

TEST(Checkpoint, CorruptionDiagnostics) {
  KwsModel m(ModelConfig{512, 0.2, 1});
  const fs::path p = temp_path("bad.ckpt");
  save_checkpoint(m, p);
  const std::string good = slurp(p);

  for (std::size_t keep : {std::size_t{3}, std::size_t{10}, std::size_t{200}, good.size() / 2, good.size() - 1}) {
    spit(p, good.substr(0, keep));
    EXPECT_THROW(load_checkpoint(p), FormatError) << keep;
  }
  std::string bad = good;
  bad[8] = 2;  // version
  spit(p, bad);
  EXPECT_THROW(load_checkpoint(p), FormatError);

  bad = good;
  const std::size_t at = bad.find("embed_dim") + std::string("embed_dim").size();
  bad[at] = 64;  // low byte of the value 128
  spit(p, bad);
  try {
    load_checkpoint(p);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("embed_dim"), std::string::npos) << e.what();
  }
  spit(p, "not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(p), FormatError);
}

}  // namespace
}  // namespace xkws::model
