// SPDX-License-Identifier: Apache-2.0
#include "xkws/model.hpp"

#include "xkws/errors.hpp"

#include <cmath>
#include <map>

namespace xkws::model {
namespace {

Var encoder_dropout(Var x, const KwsModel& m, Mode mode, Rng& rng) {
  return dropout(x, m.config().dropout, mode, rng);
}

Var trim(Var x, std::size_t valid) { return valid == x.value().rows() ? x : slice_rows(x, 0, valid); }

Var pad(Var x, std::size_t total) { return x.value().rows() == total ? x : pad_rows(x, total); }

std::size_t require_valid(const Mask& mask, const char* what) {
  const std::size_t valid = valid_prefix_length(mask);
  if (valid == 0) throw InvalidArgument(std::string(what) + ": every position is masked");
  return valid;
}

// Rows [0, valid) of slice `i` of a rank-3 block.
Tensor block_rows(const Tensor& block, std::size_t i, std::size_t valid) {
  const std::size_t width = block.dim(2);
  const double* src = block.data() + i * block.dim(1) * width;
  return Tensor({valid, width}, std::vector<double>(src, src + valid * width));
}

}  // namespace

KwsModel::KwsModel(const ModelConfig& config)
    : text_gru("text.gru", config.text_width, kEncoderHidden),
      text_dense("text.dense", 2 * kEncoderHidden, kEmbedDim),
      conv1("audio.conv1", 1, kConv1Channels),
      bn1("audio.bn1", kConv1Channels),
      conv2("audio.conv2", kConv1Channels, kConv2Channels),
      bn2("audio.bn2", kConv2Channels),
      audio_gru1("audio.gru1", kConv2Channels * dsp::kNumMels, kEncoderHidden),
      audio_gru2("audio.gru2", 2 * kEncoderHidden, kEncoderHidden),
      audio_dense("audio.dense", 2 * kEncoderHidden, kEmbedDim),
      query("attention.query", kEmbedDim, kEmbedDim, false),
      key("attention.key", kEmbedDim, kEmbedDim, false),
      value("attention.value", kEmbedDim, kEmbedDim, false),
      disc_gru("discriminator.gru", kEmbedDim, kDiscriminatorHidden),
      disc_dense("discriminator.dense", 2 * kDiscriminatorHidden, 1),
      config_(config) {
  if (config.text_width == 0) throw InvalidArgument("model: text_width must be positive");
  if (!(config.dropout >= 0.0 && config.dropout < 1.0)) throw InvalidArgument("model: dropout must be in [0, 1)");
  Rng rng(config.seed);
  text_gru.init(rng);
  text_dense.init(rng);
  conv1.init(rng);
  conv2.init(rng);
  audio_gru1.init(rng);
  audio_gru2.init(rng);
  audio_dense.init(rng);
  query.init(rng);
  key.init(rng);
  value.init(rng);
  disc_gru.init(rng);
  disc_dense.init(rng);
}

std::vector<Parameter*> KwsModel::parameters() {
  std::vector<Parameter*> out;
  auto add = [&](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  add(text_gru.parameters());
  add(text_dense.parameters());
  add(conv1.parameters());
  add(bn1.parameters());
  add(conv2.parameters());
  add(bn2.parameters());
  add(audio_gru1.parameters());
  add(audio_gru2.parameters());
  add(audio_dense.parameters());
  add(query.parameters());
  add(key.parameters());
  add(value.parameters());
  add(disc_gru.parameters());
  add(disc_dense.parameters());
  return out;
}

std::vector<std::pair<std::string, Tensor*>> KwsModel::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (Parameter* p : parameters()) out.emplace_back(p->name, &p->value);
  out.emplace_back("audio.bn1.running_mean", &bn1.stats.running_mean);
  out.emplace_back("audio.bn1.running_var", &bn1.stats.running_var);
  out.emplace_back("audio.bn2.running_mean", &bn2.stats.running_mean);
  out.emplace_back("audio.bn2.running_var", &bn2.stats.running_var);
  return out;
}

std::size_t KwsModel::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.size();
  return n;
}

Var text_encode(Graph& g, KwsModel& m, Var embedding, const Mask& mask, Mode mode, Rng& rng) {
  const Tensor& e = embedding.value();
  if (e.rank() != 2 || e.cols() != m.config().text_width) {
    throw ShapeError("text_encode: expected [m x " + std::to_string(m.config().text_width) + "], got " +
                     shape_str(e.shape()));
  }
  if (mask.size() != e.rows()) throw InvalidArgument("text_encode: mask length differs from row count");
  const std::size_t rows = e.rows();
  const std::size_t valid = require_valid(mask, "text_encode");
  Var x = trim(embedding, valid);
  x = bigru_forward(g, x, m.text_gru, Mask(valid, true));
  x = encoder_dropout(x, m, mode, rng);
  x = dense_forward(g, x, m.text_dense);
  x = encoder_dropout(x, m, mode, rng);
  return pad(x, rows);
}

Mask audio_mask(const Mask& mel_mask) {
  const std::size_t valid = valid_prefix_length(mel_mask);
  return prefix_mask(conv_output_length(valid, kConv1Stride), conv_output_length(mel_mask.size(), kConv1Stride));
}

std::vector<Var> audio_encode(Graph& g, KwsModel& m, std::span<const Var> mels, std::span<const Mask> masks,
                              Mode mode, Rng& rng) {
  if (mels.size() != masks.size()) throw InvalidArgument("audio_encode: one mask per mel required");
  if (mels.empty()) throw InvalidArgument("audio_encode: empty batch");
  const std::size_t b = mels.size();
  std::vector<std::size_t> totals(b);
  std::vector<Var> maps(b);
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor& mel = mels[i].value();
    if (mel.rank() != 2 || mel.cols() != dsp::kNumMels) {
      throw ShapeError("audio_encode: expected [n x 80] mel, got " + shape_str(mel.shape()));
    }
    if (masks[i].size() != mel.rows()) throw InvalidArgument("audio_encode: mask length differs from frame count");
    totals[i] = conv_output_length(mel.rows(), kConv1Stride);
    const std::size_t valid = require_valid(masks[i], "audio_encode");
    maps[i] = reshape(trim(mels[i], valid), {1, valid, dsp::kNumMels});
  }

  auto conv_block = [&](Conv2dParams& conv, BatchNormParams& bn, std::size_t stride) {
    const Var k = g.param(conv.kernels), bias = g.param(conv.bias);
    for (Var& x : maps) x = conv2d(x, k, bias, stride);
    maps = batchnorm(maps, g.param(bn.gamma), g.param(bn.beta), bn.stats, mode);
    for (Var& x : maps) x = encoder_dropout(leaky_relu(x), m, mode, rng);
  };
  conv_block(m.conv1, m.bn1, kConv1Stride);
  conv_block(m.conv2, m.bn2, 1);

  std::vector<Var> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    Var x = channels_to_frames(maps[i]);
    const Mask all(x.value().rows(), true);
    x = encoder_dropout(bigru_forward(g, x, m.audio_gru1, all), m, mode, rng);
    x = encoder_dropout(bigru_forward(g, x, m.audio_gru2, all), m, mode, rng);
    x = encoder_dropout(dense_forward(g, x, m.audio_dense), m, mode, rng);
    out[i] = pad(x, totals[i]);
  }
  return out;
}

Attention cross_attend(Graph& g, KwsModel& m, Var text, Var audio, const Mask& mask) {
  const Tensor& a = audio.value();
  if (text.value().rank() != 2 || text.value().cols() != kEmbedDim || a.rank() != 2 || a.cols() != kEmbedDim) {
    throw ShapeError("cross_attend: expected 128-wide embeddings, got " + shape_str(text.value().shape()) + " and " +
                     shape_str(a.shape()));
  }
  if (mask.size() != a.rows()) throw InvalidArgument("cross_attend: mask length differs from audio positions");
  const std::size_t positions = a.rows();
  const std::size_t rows = text.value().rows();
  const std::size_t valid = require_valid(mask, "cross_attend");
  const Var audio_valid = trim(audio, valid);
  const Var q = dense_forward(g, text, m.query);
  const Var k = dense_forward(g, audio_valid, m.key);
  const Var v = dense_forward(g, audio_valid, m.value);
  const Var logits = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(kEmbedDim)));
  const Var weights = masked_softmax(logits, Mask(valid, true));
  Attention out;
  out.context = matmul(weights, v);
  if (valid == positions) {
    out.weights = weights;
  } else {
    const Var parts[] = {weights, g.constant(Tensor({rows, positions - valid}))};
    out.weights = concat_cols(parts);
  }
  return out;
}

Var discriminate(Graph& g, KwsModel& m, Var context, const Mask& text_mask) {
  const Tensor& c = context.value();
  if (c.rank() != 2 || c.cols() != kEmbedDim) {
    throw ShapeError("discriminate: expected [m x 128] context, got " + shape_str(c.shape()));
  }
  if (text_mask.size() != c.rows()) throw InvalidArgument("discriminate: mask length differs from context rows");
  const std::size_t valid = require_valid(text_mask, "discriminate");
  const Var x = trim(context, valid);
  GruParams& fwd = m.disc_gru.forward;
  GruParams& bwd = m.disc_gru.backward;
  const Var states_f = gru_scan(dense(x, g.param(fwd.w_input), g.param(fwd.bias)), g.param(fwd.w_hidden), false);
  const Var states_b = gru_scan(dense(x, g.param(bwd.w_input), g.param(bwd.bias)), g.param(bwd.w_hidden), true);
  // Forward state after the last real position, backward state after
  // reading back to position 0.
  const Var ends[] = {slice_rows(states_f, valid - 1, 1), slice_rows(states_b, 0, 1)};
  return sigmoid(dense_forward(g, concat_cols(ends), m.disc_dense));
}

Var score_pair(Graph& g, KwsModel& m, Var mel, const Mask& mel_mask, Var embedding, const Mask& text_mask,
               Mode mode, Rng& rng) {
  const Var text = text_encode(g, m, embedding, text_mask, mode, rng);
  const Var mels[] = {mel};
  const Mask masks[] = {mel_mask};
  const Var audio = audio_encode(g, m, mels, masks, mode, rng)[0];
  const Attention att = cross_attend(g, m, text, audio, audio_mask(mel_mask));
  return discriminate(g, m, att.context, text_mask);
}

double score_pair(KwsModel& m, const dsp::MelSpectrogram& mel, const embeddings::TtsEmbeddingSequence& e) {
  Graph g(false);
  Rng rng(0);
  const Var out = score_pair(g, m, g.constant(mel.values), Mask(mel.frames(), true), g.constant(e.values),
                             Mask(e.rows(), true), Mode::kEval, rng);
  return out.value()[0];
}

Var forward_batch(Graph& g, KwsModel& m, const data::Batch& batch, Mode mode, Rng& rng) {
  const std::size_t b = batch.size();
  if (b == 0) throw InvalidArgument("forward_batch: empty batch");
  std::map<std::string, std::size_t> audio_slot, text_slot;
  std::vector<std::size_t> audio_of(b), text_of(b);
  std::vector<Var> mels, texts_in;
  std::vector<Mask> mel_masks;
  std::vector<std::size_t> text_lengths;
  for (std::size_t i = 0; i < b; ++i) {
    auto [a_it, a_new] = audio_slot.emplace(batch.audio_ids[i], mels.size());
    if (a_new) {
      const std::size_t valid = require_valid(batch.mel_masks[i], "forward_batch");
      mels.push_back(g.constant(block_rows(batch.mels, i, valid)));
      mel_masks.emplace_back(valid, true);
    }
    audio_of[i] = a_it->second;
    auto [t_it, t_new] = text_slot.emplace(batch.keywords[i], texts_in.size());
    if (t_new) {
      const std::size_t valid = require_valid(batch.text_masks[i], "forward_batch");
      texts_in.push_back(g.constant(block_rows(batch.texts, i, valid)));
      text_lengths.push_back(valid);
    }
    text_of[i] = t_it->second;
  }
  const std::vector<Var> audio = audio_encode(g, m, mels, mel_masks, mode, rng);
  std::vector<Var> text;
  for (std::size_t t = 0; t < texts_in.size(); ++t) {
    text.push_back(text_encode(g, m, texts_in[t], Mask(text_lengths[t], true), mode, rng));
  }
  std::vector<Var> scores;
  for (std::size_t i = 0; i < b; ++i) {
    const Var a = audio[audio_of[i]];
    const Var t = text[text_of[i]];
    const Attention att = cross_attend(g, m, t, a, Mask(a.value().rows(), true));
    scores.push_back(discriminate(g, m, att.context, Mask(t.value().rows(), true)));
  }
  return reshape(concat_rows(scores), {b});
}

std::vector<double> score_batch(KwsModel& m, const data::Batch& batch) {
  Graph g(false);
  Rng rng(0);
  const Var probs = forward_batch(g, m, batch, Mode::kEval, rng);
  const auto v = probs.value().values();
  return {v.begin(), v.end()};
}

}  // namespace xkws::model
