// SPDX-License-Identifier: Apache-2.0
//
// Audio-text matching network: text encoder, audio encoder, cross-attention
// pattern extractor and recurrent discriminator.
//
// Embeddings are stored time-major, [positions x 128]. Every stage trims its
// input to the valid prefix of its mask and pads the result with zero rows,
// so right-padding never changes a score.
#pragma once

#include "xkws/data.hpp"
#include "xkws/dsp.hpp"
#include "xkws/embeddings.hpp"
#include "xkws/layers.hpp"
#include "xkws/ops.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace xkws::model {

inline constexpr std::size_t kEmbedDim = 128;
inline constexpr std::size_t kEncoderHidden = 64;
inline constexpr std::size_t kDiscriminatorHidden = 128;
inline constexpr std::size_t kConv1Channels = 32;
inline constexpr std::size_t kConv2Channels = 64;
inline constexpr std::size_t kConv1Stride = 2;
inline constexpr double kDefaultDropout = 0.2;

struct ModelConfig {
  std::size_t text_width = 512;  // 512 for E1-E6, 80 for E7
  double dropout = kDefaultDropout;
  std::uint64_t seed = 0;
};

class KwsModel {
 public:
  // Xavier-initialised weights, zero biases, unit BN scale; deterministic
  // in config.seed.
  explicit KwsModel(const ModelConfig& config = {});

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter*> parameters();
  // Trainable tensors plus BN running statistics, in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> state();
  std::size_t parameter_count();

  BiGruParams text_gru;
  DenseParams text_dense;

  Conv2dParams conv1;
  BatchNormParams bn1;
  Conv2dParams conv2;
  BatchNormParams bn2;
  BiGruParams audio_gru1;
  BiGruParams audio_gru2;
  DenseParams audio_dense;

  DenseParams query;
  DenseParams key;
  DenseParams value;

  BiGruParams disc_gru;
  DenseParams disc_dense;

 private:
  ModelConfig config_;
};

// [m x W] embedding rows -> [m x 128]. Throws ShapeError on a width that
// differs from config().text_width.
Var text_encode(Graph& g, KwsModel& m, Var embedding, const Mask& mask, Mode mode, Rng& rng);

// Batch of [n_i x 80] mel matrices -> [ceil(n_i / 2) x 128] each. Batch
// norm statistics span the whole batch in train mode, which needs at least
// two utterances.
std::vector<Var> audio_encode(Graph& g, KwsModel& m, std::span<const Var> mels, std::span<const Mask> masks,
                              Mode mode, Rng& rng);
// Mask over audio-embedding positions for a mel mask.
Mask audio_mask(const Mask& mel_mask);

struct Attention {
  Var context;  // [m x 128]
  Var weights;  // [m x n']
};

// Text positions query audio positions. Throws InvalidArgument when every
// audio position is masked.
Attention cross_attend(Graph& g, KwsModel& m, Var text, Var audio, const Mask& audio_mask);

// Probability in (0, 1) as a [1 x 1] value.
Var discriminate(Graph& g, KwsModel& m, Var context, const Mask& text_mask);

// Full pipeline over one pair.
Var score_pair(Graph& g, KwsModel& m, Var mel, const Mask& mel_mask, Var embedding, const Mask& text_mask,
               Mode mode, Rng& rng);
// Eval-mode convenience returning the score.
double score_pair(KwsModel& m, const dsp::MelSpectrogram& mel, const embeddings::TtsEmbeddingSequence& e);

// Scores a padded batch as a [B] vector. Each distinct audio id and keyword
// is encoded once, so batch norm sees every utterance once.
Var forward_batch(Graph& g, KwsModel& m, const data::Batch& batch, Mode mode, Rng& rng);
// Eval-mode scores for a batch.
std::vector<double> score_batch(KwsModel& m, const data::Batch& batch);

// Checkpoint layout (little-endian):
//   "XKWSCKPT" | u32 version | u32 constant count | constants
//   | u64 seed | f64 dropout | u32 tensor count | tensors
// constant: u32 name bytes | name | u64 value
// tensor:   u32 name bytes | name | u32 rank | u64 dims[rank] | f64 data
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(KwsModel& m, const std::filesystem::path& path);
// Throws FormatError on bad magic, version or truncation, and
// ValidationError naming any architecture constant that differs from this
// build.
KwsModel load_checkpoint(const std::filesystem::path& path);

}  // namespace xkws::model
