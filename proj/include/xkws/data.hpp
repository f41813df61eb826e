// SPDX-License-Identifier: Apache-2.0
//
// Corpus records, episode construction, pair files, feature stores and
// padded batches. Keywords are compared after normalisation (ASCII
// lowercase, spaces kept).
#pragma once

#include "xkws/dsp.hpp"
#include "xkws/embeddings.hpp"
#include "xkws/ops.hpp"
#include "xkws/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xkws::data {

inline constexpr std::size_t kPairsPerSide = 3;
inline constexpr int kDefaultHardThreshold = 3;

// Edit distance with unit costs over normalised code points.
std::size_t levenshtein(std::string_view a, std::string_view b);

// Normalised keyword as UTF-8.
std::string keyword_key(std::string_view transcript);

enum class Difficulty { kPositive, kEasy, kHard };

const char* difficulty_name(Difficulty d);
Difficulty parse_difficulty(std::string_view name);

struct UtteranceRecord {
  std::string id;
  std::filesystem::path wav_path;
  std::string transcript;
  std::size_t word_length = 0;
};

// Builds a record, deriving word_length. Throws ValidationError unless the
// transcript has 1-4 words.
UtteranceRecord make_record(std::string id, std::filesystem::path wav_path, std::string transcript);

struct PairExample {
  std::string audio_id;
  std::string keyword;
  int label = 0;
  Difficulty difficulty = Difficulty::kEasy;
  std::size_t word_length = 0;
  bool oov = false;

  bool operator==(const PairExample&) const = default;
};

struct Episode {
  std::string anchor;
  std::vector<PairExample> positives;
  std::vector<PairExample> negatives;
};

struct EpisodeOptions {
  int hard_threshold = kDefaultHardThreshold;
  // 0: floor(utterances / 3) episodes over disjoint positive triples.
  // Otherwise that many episodes, each drawing 3 distinct positives.
  std::size_t episodes_per_keyword = 0;
  // Restricts anchors; empty means every keyword.
  std::set<std::string> anchors;
  // When non-empty, a pair is OOV if its text or its audio's keyword is
  // outside this set.
  std::set<std::string> training_vocabulary;
};

struct EpisodeSet {
  std::vector<Episode> episodes;
  std::vector<std::string> warnings;

  // Episode order, positives before negatives within each episode.
  std::vector<PairExample> pairs() const;
};

// Throws InvalidArgument with fewer than 2 distinct keywords.
EpisodeSet build_episodes(std::span<const UtteranceRecord> records, std::uint64_t rng_seed,
                          const EpisodeOptions& options = {});

// Train/validation/test partition. Within each keyword, utterance ordinal i
// goes to validation when i % 5 == 3, test when i % 5 == 4, else train.
// Every utterance of an OOV keyword goes to test.
struct CorpusSplit {
  std::vector<UtteranceRecord> train;
  std::vector<UtteranceRecord> validation;
  std::vector<UtteranceRecord> test;
};

CorpusSplit split_corpus(std::span<const UtteranceRecord> records, const std::set<std::string>& oov_keywords = {});

std::vector<std::string> distinct_keywords(std::span<const UtteranceRecord> records);

// Manifest: UTF-8 TSV with header "id<TAB>wav_path<TAB>transcript".
// wav_path is stored as written; resolve_wav joins relative paths to the
// manifest directory.
void write_manifest(std::span<const UtteranceRecord> records, const std::filesystem::path& path);
std::vector<UtteranceRecord> read_manifest(const std::filesystem::path& path);
std::filesystem::path resolve_wav(const UtteranceRecord& record, const std::filesystem::path& manifest_path);

// One keyword per line.
void write_keyword_list(std::span<const std::string> keywords, const std::filesystem::path& path);
std::vector<std::string> read_keyword_list(const std::filesystem::path& path);

// Pair TSV: header, then one row per pair:
//   audio_id keyword label difficulty word_length oov
void write_pairs(std::span<const PairExample> pairs, const std::filesystem::path& path);
std::vector<PairExample> read_pairs(const std::filesystem::path& path);

struct FeatureStore {
  std::map<std::string, dsp::MelSpectrogram> mels;                 // by audio id
  std::map<std::string, embeddings::TtsEmbeddingSequence> texts;  // by keyword

  const dsp::MelSpectrogram& mel(const std::string& audio_id) const;
  const embeddings::TtsEmbeddingSequence& text(const std::string& keyword) const;
};

// Computes log-mel features for every record.
void add_mels(FeatureStore& store, std::span<const UtteranceRecord> records,
              const std::filesystem::path& manifest_path);

struct Batch {
  std::size_t size() const { return labels.size(); }

  std::vector<std::string> audio_ids;
  std::vector<std::string> keywords;
  Tensor mels;   // [B x N_max x 80]
  std::vector<Mask> mel_masks;
  Tensor texts;  // [B x M_max x W]
  std::vector<Mask> text_masks;
  std::vector<double> labels;
};

// Consecutive groups of batch_size pairs, each right-padded to its own
// maxima. Throws LookupError naming a missing audio id or keyword.
std::vector<Batch> batch_with_padding(std::span<const PairExample> pairs, const FeatureStore& store,
                                      std::size_t batch_size);

// Toy corpus: each keyword is a fixed triple of simultaneous sinusoids.
struct ToyCorpus {
  std::vector<UtteranceRecord> records;
  std::vector<dsp::Waveform> waveforms;  // parallel to records
  std::map<std::string, std::array<double, 3>> frequencies;
};

inline constexpr double kToyMinSeconds = 0.5;
inline constexpr double kToyMaxSeconds = 1.0;
inline constexpr double kToyMinSnrDb = 20.0;
inline constexpr double kToyMaxSnrDb = 30.0;
inline constexpr double kToyJitter = 0.01;
// Shortest utterance in samples; the smallest length >= 0.5 s that yields
// at least 50 frames.
inline constexpr std::size_t kToyMinSamples = dsp::kWindowLength + 49 * dsp::kHopLength;

// Keywords in the order the generator takes them: round-robin over word
// lengths 1-4, with near-homophone pairs adjacent within each length.
std::span<const std::string_view> toy_word_list();

// Throws InvalidArgument when n_keywords < 2 or exceeds the word list.
ToyCorpus synth_toy_corpus(std::size_t n_keywords, std::size_t utterances_per_keyword, std::uint64_t rng_seed);

// Writes wav/<id>.wav files and manifest.tsv under `dir`; returns the
// manifest path.
std::filesystem::path write_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir);

}  // namespace xkws::data
