// SPDX-License-Identifier: Apache-2.0
#include "xkws/data.hpp"

#include "xkws/errors.hpp"
#include "xkws/text.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

namespace xkws::data {
namespace {

std::string line_ref(const std::filesystem::path& path, std::size_t line_no) {
  return path.string() + ":" + std::to_string(line_no);
}

std::ifstream open_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  return in;
}

std::ofstream create_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  return out;
}

bool next_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

std::size_t parse_count(const std::string& text, const std::string& where, const char* field) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || text[0] == '-') {
    throw FormatError(where + ": " + field + ": expected a non-negative integer, got '" + text + "'");
  }
  return static_cast<std::size_t>(v);
}

// k distinct indices from [0, n), in draw order.
std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace

std::size_t levenshtein(std::string_view a, std::string_view b) {
  const std::u32string x = normalize_keyword(a);
  const std::u32string y = normalize_keyword(b);
  std::vector<std::size_t> prev(y.size() + 1), cur(y.size() + 1);
  for (std::size_t j = 0; j <= y.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= y.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

std::string keyword_key(std::string_view transcript) { return utf8_encode(normalize_keyword(transcript)); }

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::kPositive:
      return "positive";
    case Difficulty::kEasy:
      return "easy";
    case Difficulty::kHard:
      return "hard";
  }
  return "";
}

Difficulty parse_difficulty(std::string_view name) {
  if (name == "positive") return Difficulty::kPositive;
  if (name == "easy") return Difficulty::kEasy;
  if (name == "hard") return Difficulty::kHard;
  throw InvalidArgument("unknown difficulty '" + std::string(name) + "'");
}

UtteranceRecord make_record(std::string id, std::filesystem::path wav_path, std::string transcript) {
  UtteranceRecord r;
  r.word_length = word_count(transcript);
  if (r.word_length < 1 || r.word_length > 4) {
    throw ValidationError("utterance '" + id + "': transcript '" + transcript + "' has " +
                          std::to_string(r.word_length) + " words; expected 1-4");
  }
  r.id = std::move(id);
  r.wav_path = std::move(wav_path);
  r.transcript = std::move(transcript);
  return r;
}

std::vector<PairExample> EpisodeSet::pairs() const {
  std::vector<PairExample> out;
  out.reserve(episodes.size() * 2 * kPairsPerSide);
  for (const Episode& e : episodes) {
    out.insert(out.end(), e.positives.begin(), e.positives.end());
    out.insert(out.end(), e.negatives.begin(), e.negatives.end());
  }
  return out;
}

std::vector<std::string> distinct_keywords(std::span<const UtteranceRecord> records) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const UtteranceRecord& r : records) {
    std::string key = keyword_key(r.transcript);
    if (seen.insert(key).second) out.push_back(std::move(key));
  }
  return out;
}

EpisodeSet build_episodes(std::span<const UtteranceRecord> records, std::uint64_t rng_seed,
                          const EpisodeOptions& options) {
  std::map<std::string, std::vector<std::size_t>> by_keyword;
  for (std::size_t i = 0; i < records.size(); ++i) by_keyword[keyword_key(records[i].transcript)].push_back(i);
  if (by_keyword.size() < 2) {
    throw InvalidArgument("build_episodes: need at least 2 distinct keywords, got " +
                          std::to_string(by_keyword.size()));
  }
  const bool mark_oov = !options.training_vocabulary.empty();
  auto known = [&](const std::string& k) { return options.training_vocabulary.contains(k); };

  EpisodeSet out;
  Rng rng(rng_seed);
  for (const auto& [anchor, own] : by_keyword) {
    if (!options.anchors.empty() && !options.anchors.contains(anchor)) continue;
    if (own.size() < kPairsPerSide) {
      out.warnings.push_back("keyword '" + anchor + "' has " + std::to_string(own.size()) +
                             " utterances; skipped as anchor");
      continue;
    }
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (keyword_key(records[i].transcript) != anchor) others.push_back(i);
    }
    if (others.size() < kPairsPerSide) {
      out.warnings.push_back("keyword '" + anchor + "': fewer than 3 negative utterances; skipped");
      continue;
    }
    const std::size_t word_length = word_count(anchor);
    const std::size_t n_episodes =
        options.episodes_per_keyword > 0 ? options.episodes_per_keyword : own.size() / kPairsPerSide;
    // Disjoint triples from one shuffle, or independent draws per episode.
    const std::vector<std::size_t> order = sample_distinct(own.size(), own.size(), rng);
    for (std::size_t e = 0; e < n_episodes; ++e) {
      Episode ep;
      ep.anchor = anchor;
      const std::vector<std::size_t> pos =
          options.episodes_per_keyword > 0
              ? sample_distinct(own.size(), kPairsPerSide, rng)
              : std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(e * kPairsPerSide),
                                         order.begin() + static_cast<std::ptrdiff_t>((e + 1) * kPairsPerSide));
      for (std::size_t p : pos) {
        PairExample pe{records[own[p]].id, anchor, 1, Difficulty::kPositive, word_length, false};
        pe.oov = mark_oov && !known(anchor);
        ep.positives.push_back(std::move(pe));
      }
      for (std::size_t n : sample_distinct(others.size(), kPairsPerSide, rng)) {
        const UtteranceRecord& r = records[others[n]];
        const std::string audio_key = keyword_key(r.transcript);
        const std::size_t dist = levenshtein(anchor, audio_key);
        const bool hard = dist > 0 && dist <= static_cast<std::size_t>(std::max(options.hard_threshold, 0));
        PairExample pe{r.id, anchor, 0, hard ? Difficulty::kHard : Difficulty::kEasy, word_length, false};
        pe.oov = mark_oov && (!known(anchor) || !known(audio_key));
        ep.negatives.push_back(std::move(pe));
      }
      out.episodes.push_back(std::move(ep));
    }
  }
  return out;
}

CorpusSplit split_corpus(std::span<const UtteranceRecord> records, const std::set<std::string>& oov_keywords) {
  CorpusSplit split;
  std::map<std::string, std::size_t> ordinal;
  for (const UtteranceRecord& r : records) {
    const std::string key = keyword_key(r.transcript);
    const std::size_t i = ordinal[key]++;
    if (oov_keywords.contains(key) || i % 5 == 4) {
      split.test.push_back(r);
    } else if (i % 5 == 3) {
      split.validation.push_back(r);
    } else {
      split.train.push_back(r);
    }
  }
  return split;
}

void write_manifest(std::span<const UtteranceRecord> records, const std::filesystem::path& path) {
  std::ofstream out = create_text(path);
  out << "id\twav_path\ttranscript\n";
  for (const UtteranceRecord& r : records) {
    out << r.id << '\t' << r.wav_path.generic_string() << '\t' << r.transcript << '\n';
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

std::vector<UtteranceRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in = open_text(path);
  std::string line;
  if (!next_line(in, line) || line != "id\twav_path\ttranscript") {
    throw FormatError(line_ref(path, 1) + ": header: expected 'id<TAB>wav_path<TAB>transcript'");
  }
  std::vector<UtteranceRecord> out;
  std::set<std::string> ids;
  for (std::size_t line_no = 2; next_line(in, line); ++line_no) {
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 3) throw FormatError(line_ref(path, line_no) + ": expected 3 columns, got " + std::to_string(cols.size()));
    if (cols[0].empty()) throw FormatError(line_ref(path, line_no) + ": id: empty");
    if (!ids.insert(cols[0]).second) throw FormatError(line_ref(path, line_no) + ": id: duplicate '" + cols[0] + "'");
    try {
      out.push_back(make_record(cols[0], cols[1], cols[2]));
    } catch (const ValidationError& e) {
      throw ValidationError(line_ref(path, line_no) + ": transcript: " + e.what());
    }
  }
  return out;
}

std::filesystem::path resolve_wav(const UtteranceRecord& record, const std::filesystem::path& manifest_path) {
  if (record.wav_path.is_absolute()) return record.wav_path;
  return manifest_path.parent_path() / record.wav_path;
}

void write_keyword_list(std::span<const std::string> keywords, const std::filesystem::path& path) {
  std::ofstream out = create_text(path);
  for (const std::string& k : keywords) out << k << '\n';
}

std::vector<std::string> read_keyword_list(const std::filesystem::path& path) {
  std::ifstream in = open_text(path);
  std::vector<std::string> out;
  std::string line;
  while (next_line(in, line)) {
    if (!line.empty()) out.push_back(keyword_key(line));
  }
  return out;
}

namespace {
constexpr const char* kPairHeader = "audio_id\tkeyword\tlabel\tdifficulty\tword_length\toov";
}  // namespace

void write_pairs(std::span<const PairExample> pairs, const std::filesystem::path& path) {
  std::ofstream out = create_text(path);
  out << kPairHeader << '\n';
  for (const PairExample& p : pairs) {
    out << p.audio_id << '\t' << p.keyword << '\t' << p.label << '\t' << difficulty_name(p.difficulty) << '\t'
        << p.word_length << '\t' << (p.oov ? 1 : 0) << '\n';
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

std::vector<PairExample> read_pairs(const std::filesystem::path& path) {
  std::ifstream in = open_text(path);
  std::string line;
  if (!next_line(in, line) || line != kPairHeader) {
    throw FormatError(line_ref(path, 1) + ": header: expected '" + std::string(kPairHeader) + "'");
  }
  std::vector<PairExample> out;
  for (std::size_t line_no = 2; next_line(in, line); ++line_no) {
    if (line.empty()) continue;
    const std::string where = line_ref(path, line_no);
    const auto cols = split(line, '\t');
    if (cols.size() != 6) throw FormatError(where + ": expected 6 columns, got " + std::to_string(cols.size()));
    PairExample p;
    p.audio_id = cols[0];
    if (p.audio_id.empty()) throw FormatError(where + ": audio_id: empty");
    p.keyword = cols[1];
    if (p.keyword.empty()) throw FormatError(where + ": keyword: empty");
    if (cols[2] != "0" && cols[2] != "1") throw FormatError(where + ": label: expected 0 or 1, got '" + cols[2] + "'");
    p.label = cols[2] == "1" ? 1 : 0;
    try {
      p.difficulty = parse_difficulty(cols[3]);
    } catch (const InvalidArgument& e) {
      throw FormatError(where + ": difficulty: " + e.what());
    }
    if ((p.label == 1) != (p.difficulty == Difficulty::kPositive)) {
      throw FormatError(where + ": difficulty: '" + cols[3] + "' contradicts label " + cols[2]);
    }
    p.word_length = parse_count(cols[4], where, "word_length");
    if (p.word_length < 1 || p.word_length > 4) throw FormatError(where + ": word_length: expected 1-4");
    if (cols[5] != "0" && cols[5] != "1") throw FormatError(where + ": oov: expected 0 or 1, got '" + cols[5] + "'");
    p.oov = cols[5] == "1";
    out.push_back(std::move(p));
  }
  return out;
}

const dsp::MelSpectrogram& FeatureStore::mel(const std::string& audio_id) const {
  const auto it = mels.find(audio_id);
  if (it == mels.end()) throw LookupError("no audio features for id '" + audio_id + "'");
  return it->second;
}

const embeddings::TtsEmbeddingSequence& FeatureStore::text(const std::string& keyword) const {
  const auto it = texts.find(keyword);
  if (it == texts.end()) throw LookupError("no text embedding for keyword '" + keyword + "'");
  return it->second;
}

void add_mels(FeatureStore& store, std::span<const UtteranceRecord> records,
              const std::filesystem::path& manifest_path) {
  for (const UtteranceRecord& r : records) {
    const std::filesystem::path wav = resolve_wav(r, manifest_path);
    try {
      store.mels[r.id] = dsp::log_mel(dsp::load_wav(wav));
    } catch (const TooShortError& e) {
      throw ValidationError(wav.string() + ": " + e.what());
    } catch (const InvalidArgument& e) {
      throw ValidationError(wav.string() + ": sample_rate: " + e.what());
    }
  }
}

std::vector<Batch> batch_with_padding(std::span<const PairExample> pairs, const FeatureStore& store,
                                      std::size_t batch_size) {
  if (batch_size == 0) throw InvalidArgument("batch_with_padding: batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::span<const PairExample> group = pairs.subspan(start, std::min(batch_size, pairs.size() - start));
    std::vector<const dsp::MelSpectrogram*> mels;
    std::vector<const embeddings::TtsEmbeddingSequence*> texts;
    std::size_t n_max = 0, m_max = 0;
    for (const PairExample& p : group) {
      mels.push_back(&store.mel(p.audio_id));
      texts.push_back(&store.text(p.keyword));
      n_max = std::max(n_max, mels.back()->frames());
      m_max = std::max(m_max, texts.back()->rows());
      if (texts.back()->cols() != texts.front()->cols()) {
        throw ValidationError("batch mixes embedding widths " + std::to_string(texts.front()->cols()) + " and " +
                              std::to_string(texts.back()->cols()));
      }
    }
    const std::size_t b = group.size();
    const std::size_t width = texts.front()->cols();
    Batch batch;
    batch.mels = Tensor({b, n_max, dsp::kNumMels});
    batch.texts = Tensor({b, m_max, width});
    for (std::size_t i = 0; i < b; ++i) {
      const PairExample& p = group[i];
      batch.audio_ids.push_back(p.audio_id);
      batch.keywords.push_back(p.keyword);
      batch.labels.push_back(static_cast<double>(p.label));
      const Tensor& mv = mels[i]->values;
      std::copy(mv.data(), mv.data() + mv.size(), batch.mels.data() + i * n_max * dsp::kNumMels);
      batch.mel_masks.push_back(prefix_mask(mels[i]->frames(), n_max));
      const Tensor& tv = texts[i]->values;
      std::copy(tv.data(), tv.data() + tv.size(), batch.texts.data() + i * m_max * width);
      batch.text_masks.push_back(prefix_mask(texts[i]->rows(), m_max));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

std::span<const std::string_view> toy_word_list() {
  static const std::vector<std::string_view> words = [] {
    const std::vector<std::vector<std::string_view>> by_length = {
        {"on", "off", "madame", "modem", "stop", "go", "yes", "no", "up"},
        {"turn on", "turn off", "lights on", "lights off", "play music", "pause music"},
        {"open the door", "close the door", "turn it up", "turn it down", "call my mom"},
        {"turn the lights on", "turn the lights off", "set an alarm now", "play the next song", "what time is it"},
    };
    std::vector<std::string_view> out;
    for (std::size_t i = 0;; ++i) {
      bool any = false;
      for (const auto& list : by_length) {
        if (i < list.size()) {
          out.push_back(list[i]);
          any = true;
        }
      }
      if (!any) break;
    }
    return out;
  }();
  return words;
}

ToyCorpus synth_toy_corpus(std::size_t n_keywords, std::size_t utterances_per_keyword, std::uint64_t rng_seed) {
  const auto words = toy_word_list();
  if (n_keywords < 2) throw InvalidArgument("synth_toy_corpus: need at least 2 keywords");
  if (n_keywords > words.size()) {
    throw InvalidArgument("synth_toy_corpus: " + std::to_string(n_keywords) + " keywords requested; word list has " +
                          std::to_string(words.size()));
  }
  // Log-spaced grid, three slots per word, shuffled then dealt in triples.
  constexpr double kLowHz = 200.0, kHighHz = 6000.0;
  const std::size_t slots = 3 * words.size();
  std::vector<double> grid(slots);
  for (std::size_t i = 0; i < slots; ++i) {
    grid[i] = kLowHz * std::pow(kHighHz / kLowHz, static_cast<double>(i) / static_cast<double>(slots - 1));
  }
  Rng rng(rng_seed);
  const std::vector<std::size_t> deal = sample_distinct(slots, slots, rng);

  ToyCorpus corpus;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> length(kToyMinSamples,
                                                    static_cast<std::size_t>(kToyMaxSeconds * dsp::kSampleRate));
  for (std::size_t k = 0; k < n_keywords; ++k) {
    const std::string word(words[k]);
    std::array<double, 3> freqs{};
    for (std::size_t j = 0; j < 3; ++j) freqs[j] = grid[deal[3 * k + j]];
    std::sort(freqs.begin(), freqs.end());
    corpus.frequencies[word] = freqs;
    for (std::size_t u = 0; u < utterances_per_keyword; ++u) {
      char id[64];
      std::snprintf(id, sizeof id, "kw%02zu_u%03zu", k, u);
      const std::size_t n = length(rng);
      const double amplitude = 0.1 + 0.3 * unit(rng);
      dsp::Waveform wave;
      wave.samples.assign(n, 0.0);
      for (double f : freqs) {
        const double hz = f * (1.0 + kToyJitter * (2.0 * unit(rng) - 1.0));
        const double gain = amplitude * (0.6 + 0.4 * unit(rng)) / 3.0;
        const double phase = 2.0 * std::numbers::pi * unit(rng);
        for (std::size_t i = 0; i < n; ++i) {
          wave.samples[i] += gain * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / dsp::kSampleRate + phase);
        }
      }
      double power = 0.0;
      for (double s : wave.samples) power += s * s;
      power /= static_cast<double>(n);
      const double snr_db = kToyMinSnrDb + (kToyMaxSnrDb - kToyMinSnrDb) * unit(rng);
      const double noise_sd = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
      for (double& s : wave.samples) s += noise_sd * gauss(rng);
      corpus.records.push_back(make_record(id, std::filesystem::path("wav") / (std::string(id) + ".wav"), word));
      corpus.waveforms.push_back(std::move(wave));
    }
  }
  return corpus;
}

std::filesystem::path write_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "wav");
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    dsp::save_wav(corpus.waveforms[i], dir / corpus.records[i].wav_path);
  }
  const std::filesystem::path manifest = dir / "manifest.tsv";
  write_manifest(corpus.records, manifest);
  return manifest;
}

}  // namespace xkws::data
