// SPDX-License-Identifier: Apache-2.0
//
// Intermediate TTS representations used as text-encoder input.
//
//   tag  width  rows indexed by        source block
//   E1   512    characters (T_a)       character embedding
//   E2   512    characters (T_a)       encoder convolutions
//   E3   512    characters (T_a)       encoder Bi-LSTM
//   E4   512    decoder frames (T_b)   attention context
//   E5   512    decoder frames (T_b)   prenet
//   E6   512    decoder frames (T_b)   postnet
//   E7   80     decoder frames (T_b)   target mel-spectrogram
#pragma once

#include "xkws/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace xkws::embeddings {

enum class Tag : std::uint8_t { E1 = 1, E2, E3, E4, E5, E6, E7 };

std::size_t tag_width(Tag tag);
// True for E1-E3, whose rows correspond one-to-one with characters.
bool indexed_by_characters(Tag tag);
std::string tag_name(Tag tag);
const char* tag_description(Tag tag);
// Accepts "E1".."E7" (case-insensitive); throws InvalidArgument otherwise.
Tag parse_tag(std::string_view name);
std::optional<Tag> tag_from_byte(std::uint8_t byte);

inline constexpr std::size_t kSyntheticExpansion = 5;

struct TtsEmbeddingSequence {
  std::size_t rows() const { return values.rows(); }
  std::size_t cols() const { return values.cols(); }

  std::string keyword;
  Tag tag = Tag::E1;
  Tensor values;  // [T x D]
};

// Throws ValidationError when the width or (for E1-E3) row count disagrees
// with the tag.
void validate(const TtsEmbeddingSequence& seq);

// Layout, little-endian:
//   "TTSE" | u16 version=1 | u8 tag (1..7) | u32 keyword bytes | keyword UTF-8
//   | u32 rows | u32 cols | rows*cols f32 row-major
inline constexpr std::uint16_t kFormatVersion = 1;

void write_embedding(const TtsEmbeddingSequence& seq, const std::filesystem::path& path);
TtsEmbeddingSequence read_embedding(const std::filesystem::path& path);

struct EmbeddingHeader {
  std::uint16_t version = 0;
  Tag tag = Tag::E1;
  std::string keyword;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};
// Header only; the payload length is still checked.
EmbeddingHeader read_embedding_header(const std::filesystem::path& path);

// Deterministic stand-in for real TTS activations. For E1-E3 every character
// maps to one pseudo-random row that depends only on (character, tag, seed).
// For E4-E7 each character expands into kSyntheticExpansion frames that stay
// close to that character's row.
TtsEmbeddingSequence synth_pseudo_embedding(std::string_view keyword, Tag tag, std::uint64_t seed);

struct ManifestEntry {
  std::string keyword;
  Tag tag = Tag::E1;
  std::filesystem::path relative_path;
};

// UTF-8 TSV: keyword <TAB> tag <TAB> relative path, one line per file.
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

// File name used by generators: sanitised keyword, tag, ".ttse".
std::string embedding_file_name(std::string_view keyword, Tag tag);

}  // namespace xkws::embeddings
