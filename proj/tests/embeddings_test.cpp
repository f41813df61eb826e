// SPDX-License-Identifier: Apache-2.0
#include "xkws/embeddings.hpp"
#include "xkws/errors.hpp"
#include "xkws/text.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace xkws::embeddings {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "xkws_embeddings_test";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t u32_at(const std::vector<char>& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[off + static_cast<std::size_t>(i)]);
  return v;
}

TEST(Tags, TableWidthsAndDomains) {
  for (Tag t : {Tag::E1, Tag::E2, Tag::E3, Tag::E4, Tag::E5, Tag::E6}) EXPECT_EQ(tag_width(t), 512u);
  EXPECT_EQ(tag_width(Tag::E7), 80u);
  EXPECT_TRUE(indexed_by_characters(Tag::E3));
  EXPECT_FALSE(indexed_by_characters(Tag::E4));
  EXPECT_EQ(parse_tag("e5"), Tag::E5);
  EXPECT_EQ(tag_name(Tag::E7), "E7");
  EXPECT_STREQ(tag_description(Tag::E6), "Postnet block output");
  EXPECT_THROW(parse_tag("E8"), InvalidArgument);
}

TEST(WriteEmbedding, HeaderIsBitExact) {
  const auto seq = synth_pseudo_embedding("hello", Tag::E3, 1);
  const fs::path p = temp_path("hello.E3.ttse");
  write_embedding(seq, p);
  const auto b = file_bytes(p);
  ASSERT_GE(b.size(), 20u);
  EXPECT_EQ(std::string(b.data(), 4), "TTSE");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(b[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(b[6]), 3);
  EXPECT_EQ(u32_at(b, 7), 5u);
  EXPECT_EQ(std::string(b.data() + 11, 5), "hello");
  EXPECT_EQ(u32_at(b, 16), 5u);
  EXPECT_EQ(u32_at(b, 20), 512u);
  EXPECT_EQ(b.size(), 24u + 5 * 512 * 4);
  const EmbeddingHeader h = read_embedding_header(p);
  EXPECT_EQ(h.rows, 5u);
  EXPECT_EQ(h.cols, 512u);
}

TEST(WriteEmbedding, E7HasEightyColumns) {
  const fs::path p = temp_path("hello.E7.ttse");
  write_embedding(synth_pseudo_embedding("hello", Tag::E7, 1), p);
  EXPECT_EQ(read_embedding_header(p).cols, 80u);
}

TEST(WriteEmbedding, RejectsMismatchedShape) {
  TtsEmbeddingSequence seq{"hello", Tag::E1, Tensor({4, 512})};
  EXPECT_THROW(write_embedding(seq, temp_path("bad.ttse")), InvalidArgument);
  seq.values = Tensor({5, 80});
  EXPECT_THROW(write_embedding(seq, temp_path("bad.ttse")), InvalidArgument);
}

TEST(ReadEmbedding, RoundTripEveryTagWithinFloatPrecision) {
  for (int t = 1; t <= 7; ++t) {
    const Tag tag = static_cast<Tag>(t);
    const auto seq = synth_pseudo_embedding("Turn On", tag, 42);
    const fs::path p = temp_path("rt" + std::to_string(t) + ".ttse");
    write_embedding(seq, p);
    const auto back = read_embedding(p);
    EXPECT_EQ(back.keyword, seq.keyword);
    EXPECT_EQ(back.tag, tag);
    ASSERT_EQ(back.values.shape(), seq.values.shape());
    for (std::size_t i = 0; i < seq.values.size(); ++i) {
      EXPECT_EQ(back.values[i], static_cast<double>(static_cast<float>(seq.values[i])));
    }
    // A second write of what was read is byte-identical.
    const fs::path p2 = temp_path("rt" + std::to_string(t) + "b.ttse");
    write_embedding(back, p2);
    EXPECT_EQ(file_bytes(p), file_bytes(p2));
  }
}

TEST(ReadEmbedding, CorruptMagicIsFormatError) {
  const fs::path p = temp_path("magic.ttse");
  write_embedding(synth_pseudo_embedding("on", Tag::E1, 1), p);
  auto b = file_bytes(p);
  b[1] = 'X';
  std::ofstream(p, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
  EXPECT_THROW(read_embedding(p), FormatError);
}

TEST(ReadEmbedding, TruncatedIsFormatError) {
  const fs::path p = temp_path("trunc.ttse");
  write_embedding(synth_pseudo_embedding("on", Tag::E1, 1), p);
  auto b = file_bytes(p);
  for (std::size_t keep : {3u, 9u, 17u, static_cast<unsigned>(b.size() - 1)}) {
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(keep));
    EXPECT_THROW(read_embedding(p), FormatError) << keep;
  }
}

// Writes a file by hand so that invalid shapes reach the reader.
void write_unchecked(const fs::path& p, const std::string& keyword, std::uint8_t tag, std::uint32_t rows,
                     std::uint32_t cols) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write("TTSE", 4);
  const std::uint16_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 2);
  out.write(reinterpret_cast<const char*>(&tag), 1);
  const auto len = static_cast<std::uint32_t>(keyword.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(keyword.data(), len);
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  const std::vector<float> payload(static_cast<std::size_t>(rows) * cols, 0.5f);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
}

TEST(ReadEmbedding, WrongWidthNamesExpectedAndActual) {
  const fs::path p = temp_path("width.ttse");
  write_unchecked(p, "on", 1, 2, 80);
  try {
    read_embedding(p);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("512"), std::string::npos) << msg;
    EXPECT_NE(msg.find("80"), std::string::npos) << msg;
  }
}

TEST(ReadEmbedding, CharacterIndexedRowsMustMatchKeyword) {
  const fs::path p = temp_path("rows.ttse");
  write_unchecked(p, "on", 2, 3, 512);
  EXPECT_THROW(read_embedding(p), ValidationError);
  write_unchecked(p, "on", 5, 3, 512);  // decoder-side tags carry any T_b
  EXPECT_NO_THROW(read_embedding(p));
}

TEST(SynthEmbedding, ShapesFollowExpansionRule) {
  EXPECT_EQ(synth_pseudo_embedding("on", Tag::E1, 3).values.shape(), (Shape{2, 512}));
  EXPECT_EQ(synth_pseudo_embedding("on", Tag::E5, 3).values.shape(), (Shape{10, 512}));
  EXPECT_EQ(synth_pseudo_embedding("on", Tag::E7, 3).values.shape(), (Shape{10, 80}));
  EXPECT_EQ(synth_pseudo_embedding("turn on", Tag::E2, 3).rows(), 7u);
}

TEST(SynthEmbedding, Deterministic) {
  EXPECT_EQ(synth_pseudo_embedding("madame", Tag::E4, 9).values, synth_pseudo_embedding("madame", Tag::E4, 9).values);
  EXPECT_NE(synth_pseudo_embedding("madame", Tag::E4, 9).values, synth_pseudo_embedding("madame", Tag::E4, 10).values);
}

TEST(SynthEmbedding, SharedCharactersShareRows) {
  const auto a = synth_pseudo_embedding("modem", Tag::E1, 5);
  const auto b = synth_pseudo_embedding("mode", Tag::E1, 5);
  const auto c = synth_pseudo_embedding("Madame", Tag::E1, 5);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t j = 0; j < 512; ++j) ASSERT_EQ(a.values.at(r, j), b.values.at(r, j));
  }
  // 'm' is row 0 of both "modem" and "madame" (case-folded), and row 4 of "madame".
  for (std::size_t j = 0; j < 512; ++j) {
    ASSERT_EQ(a.values.at(0, j), c.values.at(0, j));
    ASSERT_EQ(c.values.at(0, j), c.values.at(4, j));
  }
  EXPECT_NE(a.values.at(1, 0), a.values.at(0, 0));
}

TEST(SynthEmbedding, EmptyKeywordThrows) { EXPECT_THROW(synth_pseudo_embedding("", Tag::E1, 1), InvalidArgument); }

TEST(Manifest, RoundTripAndErrors) {
  const fs::path p = temp_path("manifest.tsv");
  const std::vector<ManifestEntry> entries{{"on", Tag::E1, "on.E1.ttse"}, {"turn off", Tag::E7, "sub/turn_off.E7.ttse"}};
  write_manifest(entries, p);
  const auto back = read_manifest(p);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].keyword, "turn off");
  EXPECT_EQ(back[1].tag, Tag::E7);
  EXPECT_EQ(back[1].relative_path, fs::path("sub/turn_off.E7.ttse"));
  std::ofstream(p) << "on\tE9\tx.ttse\n";
  EXPECT_THROW(read_manifest(p), FormatError);
  std::ofstream(p) << "on\tE1\n";
  EXPECT_THROW(read_manifest(p), FormatError);
}

TEST(Text, Utf8CountsScalarsAndLowercases) {
  EXPECT_EQ(character_count("Turn On"), 7u);
  EXPECT_EQ(character_count("caf\xC3\xA9"), 4u);
  EXPECT_EQ(utf8_encode(normalize_keyword("MaDaMe")), "madame");
  EXPECT_EQ(utf8_decode(utf8_encode(U"é中\U0001F600")), U"é中\U0001F600");
  EXPECT_THROW(utf8_decode("\xC3"), InvalidArgument);
  EXPECT_EQ(word_count("  turn the  lights on "), 4u);
}

}  // namespace
}  // namespace xkws::embeddings
