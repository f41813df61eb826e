// SPDX-License-Identifier: Apache-2.0
#include "xkws/embeddings.hpp"

#include "xkws/errors.hpp"
#include "xkws/text.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace xkws::embeddings {
namespace {

static_assert(std::endian::native == std::endian::little, "file I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'T', 'S', 'E'};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  template <typename T>
  T take(const char* field) {
    T v;
    need(sizeof(T), field);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take_string(std::size_t n, const char* field) {
    need(n, field);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  const char* take_raw(std::size_t n, const char* field) {
    need(n, field);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(origin_ + ": truncated while reading " + field);
    }
  }

  std::vector<char> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

EmbeddingHeader parse_header(ByteReader& r, const std::string& origin) {
  const std::string magic = r.take_string(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(origin + ": bad magic, not a TTSE file");
  EmbeddingHeader h;
  h.version = r.take<std::uint16_t>("version");
  if (h.version != kFormatVersion) {
    throw FormatError(origin + ": unsupported version " + std::to_string(h.version));
  }
  const auto tag_byte = r.take<std::uint8_t>("tag");
  const auto tag = tag_from_byte(tag_byte);
  if (!tag) throw FormatError(origin + ": unknown tag byte " + std::to_string(tag_byte));
  h.tag = *tag;
  const auto key_len = r.take<std::uint32_t>("keyword length");
  h.keyword = r.take_string(key_len, "keyword");
  h.rows = r.take<std::uint32_t>("rows");
  h.cols = r.take<std::uint32_t>("cols");
  const std::size_t payload = static_cast<std::size_t>(h.rows) * h.cols * sizeof(float);
  if (r.remaining() != payload) {
    throw FormatError(origin + ": payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(payload));
  }
  return h;
}

void append(std::string& out, const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }

}  // namespace

std::size_t tag_width(Tag tag) { return tag == Tag::E7 ? 80 : 512; }

bool indexed_by_characters(Tag tag) { return tag == Tag::E1 || tag == Tag::E2 || tag == Tag::E3; }

std::string tag_name(Tag tag) { return "E" + std::to_string(static_cast<int>(tag)); }

const char* tag_description(Tag tag) {
  switch (tag) {
    case Tag::E1:
      return "CharEmbedding block output";
    case Tag::E2:
      return "Convolution block output";
    case Tag::E3:
      return "Bi-LSTM block output";
    case Tag::E4:
      return "Attention block output";
    case Tag::E5:
      return "Prenet block output";
    case Tag::E6:
      return "Postnet block output";
    case Tag::E7:
      return "Target Melspectrogram";
  }
  return "";
}

std::optional<Tag> tag_from_byte(std::uint8_t byte) {
  if (byte < 1 || byte > 7) return std::nullopt;
  return static_cast<Tag>(byte);
}

Tag parse_tag(std::string_view name) {
  if (name.size() == 2 && (name[0] == 'E' || name[0] == 'e') && name[1] >= '1' && name[1] <= '7') {
    return static_cast<Tag>(name[1] - '0');
  }
  throw InvalidArgument("unknown embedding tag '" + std::string(name) + "' (expected E1..E7)");
}

void validate(const TtsEmbeddingSequence& seq) {
  const std::string label = "embedding '" + seq.keyword + "' " + tag_name(seq.tag);
  if (seq.values.rank() != 2) throw ValidationError(label + ": values must be a matrix");
  if (seq.cols() != tag_width(seq.tag)) {
    throw ValidationError(label + ": width expected " + std::to_string(tag_width(seq.tag)) + ", actual " +
                          std::to_string(seq.cols()));
  }
  if (seq.rows() == 0) throw ValidationError(label + ": no rows");
  if (indexed_by_characters(seq.tag)) {
    const std::size_t chars = character_count(seq.keyword);
    if (seq.rows() != chars) {
      throw ValidationError(label + ": rows expected " + std::to_string(chars) + " (characters), actual " +
                            std::to_string(seq.rows()));
    }
  }
}

void write_embedding(const TtsEmbeddingSequence& seq, const std::filesystem::path& path) {
  try {
    validate(seq);
  } catch (const ValidationError& e) {
    throw InvalidArgument(e.what());
  }
  std::string out;
  append(out, kMagic, 4);
  const std::uint16_t version = kFormatVersion;
  append(out, &version, 2);
  const auto tag = static_cast<std::uint8_t>(seq.tag);
  append(out, &tag, 1);
  const auto key_len = static_cast<std::uint32_t>(seq.keyword.size());
  append(out, &key_len, 4);
  out += seq.keyword;
  const auto rows = static_cast<std::uint32_t>(seq.rows());
  const auto cols = static_cast<std::uint32_t>(seq.cols());
  append(out, &rows, 4);
  append(out, &cols, 4);
  for (double v : seq.values.values()) {
    const auto f = static_cast<float>(v);
    append(out, &f, 4);
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError(path.string() + ": cannot open for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError(path.string() + ": write failed");
}

EmbeddingHeader read_embedding_header(const std::filesystem::path& path) {
  ByteReader r(slurp(path), path.string());
  return parse_header(r, path.string());
}

TtsEmbeddingSequence read_embedding(const std::filesystem::path& path) {
  ByteReader r(slurp(path), path.string());
  const EmbeddingHeader h = parse_header(r, path.string());
  TtsEmbeddingSequence seq;
  seq.keyword = h.keyword;
  seq.tag = h.tag;
  seq.values = Tensor({h.rows, h.cols});
  const char* payload = r.take_raw(static_cast<std::size_t>(h.rows) * h.cols * sizeof(float), "payload");
  for (std::size_t i = 0; i < seq.values.size(); ++i) {
    float f;
    std::memcpy(&f, payload + i * sizeof(float), sizeof(float));
    seq.values[i] = static_cast<double>(f);
  }
  try {
    validate(seq);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return seq;
}

TtsEmbeddingSequence synth_pseudo_embedding(std::string_view keyword, Tag tag, std::uint64_t seed) {
  const std::u32string chars = normalize_keyword(keyword);
  if (chars.empty()) throw InvalidArgument("synth_pseudo_embedding: empty keyword");
  const std::size_t width = tag_width(tag);
  const std::uint64_t tag_seed = mix_seed(seed, static_cast<std::uint64_t>(tag));

  auto char_row = [&](char32_t c, std::uint64_t variant, double scale, double* dst) {
    std::mt19937_64 rng(mix_seed(mix_seed(tag_seed, static_cast<std::uint64_t>(c)), variant));
    std::normal_distribution<double> normal(0.0, scale);
    for (std::size_t j = 0; j < width; ++j) dst[j] += normal(rng);
  };

  TtsEmbeddingSequence seq;
  seq.keyword = std::string(keyword);
  seq.tag = tag;
  if (indexed_by_characters(tag)) {
    seq.values = Tensor({chars.size(), width});
    for (std::size_t i = 0; i < chars.size(); ++i) char_row(chars[i], 0, 1.0, seq.values.data() + i * width);
    return seq;
  }
  seq.values = Tensor({chars.size() * kSyntheticExpansion, width});
  for (std::size_t i = 0; i < chars.size(); ++i) {
    for (std::size_t k = 0; k < kSyntheticExpansion; ++k) {
      double* row = seq.values.data() + (i * kSyntheticExpansion + k) * width;
      char_row(chars[i], 0, 1.0, row);
      char_row(chars[i], k + 1, 0.25, row);
    }
  }
  return seq;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  for (const ManifestEntry& e : entries) {
    out << e.keyword << '\t' << tag_name(e.tag) << '\t' << e.relative_path.generic_string() << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 3) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated columns");
    }
    ManifestEntry e;
    e.keyword = cols[0];
    try {
      e.tag = parse_tag(cols[1]);
    } catch (const InvalidArgument& err) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": tag: " + err.what());
    }
    e.relative_path = cols[2];
    out.push_back(std::move(e));
  }
  return out;
}

std::string embedding_file_name(std::string_view keyword, Tag tag) {
  std::string stem;
  for (char c : keyword) {
    const auto u = static_cast<unsigned char>(c);
    if ((u >= 'a' && u <= 'z') || (u >= '0' && u <= '9')) {
      stem.push_back(c);
    } else if (u >= 'A' && u <= 'Z') {
      stem.push_back(static_cast<char>(u - 'A' + 'a'));
    } else {
      stem.push_back('_');
    }
  }
  std::ostringstream hash;
  std::uint64_t fnv = 0xcbf29ce484222325ULL;
  for (char c : keyword) fnv = (fnv ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  hash << std::hex << (fnv & 0xffffff);
  return stem + "-" + hash.str() + "." + tag_name(tag) + ".ttse";
}

}  // namespace xkws::embeddings
