// SPDX-License-Identifier: Apache-2.0
#include "xkws/harness.hpp"

#include "xkws/data.hpp"
#include "xkws/embeddings.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace xkws::harness {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "xkws_harness_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

// Corpus, E1 embeddings and pair files for 4 keywords x 15 utterances.
struct Prepared {
  fs::path dir, manifest, embeddings, pairs;
};

Prepared prepare(const std::string& name) {
  Prepared p;
  p.dir = scratch(name);
  p.manifest = p.dir / "corpus" / kCorpusManifest;
  p.embeddings = p.dir / "emb" / kEmbeddingManifest;
  p.pairs = p.dir / "pairs";
  EXPECT_EQ(run({"synth-corpus", "--keywords", "4", "--utterances", "15", "--seed", "3", "--out",
                 (p.dir / "corpus").string()}).code, 0);
  EXPECT_EQ(run({"synth-embeddings", "--manifest", p.manifest.string(), "--tag", "E1", "--seed", "3", "--out",
                 (p.dir / "emb").string()}).code, 0);
  EXPECT_EQ(run({"pairs", "--manifest", p.manifest.string(), "--seed", "3", "--eval-episodes", "2", "--out",
                 p.pairs.string()}).code, 0);
  write(p.dir / "cfg.json", R"({"batch_size": 16, "max_epochs": 1})");
  return p;
}

std::vector<std::string> train_args(const Prepared& p, const fs::path& out) {
  return {"train", "--manifest", p.manifest.string(), "--embeddings", p.embeddings.string(), "--pairs",
          p.pairs.string(), "--config", (p.dir / "cfg.json").string(), "--seed", "3", "--tag", "E1",
          "--deterministic", "--out", out.string()};
}

std::vector<std::string> eval_args(const Prepared& p, const fs::path& ckpt, const fs::path& out) {
  return {"eval", "--checkpoint", ckpt.string(), "--manifest", p.manifest.string(), "--embeddings",
          p.embeddings.string(), "--pairs", (p.pairs / kTestPairs).string(), "--tag", "E1", "--deterministic",
          "--out", out.string()};
}

TEST(Usage, UnknownOrMissingSubcommandExitsOne) {
  const Result r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "unknown subcommand 'frobnicate'"));
  EXPECT_TRUE(contains(r.err, "synth-corpus"));
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"train", "--bogus-flag"}).code, 1);
}

TEST(InspectEmbedding, PrintsHeaderAndRejectsBadFiles) {
  const fs::path dir = scratch("inspect");
  const fs::path file = dir / "hello.ttse";
  embeddings::write_embedding(embeddings::synth_pseudo_embedding("hello", embeddings::Tag::E3, 1), file);
  const Result r = run({"inspect-embedding", file.string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(contains(r.out, "tag: E3"));
  EXPECT_TRUE(contains(r.out, "keyword: hello"));
  EXPECT_TRUE(contains(r.out, "rows: 5"));
  EXPECT_TRUE(contains(r.out, "cols: 512"));

  EXPECT_EQ(run({"inspect-embedding", (dir / "missing.ttse").string()}).code, 2);
  write(dir / "junk.ttse", "not an embedding");
  const Result bad = run({"inspect-embedding", (dir / "junk.ttse").string()});
  EXPECT_EQ(bad.code, 2);
  EXPECT_TRUE(contains(bad.err, "junk.ttse"));
}

TEST(SynthEmbeddings, ManifestKeepsOtherTags) {
  const fs::path dir = scratch("emb");
  write(dir / "kw.txt", "Turn On\nopen the door\n");
  for (const char* tag : {"E1", "E7"}) {
    ASSERT_EQ(run({"synth-embeddings", "--keywords", (dir / "kw.txt").string(), "--tag", tag, "--out",
                   (dir / "out").string()}).code, 0);
  }
  const auto entries = embeddings::read_manifest(dir / "out" / kEmbeddingManifest);
  ASSERT_EQ(entries.size(), 4u);
  EXPECT_EQ(entries[0].keyword, "open the door");
  for (const auto& e : entries) {
    const auto seq = embeddings::read_embedding(dir / "out" / e.relative_path);
    EXPECT_EQ(seq.cols(), embeddings::tag_width(e.tag));
  }
  EXPECT_EQ(run({"synth-embeddings", "--tag", "E1", "--out", (dir / "out").string()}).code, 1);
  EXPECT_EQ(run({"synth-embeddings", "--keywords", (dir / "kw.txt").string(), "--tag", "E8", "--out",
                 (dir / "out").string()}).code, 1);
}

TEST(Pairs, EpisodesAreThreePositivesAndThreeNegatives) {
  const fs::path dir = scratch("pairs");
  ASSERT_EQ(run({"synth-corpus", "--keywords", "4", "--utterances", "15", "--out", (dir / "c").string()}).code, 0);
  const fs::path manifest = dir / "c" / kCorpusManifest;
  ASSERT_EQ(run({"pairs", "--manifest", manifest.string(), "--oov", "turn the lights on", "--out",
                 (dir / "p").string()}).code, 0);
  for (const char* file : {kTrainPairs, kValidationPairs, kTestPairs}) {
    const auto pairs = data::read_pairs(dir / "p" / file);
    ASSERT_FALSE(pairs.empty());
    ASSERT_EQ(pairs.size() % 6, 0u);
    for (std::size_t start = 0; start < pairs.size(); start += 6) {
      int positives = 0;
      for (std::size_t i = start; i < start + 6; ++i) {
        positives += pairs[i].label;
        EXPECT_EQ(pairs[i].keyword, pairs[start].keyword);
      }
      EXPECT_EQ(positives, 3);
    }
  }
  for (const auto& p : data::read_pairs(dir / "p" / kTrainPairs)) EXPECT_NE(p.keyword, "turn the lights on");
  bool any_oov = false;
  for (const auto& p : data::read_pairs(dir / "p" / kTestPairs)) any_oov = any_oov || p.oov;
  EXPECT_TRUE(any_oov);
  EXPECT_EQ(data::read_keyword_list(dir / "p" / kVocabulary).size(), 3u);

  EXPECT_EQ(run({"pairs", "--manifest", manifest.string(), "--oov", "jump", "--out", (dir / "q").string()}).code, 1);
  EXPECT_EQ(run({"pairs", "--manifest", (dir / "none.tsv").string(), "--out", (dir / "q").string()}).code, 2);
  write(dir / "broken.tsv", "id\twav_path\n");
  const Result r = run({"pairs", "--manifest", (dir / "broken.tsv").string(), "--out", (dir / "q").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.err, "broken.tsv"));
}

TEST(Train, MalformedInputsNameFileAndField) {
  const Prepared p = prepare("train_errors");
  write(p.dir / "bad.json", R"({"learning_rate": -1})");
  auto args = train_args(p, p.dir / "run");
  args[8] = (p.dir / "bad.json").string();
  Result r = run(args);
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "learning_rate"));

  write(p.dir / "typo.json", R"({"epochs": 3})");
  args[8] = (p.dir / "typo.json").string();
  r = run(args);
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "epochs"));

  // A pair file with an unparsable label.
  const Prepared q = prepare("train_bad_pairs");
  std::string text = slurp(q.pairs / kTrainPairs);
  const auto second = text.find('\n') + 1;
  const auto label_at = text.find('\t', text.find('\t', second) + 1) + 1;
  text[label_at] = 'x';
  write(q.pairs / kTrainPairs, text);
  r = run(train_args(q, q.dir / "run"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.err, kTrainPairs));
  EXPECT_TRUE(contains(r.err, "label"));

  // An audio id that is not in the manifest.
  const Prepared s = prepare("train_missing_audio");
  text = slurp(s.pairs / kValidationPairs);
  text += "ghost\ton\t1\tpositive\t1\t0\n";
  write(s.pairs / kValidationPairs, text);
  r = run(train_args(s, s.dir / "run"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(contains(r.err, "ghost"));
  EXPECT_TRUE(contains(r.err, kValidationPairs));
}

TEST(Pipeline, DeterministicRunsAreByteIdentical) {
  const Prepared p = prepare("pipeline");
  for (const char* run_name : {"a", "b"}) {
    const Result t = run(train_args(p, p.dir / run_name));
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_TRUE(contains(t.out, "epoch 1"));
    const Result e = run(eval_args(p, p.dir / run_name / kCheckpoint, p.dir / (std::string(run_name) + "_eval")));
    ASSERT_EQ(e.code, 0) << e.err;
  }
  EXPECT_EQ(slurp(p.dir / "a" / kLossLog), slurp(p.dir / "b" / kLossLog));
  EXPECT_EQ(slurp(p.dir / "a" / kCheckpoint), slurp(p.dir / "b" / kCheckpoint));
  EXPECT_EQ(slurp(p.dir / "a_eval" / kReportJson), slurp(p.dir / "b_eval" / kReportJson));

  const auto report = nlohmann::json::parse(slurp(p.dir / "a_eval" / kReportJson));
  EXPECT_TRUE(report["overall"].contains("auc"));
  EXPECT_TRUE(fs::exists(p.dir / "a_eval" / kRocCsv));
  EXPECT_TRUE(fs::exists(p.dir / "a_eval" / kReportCsv));
  const std::string scores = slurp(p.dir / "a_eval" / kScores);
  EXPECT_EQ(data::read_pairs(p.pairs / kTestPairs).size() + 1,
            static_cast<std::size_t>(std::count(scores.begin(), scores.end(), '\n')));

  // Checkpoint trained on E1 (width 512) cannot score E7 (width 80).
  auto args = eval_args(p, p.dir / "a" / kCheckpoint, p.dir / "e7");
  args[10] = "E7";
  const Result mismatch = run(args);
  EXPECT_EQ(mismatch.code, 1);
  EXPECT_TRUE(contains(mismatch.err, "text_width"));

  write(p.dir / "corrupt.ckpt", "XKWSCKPT");
  const Result corrupt = run(eval_args(p, p.dir / "corrupt.ckpt", p.dir / "c"));
  EXPECT_EQ(corrupt.code, 2);
  EXPECT_TRUE(contains(corrupt.err, "corrupt.ckpt"));
}

TEST(GradCheck, PrintsMaxRelativeErrorAndPasses) {
  const Result r = run({"gradcheck", "--coords", "2"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "score_pair"));
  EXPECT_TRUE(contains(r.out, "max_rel_error"));
}

}  // namespace
}  // namespace xkws::harness
