// SPDX-License-Identifier: Apache-2.0
#include "xkws/harness.hpp"

#include "xkws/errors.hpp"
#include "xkws/grad_suite.hpp"
#include "xkws/text.hpp"
#include "xkws/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>

namespace xkws::harness {
namespace {

namespace fs = std::filesystem;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw FormatError(dir.string() + ": cannot create output directory");
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw FormatError(p.string() + ": " + what + " not found");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  for (const std::string& item : split(text, ',')) {
    if (!item.empty()) out.push_back(data::keyword_key(item));
  }
  return out;
}

// Mel features for the audio ids referenced by `pairs` and embeddings for
// their keywords.
data::FeatureStore load_features(const fs::path& manifest, const fs::path& embedding_manifest, embeddings::Tag tag,
                                 const std::vector<std::pair<fs::path, const std::vector<data::PairExample>*>>& sets) {
  require_file(manifest, "corpus manifest");
  require_file(embedding_manifest, "embedding manifest");
  const auto records = data::read_manifest(manifest);
  std::map<std::string, const data::UtteranceRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;

  std::set<std::string> ids;
  std::set<std::string> keywords;
  for (const auto& [path, pairs] : sets) {
    for (const auto& p : *pairs) {
      if (!by_id.contains(p.audio_id)) {
        throw ValidationError(path.string() + ": audio_id '" + p.audio_id + "' is not in " + manifest.string());
      }
      ids.insert(p.audio_id);
      keywords.insert(p.keyword);
    }
  }
  std::vector<data::UtteranceRecord> needed;
  for (const auto& id : ids) needed.push_back(*by_id[id]);

  data::FeatureStore store;
  data::add_mels(store, needed, manifest);

  const fs::path dir = embedding_manifest.parent_path();
  for (const auto& entry : embeddings::read_manifest(embedding_manifest)) {
    if (entry.tag != tag || !keywords.contains(entry.keyword)) continue;
    const fs::path file = dir / entry.relative_path;
    auto seq = embeddings::read_embedding(file);
    if (seq.tag != tag) {
      throw ValidationError(file.string() + ": tag is " + embeddings::tag_name(seq.tag) + ", manifest says " +
                            embeddings::tag_name(tag));
    }
    if (data::keyword_key(seq.keyword) != entry.keyword) {
      throw ValidationError(file.string() + ": keyword is '" + seq.keyword + "', manifest says '" + entry.keyword + "'");
    }
    store.texts[entry.keyword] = std::move(seq);
  }
  for (const auto& k : keywords) {
    if (!store.texts.contains(k)) {
      throw ValidationError(embedding_manifest.string() + ": no " + embeddings::tag_name(tag) + " embedding for '" + k +
                            "'");
    }
  }
  return store;
}

int synth_corpus(std::size_t n_keywords, std::size_t n_utterances, std::uint64_t seed, const fs::path& out_dir,
                 std::ostream& out) {
  const auto corpus = data::synth_toy_corpus(n_keywords, n_utterances, seed + kCorpusSeedOffset);
  ensure_dir(out_dir);
  const fs::path manifest = data::write_corpus(corpus, out_dir);
  out << "wrote " << corpus.records.size() << " utterances over " << n_keywords << " keywords to " << manifest.string()
      << "\n";
  return kExitOk;
}

int synth_embeddings(const std::string& manifest, const std::string& keyword_file, embeddings::Tag tag,
                     std::uint64_t seed, const fs::path& out_dir, std::ostream& out) {
  std::vector<std::string> keywords;
  if (!manifest.empty() == !keyword_file.empty()) {
    throw ValidationError("synth-embeddings: give exactly one of --manifest or --keywords");
  }
  if (!manifest.empty()) {
    require_file(manifest, "corpus manifest");
    keywords = data::distinct_keywords(data::read_manifest(manifest));
  } else {
    require_file(keyword_file, "keyword list");
    for (const auto& k : data::read_keyword_list(keyword_file)) keywords.push_back(data::keyword_key(k));
  }
  if (keywords.empty()) throw ValidationError("synth-embeddings: no keywords");
  ensure_dir(out_dir);

  // Entries for other tags already in the manifest are kept.
  const fs::path manifest_out = out_dir / kEmbeddingManifest;
  std::vector<embeddings::ManifestEntry> entries;
  if (fs::exists(manifest_out)) {
    for (auto& e : embeddings::read_manifest(manifest_out)) {
      if (e.tag != tag) entries.push_back(std::move(e));
    }
  }
  for (const auto& k : keywords) {
    const std::string name = embeddings::embedding_file_name(k, tag);
    embeddings::write_embedding(embeddings::synth_pseudo_embedding(k, tag, seed + kEmbeddingSeedOffset), out_dir / name);
    entries.push_back({k, tag, name});
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    return std::tie(a.keyword, a.tag) < std::tie(b.keyword, b.tag);
  });
  embeddings::write_manifest(entries, manifest_out);
  out << "wrote " << keywords.size() << " " << embeddings::tag_name(tag) << " embeddings to " << manifest_out.string()
      << "\n";
  return kExitOk;
}

int make_pairs(const fs::path& manifest, std::uint64_t seed, int hard_threshold, const std::string& oov_list,
               std::size_t train_episodes, std::size_t eval_episodes, const fs::path& out_dir, std::ostream& out,
               std::ostream& err) {
  require_file(manifest, "corpus manifest");
  if (hard_threshold < 0) throw ValidationError("--hard-threshold must be non-negative");
  const auto records = data::read_manifest(manifest);
  const auto all = data::distinct_keywords(records);
  std::set<std::string> oov;
  for (const auto& k : split_list(oov_list)) {
    if (std::find(all.begin(), all.end(), k) == all.end()) {
      throw ValidationError("--oov: keyword '" + k + "' is not in " + manifest.string());
    }
    oov.insert(k);
  }
  std::set<std::string> vocabulary;
  for (const auto& k : all) {
    if (!oov.contains(k)) vocabulary.insert(k);
  }
  if (vocabulary.size() < 2) throw ValidationError("--oov leaves fewer than two training keywords");

  const data::CorpusSplit split = data::split_corpus(records, oov);
  const std::uint64_t base = seed + kPairsSeedOffset;
  ensure_dir(out_dir);
  struct Part {
    const std::vector<data::UtteranceRecord>* records;
    std::size_t episodes;
    const char* file;
  };
  const Part parts[] = {{&split.train, train_episodes, kTrainPairs},
                        {&split.validation, eval_episodes, kValidationPairs},
                        {&split.test, eval_episodes, kTestPairs}};
  for (std::size_t i = 0; i < 3; ++i) {
    data::EpisodeOptions opts;
    opts.hard_threshold = hard_threshold;
    opts.episodes_per_keyword = parts[i].episodes;
    opts.training_vocabulary = vocabulary;
    const auto set = data::build_episodes(*parts[i].records, mix_seed(base, i), opts);
    for (const auto& w : set.warnings) err << parts[i].file << ": warning: " << w << "\n";
    const auto pairs = set.pairs();
    data::write_pairs(pairs, out_dir / parts[i].file);
    out << "wrote " << pairs.size() << " pairs (" << set.episodes.size() << " episodes) to "
        << (out_dir / parts[i].file).string() << "\n";
  }
  const std::vector<std::string> vocab(vocabulary.begin(), vocabulary.end());
  data::write_keyword_list(vocab, out_dir / kVocabulary);
  return kExitOk;
}

int train_cmd(const fs::path& manifest, const fs::path& embedding_manifest, const fs::path& pairs_dir,
              const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& tag,
              bool deterministic, const fs::path& out_dir, std::ostream& out) {
  train::TrainConfig config;
  if (!config_path.empty()) {
    require_file(config_path, "config");
    config = train::read_config(config_path);
  }
  if (seed) config.rng_seed = *seed + kTrainSeedOffset;
  if (!tag.empty()) config.embedding_tag = embeddings::parse_tag(tag);
  train::validate(config);

  const fs::path train_file = pairs_dir / kTrainPairs;
  const fs::path val_file = pairs_dir / kValidationPairs;
  require_file(train_file, "training pairs");
  require_file(val_file, "validation pairs");
  const auto train_pairs = data::read_pairs(train_file);
  const auto val_pairs = data::read_pairs(val_file);
  if (train_pairs.empty()) throw ValidationError(train_file.string() + ": no pairs");
  if (val_pairs.empty()) throw ValidationError(val_file.string() + ": no pairs");
  const auto store =
      load_features(manifest, embedding_manifest, config.embedding_tag, {{train_file, &train_pairs}, {val_file, &val_pairs}});

  ensure_dir(out_dir);
  train::TrainOptions options;
  options.threads = train::thread_budget(deterministic);
  options.on_epoch = [&](const train::LossLogRow& row) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %zu train_loss %.6f val_loss %.6f val_auc %.2f\n", row.epoch,
                  row.train_loss, row.val_loss, row.val_auc);
    out << line << std::flush;
  };
  train::TrainResult result = train::train_model(config, train_pairs, val_pairs, store, options);
  train::export_loss_log(result.log, out_dir / kLossLog);
  model::save_checkpoint(result.best_model, out_dir / kCheckpoint);
  metrics::write_text(train::config_json(config), out_dir / kEffectiveConfig);
  char line[160];
  std::snprintf(line, sizeof line, "best epoch %zu val_auc %.2f\n", result.best_epoch, result.best_val_auc);
  out << line << "wrote " << (out_dir / kCheckpoint).string() << "\n";
  return kExitOk;
}

int eval_cmd(const fs::path& checkpoint, const fs::path& manifest, const fs::path& embedding_manifest,
             const fs::path& pairs_file, const std::string& tag_name, bool deterministic, const fs::path& out_dir,
             std::ostream& out) {
  require_file(checkpoint, "checkpoint");
  require_file(pairs_file, "pair file");
  model::KwsModel m = model::load_checkpoint(checkpoint);
  const embeddings::Tag tag = embeddings::parse_tag(tag_name);
  if (embeddings::tag_width(tag) != m.config().text_width) {
    throw ValidationError(checkpoint.string() + ": text_width " + std::to_string(m.config().text_width) +
                          " does not match " + tag_name + " (" + std::to_string(embeddings::tag_width(tag)) + ")");
  }
  const auto pairs = data::read_pairs(pairs_file);
  if (pairs.empty()) throw ValidationError(pairs_file.string() + ": no pairs");
  const auto store = load_features(manifest, embedding_manifest, tag, {{pairs_file, &pairs}});
  const auto scores =
      train::score_pairs(m, pairs, store, train::kEvalBatchSize, train::thread_budget(deterministic));
  const auto scored = train::to_scored(pairs, scores);
  const auto report = metrics::build_report(scored);

  ensure_dir(out_dir);
  metrics::write_text(metrics::report_json(report), out_dir / kReportJson);
  metrics::write_text(metrics::report_csv(report), out_dir / kReportCsv);
  metrics::write_text(metrics::roc_csv(metrics::roc_points(scored)), out_dir / kRocCsv);
  std::string tsv = "audio_id\tkeyword\tlabel\tscore\n";
  char buf[64];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d\t%.9g\n", pairs[i].label, scores[i]);
    tsv += pairs[i].audio_id + "\t" + pairs[i].keyword + "\t" + buf;
  }
  metrics::write_text(tsv, out_dir / kScores);

  auto cell = [](const std::optional<double>& v) {
    char b[32];
    if (!v) return std::string("undefined");
    std::snprintf(b, sizeof b, "%.2f", *v);
    return std::string(b);
  };
  out << "pairs " << pairs.size() << " auc " << cell(report.overall.auc) << " eer " << cell(report.overall.eer)
      << " f1 " << cell(report.overall.f1) << "\n";
  out << "wrote " << (out_dir / kReportJson).string() << "\n";
  return kExitOk;
}

int gradcheck_cmd(std::uint64_t seed, std::size_t coords, std::ostream& out) {
  double worst = 0.0;
  bool passed = true;
  char line[160];
  for (const auto& entry : run_gradient_suite(seed + kGradCheckSeedOffset, coords)) {
    std::snprintf(line, sizeof line, "%-18s max_rel_error %.3e %s\n", entry.name.c_str(), entry.report.max_rel_error,
                  entry.report.passed ? "ok" : "FAIL");
    out << line;
    worst = std::max(worst, entry.report.max_rel_error);
    passed = passed && entry.report.passed;
  }
  std::snprintf(line, sizeof line, "max_rel_error %.3e\n", worst);
  out << line;
  return passed ? kExitOk : kExitValidation;
}

int inspect_cmd(const fs::path& file, std::ostream& out) {
  require_file(file, "embedding file");
  const auto h = embeddings::read_embedding_header(file);
  out << "file: " << file.string() << "\n"
      << "version: " << h.version << "\n"
      << "tag: " << embeddings::tag_name(h.tag) << " (" << embeddings::tag_description(h.tag) << ")\n"
      << "keyword: " << h.keyword << "\n"
      << "rows: " << h.rows << "\n"
      << "cols: " << h.cols << "\n";
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Cross-modal keyword spotting: corpus synthesis, training and evaluation.", "xkws");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::uint64_t seed = 0;
  std::string out_dir, manifest, embeddings_manifest, tag, config, pairs, checkpoint, keyword_file, oov, file;
  std::size_t n_keywords = 8, n_utterances = 20, train_episodes = 0, eval_episodes = 10, coords = 32;
  int hard_threshold = data::kDefaultHardThreshold;
  bool deterministic = false;

  auto* corpus = app.add_subcommand("synth-corpus", "Write a synthetic tone corpus with a manifest");
  corpus->add_option("--keywords", n_keywords, "Number of keywords")->capture_default_str();
  corpus->add_option("--utterances", n_utterances, "Utterances per keyword")->capture_default_str();
  corpus->add_option("--seed", seed, "Random seed")->capture_default_str();
  corpus->add_option("--out", out_dir, "Output directory")->required();

  auto* emb = app.add_subcommand("synth-embeddings", "Write pseudo TTS embeddings for every keyword");
  emb->add_option("--manifest", manifest, "Corpus manifest");
  emb->add_option("--keywords", keyword_file, "Keyword list, one per line");
  emb->add_option("--tag", tag, "Embedding tag E1..E7")->default_val("E3");
  emb->add_option("--seed", seed, "Random seed")->capture_default_str();
  emb->add_option("--out", out_dir, "Output directory")->required();

  auto* pairs_cmd = app.add_subcommand("pairs", "Split the corpus and build episode pair files");
  pairs_cmd->add_option("--manifest", manifest, "Corpus manifest")->required();
  pairs_cmd->add_option("--seed", seed, "Random seed")->capture_default_str();
  pairs_cmd->add_option("--hard-threshold", hard_threshold, "Max edit distance of a hard negative")
      ->capture_default_str();
  pairs_cmd->add_option("--oov", oov, "Comma-separated keywords held out of training");
  pairs_cmd->add_option("--train-episodes", train_episodes, "Episodes per training keyword; 0 uses disjoint triples")
      ->capture_default_str();
  pairs_cmd->add_option("--eval-episodes", eval_episodes, "Episodes per keyword for validation and test")
      ->capture_default_str();
  pairs_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::optional<std::uint64_t> train_seed;
  auto* train_sub = app.add_subcommand("train", "Train a model and write a checkpoint and loss log");
  train_sub->add_option("--manifest", manifest, "Corpus manifest")->required();
  train_sub->add_option("--embeddings", embeddings_manifest, "Embedding manifest")->required();
  train_sub->add_option("--pairs", pairs, "Directory holding train.tsv and validation.tsv")->required();
  train_sub->add_option("--config", config, "Training config JSON");
  train_sub->add_option("--seed", train_seed, "Random seed; overrides rng_seed in the config");
  train_sub->add_option("--tag", tag, "Embedding tag; overrides embedding_tag in the config");
  train_sub->add_flag("--deterministic", deterministic, "Single-threaded");
  train_sub->add_option("--out", out_dir, "Output directory")->required();

  auto* eval_sub = app.add_subcommand("eval", "Score a pair file and write metric reports");
  eval_sub->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval_sub->add_option("--manifest", manifest, "Corpus manifest")->required();
  eval_sub->add_option("--embeddings", embeddings_manifest, "Embedding manifest")->required();
  eval_sub->add_option("--pairs", pairs, "Pair TSV")->required();
  eval_sub->add_option("--tag", tag, "Embedding tag E1..E7")->default_val("E3");
  eval_sub->add_flag("--deterministic", deterministic, "Single-threaded");
  eval_sub->add_option("--out", out_dir, "Output directory")->required();

  auto* grad_sub = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad_sub->add_option("--seed", seed, "Random seed")->capture_default_str();
  grad_sub->add_option("--coords", coords, "Sampled coordinates per model parameter")->capture_default_str();

  auto* inspect = app.add_subcommand("inspect-embedding", "Print the header of an embedding file");
  inspect->add_option("file", file, "Embedding file")->required();

  if (!args.empty() && !args[0].starts_with("-")) {
    const auto subs = app.get_subcommands([&](const CLI::App* sub) { return sub->get_name() == args[0]; });
    if (subs.empty()) {
      err << "error: unknown subcommand '" << args[0] << "'\n\n" << app.help();
      return kExitValidation;
    }
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (corpus->parsed()) return synth_corpus(n_keywords, n_utterances, seed, out_dir, out);
    if (emb->parsed()) return synth_embeddings(manifest, keyword_file, embeddings::parse_tag(tag), seed, out_dir, out);
    if (pairs_cmd->parsed()) {
      return make_pairs(manifest, seed, hard_threshold, oov, train_episodes, eval_episodes, out_dir, out, err);
    }
    if (train_sub->parsed()) {
      return train_cmd(manifest, embeddings_manifest, pairs, config, train_seed, tag, deterministic, out_dir, out);
    }
    if (eval_sub->parsed()) {
      return eval_cmd(checkpoint, manifest, embeddings_manifest, pairs, tag, deterministic, out_dir, out);
    }
    if (grad_sub->parsed()) return gradcheck_cmd(seed, coords, out);
    if (inspect->parsed()) return inspect_cmd(file, out);
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  err << app.help();
  return kExitValidation;
}

}  // namespace xkws::harness
