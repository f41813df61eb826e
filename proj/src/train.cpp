// SPDX-License-Identifier: Apache-2.0
#include "xkws/train.hpp"

#include "xkws/errors.hpp"
#include "xkws/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

namespace xkws::train {
namespace {

template <typename T>
T field(const nlohmann::json& j, const char* name, const std::string& origin) {
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(origin + ": field " + name + ": " + e.what());
  }
}

std::size_t count_field(const nlohmann::json& j, const char* name, const std::string& origin) {
  const nlohmann::json& v = j.at(name);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ValidationError(origin + ": field " + name + ": expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

std::size_t distinct_audio(std::span<const data::PairExample> pairs) {
  std::set<std::string> ids;
  for (const auto& p : pairs) ids.insert(p.audio_id);
  return ids.size();
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) {
    throw ValidationError("learning_rate must be positive, got " + std::to_string(c.learning_rate));
  }
  if (!(c.dropout_p >= 0.0 && c.dropout_p < 1.0)) {
    throw ValidationError("dropout_p must be in [0, 1), got " + std::to_string(c.dropout_p));
  }
  if (c.batch_size < 2) throw ValidationError("batch_size must be at least 2 (batch norm)");
  if (c.max_epochs == 0) throw ValidationError("max_epochs must be positive");
}

TrainConfig parse_config(const std::string& json_text, const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(origin + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(origin + ": expected a JSON object");
  static const std::set<std::string> known = {"learning_rate", "batch_size", "dropout_p", "max_epochs",
                                              "patience",      "rng_seed",   "embedding_tag"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ValidationError(origin + ": unknown field " + k);
  }
  TrainConfig c;
  if (j.contains("learning_rate")) c.learning_rate = field<double>(j, "learning_rate", origin);
  if (j.contains("batch_size")) c.batch_size = count_field(j, "batch_size", origin);
  if (j.contains("dropout_p")) c.dropout_p = field<double>(j, "dropout_p", origin);
  if (j.contains("max_epochs")) c.max_epochs = count_field(j, "max_epochs", origin);
  if (j.contains("patience")) c.patience = count_field(j, "patience", origin);
  if (j.contains("rng_seed")) c.rng_seed = count_field(j, "rng_seed", origin);
  if (j.contains("embedding_tag")) {
    try {
      c.embedding_tag = embeddings::parse_tag(field<std::string>(j, "embedding_tag", origin));
    } catch (const InvalidArgument& e) {
      throw ValidationError(origin + ": field embedding_tag: " + e.what());
    }
  }
  try {
    validate(c);
  } catch (const ValidationError& e) {
    throw ValidationError(origin + ": " + e.what());
  }
  return c;
}

TrainConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string config_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["dropout_p"] = c.dropout_p;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["rng_seed"] = c.rng_seed;
  j["embedding_tag"] = embeddings::tag_name(c.embedding_tag);
  return j.dump(2) + "\n";
}

std::string loss_log_csv(const LossLog& log) {
  std::string out = "epoch,train_loss,val_loss,val_auc\n";
  char buf[128];
  for (const LossLogRow& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss, r.val_auc);
    out += buf;
  }
  return out;
}

void export_loss_log(const LossLog& log, const std::filesystem::path& path) {
  if (log.empty()) throw InvalidArgument("export_loss_log: empty log");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << loss_log_csv(log);
  if (!out) throw FormatError(path.string() + ": write failed");
}

LossLog read_loss_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_loss,val_auc") {
    throw FormatError(path.string() + ":1: header: expected epoch,train_loss,val_loss,val_auc");
  }
  LossLog log;
  for (std::size_t line_no = 2; std::getline(in, line); ++line_no) {
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 4) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 4 columns");
    try {
      log.push_back({std::stoul(cols[0]), std::stod(cols[1]), std::stod(cols[2]), std::stod(cols[3])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unparsable number");
    }
  }
  return log;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t rng_seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(rng_seed, epoch));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

std::vector<std::vector<data::PairExample>> make_batches(std::span<const data::PairExample> pairs,
                                                         std::size_t batch_size) {
  if (batch_size == 0) throw InvalidArgument("make_batches: batch_size must be positive");
  std::vector<std::vector<data::PairExample>> out;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const auto chunk = pairs.subspan(start, std::min(batch_size, pairs.size() - start));
    if (!out.empty() && distinct_audio(chunk) < 2) {
      out.back().insert(out.back().end(), chunk.begin(), chunk.end());
    } else {
      out.emplace_back(chunk.begin(), chunk.end());
    }
  }
  if (out.size() > 1 && distinct_audio(out.front()) < 2) {
    out[1].insert(out[1].begin(), out.front().begin(), out.front().end());
    out.erase(out.begin());
  }
  if (!out.empty() && distinct_audio(out.front()) < 2) {
    throw InvalidArgument("make_batches: training needs at least two distinct utterances");
  }
  return out;
}

double train_step(model::KwsModel& m, const data::Batch& batch, const AdamConfig& adam, Rng& rng) {
  const std::vector<Parameter*> params = m.parameters();
  Graph g;
  const Var probs = model::forward_batch(g, m, batch, Mode::kTrain, rng);
  const Var loss = bce_loss(probs, batch.labels);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) throw TrainingDiverged("non-finite loss " + std::to_string(value));
  g.backward(loss);
  adam_step(params, adam);
  zero_grads(params);
  return value;
}

double mean_bce(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size() || scores.empty()) throw InvalidArgument("mean_bce: size mismatch or empty");
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], kBceClampEps, 1.0 - kBceClampEps);
    total -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  return total / static_cast<double>(scores.size());
}

std::vector<double> score_pairs(model::KwsModel& m, std::span<const data::PairExample> pairs,
                                const data::FeatureStore& store, std::size_t batch_size, std::size_t threads) {
  const std::vector<data::Batch> batches = data::batch_with_padding(pairs, store, batch_size);
  std::vector<std::vector<double>> results(batches.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < batches.size();) results[i] = model::score_batch(m, batches[i]);
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batches.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& r : results) out.insert(out.end(), r.begin(), r.end());
  return out;
}

std::vector<metrics::ScoredPair> to_scored(std::span<const data::PairExample> pairs, std::span<const double> scores) {
  if (pairs.size() != scores.size()) throw InvalidArgument("to_scored: size mismatch");
  std::vector<metrics::ScoredPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.push_back({scores[i], pairs[i].label, pairs[i].word_length, pairs[i].oov, pairs[i].difficulty});
  }
  return out;
}

std::size_t thread_budget(bool deterministic) {
  if (deterministic) return 1;
  if (const char* env = std::getenv("XMODAL_KWS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

TrainResult train_model(const TrainConfig& config, std::span<const data::PairExample> train_pairs,
                        std::span<const data::PairExample> validation_pairs, const data::FeatureStore& store,
                        const TrainOptions& options) {
  validate(config);
  if (train_pairs.empty() || validation_pairs.empty()) throw InvalidArgument("train_model: empty split");
  const std::size_t width = embeddings::tag_width(config.embedding_tag);
  for (const auto& [keyword, e] : store.texts) {
    if (e.cols() != width) {
      throw ValidationError("embedding for '" + keyword + "' is " + std::to_string(e.cols()) + " wide; " +
                            embeddings::tag_name(config.embedding_tag) + " expects " + std::to_string(width));
    }
  }
  std::vector<double> val_labels;
  for (const auto& p : validation_pairs) val_labels.push_back(p.label);

  model::KwsModel m(model::ModelConfig{width, config.dropout_p, mix_seed(config.rng_seed, 0x6d6f64656cULL)});
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;

  TrainResult result{m, {}, 0, -std::numeric_limits<double>::infinity()};
  std::vector<double> loss_history;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(train_pairs.size(), config.rng_seed, epoch);
    std::vector<data::PairExample> shuffled;
    shuffled.reserve(order.size());
    for (std::size_t i : order) shuffled.push_back(train_pairs[i]);

    double loss_sum = 0.0;
    const auto groups = make_batches(shuffled, config.batch_size);
    for (std::size_t b = 0; b < groups.size(); ++b) {
      const data::Batch batch = data::batch_with_padding(groups[b], store, groups[b].size())[0];
      Rng rng(mix_seed(mix_seed(config.rng_seed, epoch), b + 1));
      double loss = 0.0;
      try {
        loss = train_step(m, batch, adam, rng);
      } catch (const TrainingDiverged& e) {
        std::string history;
        for (double l : loss_history) history += (history.empty() ? "" : ", ") + std::to_string(l);
        throw TrainingDiverged(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b + 1) + "; batch losses so far: [" + history + "]");
      }
      loss_history.push_back(loss);
      loss_sum += loss * static_cast<double>(batch.size());
    }

    const std::vector<double> scores = score_pairs(m, validation_pairs, store, kEvalBatchSize, options.threads);
    LossLogRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_pairs.size());
    row.val_loss = mean_bce(scores, val_labels);
    row.val_auc = metrics::auc(to_scored(validation_pairs, scores));
    result.log.push_back(row);
    if (options.on_epoch) options.on_epoch(row);

    if (row.val_auc > result.best_val_auc) {
      result.best_val_auc = row.val_auc;
      result.best_epoch = epoch;
      result.best_model = m;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= config.patience) break;
  }
  return result;
}

}  // namespace xkws::train
