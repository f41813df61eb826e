// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "xkws/data.hpp"
#include "xkws/embeddings.hpp"
#include "xkws/metrics.hpp"
#include "xkws/model.hpp"
#include "xkws/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace xkws::train {

// Eval mode has no cross-pair coupling, so validation and test scoring use
// large batches; each distinct utterance is then encoded once per batch.
inline constexpr std::size_t kEvalBatchSize = 256;

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  double dropout_p = model::kDefaultDropout;
  std::size_t max_epochs = 50;
  // Training stops after this many consecutive epochs without a higher
  // validation AUC; 0 stops after the first epoch.
  std::size_t patience = 10;
  std::uint64_t rng_seed = 0;
  embeddings::Tag embedding_tag = embeddings::Tag::E3;

  bool operator==(const TrainConfig&) const = default;
};

// Throws ValidationError naming the offending field.
void validate(const TrainConfig& config);

// JSON object with exactly the TrainConfig field names; missing fields keep
// their defaults, unknown fields are rejected.
TrainConfig parse_config(const std::string& json_text, const std::string& origin = "config");
TrainConfig read_config(const std::filesystem::path& path);
std::string config_json(const TrainConfig& config);

struct LossLogRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_auc = 0.0;  // percent

  bool operator==(const LossLogRow&) const = default;
};

using LossLog = std::vector<LossLogRow>;

// Header epoch,train_loss,val_loss,val_auc; 9 significant digits.
std::string loss_log_csv(const LossLog& log);
void export_loss_log(const LossLog& log, const std::filesystem::path& path);
LossLog read_loss_log(const std::filesystem::path& path);

struct TrainResult {
  model::KwsModel best_model;
  LossLog log;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
};

struct TrainOptions {
  // Worker threads for validation scoring; 0 picks the default.
  std::size_t threads = 1;
  std::function<void(const LossLogRow&)> on_epoch;
};

// Groups shuffled pairs into batches of batch_size. A batch with fewer than
// two distinct utterances is merged into its neighbour, since batch norm
// needs two in train mode.
std::vector<std::vector<data::PairExample>> make_batches(std::span<const data::PairExample> pairs,
                                                         std::size_t batch_size);

// Seeded Fisher-Yates order for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t rng_seed, std::size_t epoch);

// One optimisation step on a batch; returns the batch loss. Throws
// TrainingDiverged on a non-finite loss.
double train_step(model::KwsModel& m, const data::Batch& batch, const AdamConfig& adam, Rng& rng);

// Mean BCE over pairs with the same clamp as training.
double mean_bce(std::span<const double> scores, std::span<const double> labels);

// Eval-mode scores in pair order. Batches are scored on up to `threads`
// workers; results do not depend on the thread count.
std::vector<double> score_pairs(model::KwsModel& m, std::span<const data::PairExample> pairs,
                                const data::FeatureStore& store, std::size_t batch_size, std::size_t threads = 1);

std::vector<metrics::ScoredPair> to_scored(std::span<const data::PairExample> pairs, std::span<const double> scores);

// Worker cap: XMODAL_KWS_THREADS when set and positive, else hardware
// concurrency; 1 when deterministic.
std::size_t thread_budget(bool deterministic);

TrainResult train_model(const TrainConfig& config, std::span<const data::PairExample> train_pairs,
                        std::span<const data::PairExample> validation_pairs, const data::FeatureStore& store,
                        const TrainOptions& options = {});

}  // namespace xkws::train
