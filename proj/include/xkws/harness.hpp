// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace xkws::harness {

// Per-subcommand offsets added to --seed.
inline constexpr std::uint64_t kCorpusSeedOffset = 0;
inline constexpr std::uint64_t kEmbeddingSeedOffset = 1;
inline constexpr std::uint64_t kPairsSeedOffset = 2;
inline constexpr std::uint64_t kTrainSeedOffset = 3;
inline constexpr std::uint64_t kGradCheckSeedOffset = 4;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

// Output file names.
inline constexpr const char* kCorpusManifest = "manifest.tsv";
inline constexpr const char* kEmbeddingManifest = "manifest.tsv";
inline constexpr const char* kTrainPairs = "train.tsv";
inline constexpr const char* kValidationPairs = "validation.tsv";
inline constexpr const char* kTestPairs = "test.tsv";
inline constexpr const char* kVocabulary = "vocabulary.txt";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kLossLog = "loss_log.csv";
inline constexpr const char* kEffectiveConfig = "config.json";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kReportCsv = "report.csv";
inline constexpr const char* kRocCsv = "roc.csv";
inline constexpr const char* kScores = "scores.tsv";

// args excludes the program name. Returns 0 on success, 1 on validation
// errors or bad usage, 2 on I/O or format errors.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xkws::harness
