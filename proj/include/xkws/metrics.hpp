// SPDX-License-Identifier: Apache-2.0
//
// Detection metrics in percent. A pair is accepted when score >= threshold.
#pragma once

#include "xkws/data.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xkws::metrics {

inline constexpr double kF1Threshold = 0.5;
// Cells with fewer examples of either class are reported as undefined.
inline constexpr std::size_t kMinPerClass = 2;

struct ScoredPair {
  double score = 0.0;
  int label = 0;
  std::size_t word_length = 1;
  bool oov = false;
  data::Difficulty difficulty = data::Difficulty::kEasy;
};

// Probability that a random positive outscores a random negative, ties
// counting one half. Throws UndefinedMetric without both classes.
double auc(std::span<const ScoredPair> pairs);

// Sweeps every distinct score as threshold and returns (FAR + FRR) / 2 at
// the one minimising |FAR - FRR|, ties broken by the smaller FAR + FRR.
double eer(std::span<const ScoredPair> pairs);

// 2TP / (2TP + FP + FN). Throws UndefinedMetric when TP + FP + FN = 0.
double f1(std::span<const ScoredPair> pairs, double threshold = kF1Threshold);

struct RocPoint {
  double threshold = 0.0;
  double far = 0.0;  // fraction
  double frr = 0.0;  // fraction
};

// One point per distinct score, thresholds descending.
std::vector<RocPoint> roc_points(std::span<const ScoredPair> pairs);

struct MetricCell {
  std::optional<double> eer;
  std::optional<double> auc;
  std::optional<double> f1;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

struct MetricsReport {
  MetricCell overall;
  std::array<MetricCell, 4> by_word_length;  // index = word length - 1
  MetricCell oov;
};

MetricCell evaluate_cell(std::span<const ScoredPair> pairs);
MetricsReport build_report(std::span<const ScoredPair> pairs);

// {overall:{eer,auc,f1}, by_word_length:{"1".."4"}, oov:{...}, counts:{...}};
// values rounded to 2 decimals, undefined values null.
std::string report_json(const MetricsReport& report);
// cell,eer,auc,f1,positives,negatives; undefined values left empty.
std::string report_csv(const MetricsReport& report);
std::string roc_csv(std::span<const RocPoint> points);

void write_text(const std::string& text, const std::filesystem::path& path);

}  // namespace xkws::metrics
