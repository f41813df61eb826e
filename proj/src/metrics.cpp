// SPDX-License-Identifier: Apache-2.0
#include "xkws/metrics.hpp"

#include "xkws/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace xkws::metrics {
namespace {

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts count_classes(std::span<const ScoredPair> pairs) {
  ClassCounts c;
  for (const ScoredPair& p : pairs) (p.label == 1 ? c.pos : c.neg)++;
  return c;
}

ClassCounts require_both(std::span<const ScoredPair> pairs, const char* metric) {
  const ClassCounts c = count_classes(pairs);
  if (c.pos == 0 || c.neg == 0) {
    throw UndefinedMetric(std::string(metric) + ": needs at least one positive and one negative (got " +
                          std::to_string(c.pos) + " / " + std::to_string(c.neg) + ")");
  }
  return c;
}

std::vector<ScoredPair> sorted_descending(std::span<const ScoredPair> pairs) {
  std::vector<ScoredPair> s(pairs.begin(), pairs.end());
  std::stable_sort(s.begin(), s.end(), [](const ScoredPair& a, const ScoredPair& b) { return a.score > b.score; });
  return s;
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

nlohmann::json value_or_null(const std::optional<double>& v) {
  return v ? nlohmann::json(round2(*v)) : nlohmann::json(nullptr);
}

nlohmann::json cell_json(const MetricCell& c) {
  return {{"eer", value_or_null(c.eer)}, {"auc", value_or_null(c.auc)}, {"f1", value_or_null(c.f1)}};
}

nlohmann::json counts_json(const MetricCell& c) { return {{"positives", c.positives}, {"negatives", c.negatives}}; }

std::string csv_value(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round2(*v));
  return buf;
}

}  // namespace

double auc(std::span<const ScoredPair> pairs) {
  const ClassCounts c = require_both(pairs, "auc");
  const std::vector<ScoredPair> s = sorted_descending(pairs);
  // For each tie group: positives beat every negative below, tie with the
  // negatives inside the group.
  double wins = 0.0;
  std::size_t neg_below = c.neg;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    std::size_t gp = 0, gn = 0;
    while (j < s.size() && s[j].score == s[i].score) {
      (s[j].label == 1 ? gp : gn)++;
      ++j;
    }
    neg_below -= gn;
    wins += static_cast<double>(gp) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(gn));
    i = j;
  }
  return 100.0 * wins / (static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

std::vector<RocPoint> roc_points(std::span<const ScoredPair> pairs) {
  const ClassCounts c = require_both(pairs, "roc");
  const std::vector<ScoredPair> s = sorted_descending(pairs);
  std::vector<RocPoint> out;
  std::size_t accepted_pos = 0, accepted_neg = 0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    while (j < s.size() && s[j].score == s[i].score) {
      (s[j].label == 1 ? accepted_pos : accepted_neg)++;
      ++j;
    }
    RocPoint p;
    p.threshold = s[i].score;
    p.far = static_cast<double>(accepted_neg) / static_cast<double>(c.neg);
    p.frr = static_cast<double>(c.pos - accepted_pos) / static_cast<double>(c.pos);
    out.push_back(p);
    i = j;
  }
  return out;
}

double eer(std::span<const ScoredPair> pairs) {
  require_both(pairs, "eer");
  const std::vector<RocPoint> roc = roc_points(pairs);
  const RocPoint* best = nullptr;
  for (const RocPoint& p : roc) {
    if (best == nullptr) {
      best = &p;
      continue;
    }
    const double gap = std::abs(p.far - p.frr), best_gap = std::abs(best->far - best->frr);
    if (gap < best_gap || (gap == best_gap && p.far + p.frr < best->far + best->frr)) best = &p;
  }
  return 100.0 * (best->far + best->frr) / 2.0;
}

double f1(std::span<const ScoredPair> pairs, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const ScoredPair& p : pairs) {
    const bool accept = p.score >= threshold;
    if (accept && p.label == 1) ++tp;
    if (accept && p.label == 0) ++fp;
    if (!accept && p.label == 1) ++fn;
  }
  if (tp + fp + fn == 0) throw UndefinedMetric("f1: no positive labels and no positive predictions");
  return 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

MetricCell evaluate_cell(std::span<const ScoredPair> pairs) {
  MetricCell cell;
  const ClassCounts c = count_classes(pairs);
  cell.positives = c.pos;
  cell.negatives = c.neg;
  if (c.pos < kMinPerClass || c.neg < kMinPerClass) return cell;
  cell.eer = eer(pairs);
  cell.auc = auc(pairs);
  cell.f1 = f1(pairs);
  return cell;
}

MetricsReport build_report(std::span<const ScoredPair> pairs) {
  MetricsReport r;
  r.overall = evaluate_cell(pairs);
  for (std::size_t len = 1; len <= 4; ++len) {
    std::vector<ScoredPair> subset;
    for (const ScoredPair& p : pairs) {
      if (p.word_length == len) subset.push_back(p);
    }
    r.by_word_length[len - 1] = evaluate_cell(subset);
  }
  std::vector<ScoredPair> oov;
  for (const ScoredPair& p : pairs) {
    if (p.oov) oov.push_back(p);
  }
  r.oov = evaluate_cell(oov);
  return r;
}

std::string report_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["overall"] = cell_json(report.overall);
  nlohmann::ordered_json by_len, counts;
  counts["overall"] = counts_json(report.overall);
  for (std::size_t i = 0; i < 4; ++i) {
    by_len[std::to_string(i + 1)] = cell_json(report.by_word_length[i]);
    counts[std::to_string(i + 1)] = counts_json(report.by_word_length[i]);
  }
  counts["oov"] = counts_json(report.oov);
  j["by_word_length"] = by_len;
  j["oov"] = cell_json(report.oov);
  j["counts"] = counts;
  return j.dump(2) + "\n";
}

std::string report_csv(const MetricsReport& report) {
  std::string out = "cell,eer,auc,f1,positives,negatives\n";
  auto row = [&](const std::string& name, const MetricCell& c) {
    out += name + "," + csv_value(c.eer) + "," + csv_value(c.auc) + "," + csv_value(c.f1) + "," +
           std::to_string(c.positives) + "," + std::to_string(c.negatives) + "\n";
  };
  row("overall", report.overall);
  for (std::size_t i = 0; i < 4; ++i) row("word_length_" + std::to_string(i + 1), report.by_word_length[i]);
  row("oov", report.oov);
  return out;
}

std::string roc_csv(std::span<const RocPoint> points) {
  std::string out = "threshold,far,frr\n";
  char buf[96];
  for (const RocPoint& p : points) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.threshold, p.far, p.frr);
    out += buf;
  }
  return out;
}

void write_text(const std::string& text, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw FormatError(path.string() + ": write failed");
}

}  // namespace xkws::metrics
