// SPDX-License-Identifier: Apache-2.0
#include "xkws/errors.hpp"
#include "xkws/metrics.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <random>

namespace xkws::metrics {
namespace {

std::vector<ScoredPair> make(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<ScoredPair> out;
  for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], labels[i], 1, false, data::Difficulty::kEasy});
  return out;
}

double pairwise_auc(const std::vector<ScoredPair>& p) {
  double wins = 0.0, total = 0.0;
  for (const auto& a : p) {
    if (a.label != 1) continue;
    for (const auto& b : p) {
      if (b.label != 0) continue;
      total += 1.0;
      wins += a.score > b.score ? 1.0 : (a.score == b.score ? 0.5 : 0.0);
    }
  }
  return 100.0 * wins / total;
}

std::vector<ScoredPair> random_instance(std::mt19937_64& rng, bool coarse) {
  std::uniform_int_distribution<int> size(2, 50);
  std::uniform_int_distribution<int> level(0, 9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = size(rng);
  std::vector<ScoredPair> p;
  for (int i = 0; i < n; ++i) {
    const int label = i == 0 ? 1 : (i == 1 ? 0 : static_cast<int>(u(rng) < 0.5));
    const double s = coarse ? level(rng) / 10.0 : u(rng);
    p.push_back({s, label, 1, false, data::Difficulty::kEasy});
  }
  return p;
}

TEST(Auc, Examples) {
  EXPECT_DOUBLE_EQ(auc(make({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1})), 75.0);
  EXPECT_DOUBLE_EQ(auc(make({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1})), 100.0);
  EXPECT_DOUBLE_EQ(auc(make({0.5, 0.5, 0.5}, {0, 1, 1})), 50.0);
  EXPECT_THROW(auc(make({0.1, 0.2}, {1, 1})), UndefinedMetric);
}

TEST(Auc, MatchesPairwiseOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto p = random_instance(rng, t % 2 == 0);
    EXPECT_NEAR(auc(p), pairwise_auc(p), 1e-12);
  }
}

TEST(Eer, Examples) {
  EXPECT_DOUBLE_EQ(eer(make({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})), 0.0);
  EXPECT_DOUBLE_EQ(eer(make({0.9, 0.8, 0.3, 0.2}, {1, 0, 1, 0})), 50.0);
  EXPECT_DOUBLE_EQ(eer(make({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1})), 100.0);
  EXPECT_THROW(eer(make({0.1}, {0})), UndefinedMetric);
}

TEST(Eer, TieBreakPrefersSmallerTotalError) {
  // Thresholds 0.9 and 0.3 both give |FAR - FRR| = 1/2; 0.3 wins with a
  // smaller sum... check against a direct recomputation instead of by hand.
  const auto p = make({0.9, 0.7, 0.6, 0.3, 0.2}, {1, 0, 0, 1, 1});
  double best_gap = 1e9, best_sum = 1e9;
  for (const auto& t : p) {
    double fa = 0, fr = 0;
    for (const auto& q : p) {
      if (q.label == 0 && q.score >= t.score) fa += 1.0 / 2;
      if (q.label == 1 && q.score < t.score) fr += 1.0 / 3;
    }
    const double gap = std::abs(fa - fr);
    if (gap < best_gap - 1e-15 || (std::abs(gap - best_gap) <= 1e-15 && fa + fr < best_sum)) {
      best_gap = gap;
      best_sum = fa + fr;
    }
  }
  EXPECT_NEAR(eer(p), 50.0 * best_sum, 1e-12);
}

TEST(Eer, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    auto p = random_instance(rng, t % 2 == 0);
    const double e = eer(p), a = auc(p);
    for (auto& q : p) q.score = std::exp(3.0 * q.score) - 7.0;
    EXPECT_EQ(eer(p), e);
    EXPECT_NEAR(auc(p), a, 1e-12);
  }
}

TEST(F1, Examples) {
  EXPECT_DOUBLE_EQ(f1(make({0.9, 0.1}, {1, 0})), 100.0);
  EXPECT_DOUBLE_EQ(f1(make({0.9, 0.6, 0.1}, {1, 0, 1})), 50.0);
  EXPECT_THROW(f1(make({0.1, 0.2}, {0, 0})), UndefinedMetric);
  EXPECT_DOUBLE_EQ(f1(make({0.5}, {1})), 100.0);  // threshold is inclusive
}

TEST(Roc, PointsDescendAndEndAtFullAcceptance) {
  const auto pts = roc_points(make({0.9, 0.8, 0.8, 0.2}, {1, 0, 1, 0}));
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_EQ(pts[1].threshold, 0.8);
  EXPECT_DOUBLE_EQ(pts[1].far, 0.5);
  EXPECT_DOUBLE_EQ(pts[1].frr, 0.0);
  EXPECT_DOUBLE_EQ(pts.back().far, 1.0);
}

TEST(Report, CellsAndJson) {
  std::vector<ScoredPair> p;
  for (int i = 0; i < 6; ++i) {
    const std::size_t len = i < 3 ? 1 : 2;
    p.push_back({0.9 - 0.01 * i, 1, len, i == 0, data::Difficulty::kPositive});
    p.push_back({0.1 + 0.01 * i, 0, len, i == 0, data::Difficulty::kEasy});
  }
  const MetricsReport r = build_report(p);
  EXPECT_EQ(r.overall.auc, auc(p));
  EXPECT_EQ(*r.overall.eer, 0.0);
  EXPECT_TRUE(r.by_word_length[0].auc.has_value());
  EXPECT_FALSE(r.by_word_length[2].auc.has_value());
  EXPECT_FALSE(r.by_word_length[3].eer.has_value());
  EXPECT_FALSE(r.oov.auc.has_value());  // one pair per class
  EXPECT_EQ(r.oov.positives, 1u);

  const auto j = nlohmann::json::parse(report_json(r));
  EXPECT_EQ(j["overall"]["auc"], 100.0);
  EXPECT_TRUE(j["by_word_length"]["3"]["auc"].is_null());
  EXPECT_EQ(j["counts"]["2"]["negatives"], 3);
  EXPECT_TRUE(j["oov"]["f1"].is_null());
  EXPECT_EQ(report_json(r), report_json(build_report(p)));

  const std::string csv = report_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "cell,eer,auc,f1,positives,negatives");
  EXPECT_NE(csv.find("overall,0.00,100.00,100.00,6,6"), std::string::npos) << csv;
  EXPECT_NE(csv.find("word_length_3,,,,0,0"), std::string::npos) << csv;
}

TEST(Report, RoundsToTwoDecimals) {
  const auto p = make({0.1, 0.4, 0.35, 0.8, 0.3, 0.6}, {0, 0, 1, 1, 0, 1});
  const auto j = nlohmann::json::parse(report_json(build_report(p)));
  const double a = j["overall"]["auc"];
  EXPECT_DOUBLE_EQ(a, std::round(auc(p) * 100.0) / 100.0);
}

}  // namespace
}  // namespace xkws::metrics
