#include "cpdg/metrics.hpp"

#include <gtest/gtest.h>

#include "cpdg/common.hpp"
#include "oracles.hpp"

using namespace cpdg;

TEST(Auc, HandWorkedCase) {
  // 3 concordant of 4 pos/neg pairs
  std::vector<double> scores = {0.9, 0.8, 0.3, 0.2};
  std::vector<int> labels = {1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(auc_score(scores, labels), 0.75);
}

TEST(Auc, PerfectAndExtremes) {
  std::vector<double> scores = {0.9, 0.8, 0.2, 0.1};
  std::vector<int> labels = {1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(auc_score(scores, labels), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(scores, labels), 1.0);

  std::vector<int> inverted = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auc_score(scores, inverted), 0.0);
}

TEST(Auc, TiesGetHalfCredit) {
  std::vector<double> scores = {0.5, 0.5};
  std::vector<int> labels = {1, 0};
  EXPECT_DOUBLE_EQ(auc_score(scores, labels), 0.5);
}

TEST(Auc, RandomScoresNearHalf) {
  StreamRng rng(77, 0);
  std::vector<double> scores(10000);
  std::vector<int> labels(10000);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform();
    labels[i] = static_cast<int>(rng.below(2));
  }
  EXPECT_NEAR(auc_score(scores, labels), 0.5, 0.02);
}

TEST(Auc, SingleClassRejected) {
  std::vector<double> scores = {0.4, 0.6};
  std::vector<int> ones = {1, 1};
  EXPECT_THROW(auc_score(scores, ones), Error);
  EXPECT_THROW(average_precision(scores, ones), Error);
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  StreamRng rng(5, 0);
  std::vector<double> scores(200);
  std::vector<int> labels(200);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform_range(-3, 3);
    labels[i] = static_cast<int>(rng.below(2));
  }
  labels[0] = 1;
  labels[1] = 0;
  double base = auc_score(scores, labels);
  std::vector<double> warped(scores);
  for (auto& s : warped) s = std::exp(2.0 * s) + 7.0;  // strictly monotone
  EXPECT_NEAR(auc_score(warped, labels), base, 1e-12);
}

TEST(Metrics, MatchBruteForceOracles) {
  StreamRng rng(31337, 0);
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t n = 4 + rng.below(40);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      // quantized scores so ties actually happen
      scores[i] = std::floor(rng.uniform() * 8.0) / 8.0;
      labels[i] = static_cast<int>(rng.below(2));
      (labels[i] ? has_pos : has_neg) = true;
    }
    if (!has_pos) labels[0] = 1;
    if (!has_neg) labels[1] = 0;
    EXPECT_NEAR(auc_score(scores, labels), oracle::auc_pairwise(scores, labels), 1e-10);
    EXPECT_NEAR(average_precision(scores, labels), oracle::ap_enumeration(scores, labels),
                1e-10);
  }
}

TEST(MicroF1, BinaryEqualsAccuracy) {
  std::vector<double> scores = {0.9, 0.4, 0.6, 0.1, 0.7};
  std::vector<int> labels = {1, 0, 0, 0, 1};
  // predictions at 0.5: 1,0,1,0,1 -> 4 of 5 correct
  EXPECT_DOUBLE_EQ(micro_f1_score(scores, labels), 0.8);
}

TEST(MetricReport, CountsClasses) {
  std::vector<double> scores = {0.9, 0.8, 0.3, 0.2};
  std::vector<int> labels = {1, 0, 1, 0};
  auto r = compute_metrics(scores, labels);
  EXPECT_EQ(r.positives, 2u);
  EXPECT_EQ(r.negatives, 2u);
  EXPECT_DOUBLE_EQ(r.auc, 0.75);
}
