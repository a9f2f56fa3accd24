#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "cpdg/common.hpp"

namespace cpdg {

struct MetricReport {
  double auc = 0;
  double ap = 0;
  double micro_f1 = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// AUC as the Mann-Whitney rank statistic with average ranks for ties;
// identical to pairwise counting with half credit for tied scores.
inline double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
  CPDG_REQUIRE(scores.size() == labels.size(), "scores/labels length mismatch");
  std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  std::size_t p = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) {
        pos_rank_sum += avg_rank;
        ++p;
      }
    i = j;
  }
  std::size_t neg = n - p;
  CPDG_REQUIRE(p > 0 && neg > 0, "AUC needs both classes present");
  return (pos_rank_sum - static_cast<double>(p) * (static_cast<double>(p) + 1) / 2.0) /
         (static_cast<double>(p) * static_cast<double>(neg));
}

// Average precision over distinct-score thresholds (descending):
// sum over thresholds of (recall step) * precision.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  CPDG_REQUIRE(scores.size() == labels.size(), "scores/labels length mismatch");
  std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t total_pos = 0;
  for (int l : labels) total_pos += (l == 1);
  CPDG_REQUIRE(total_pos > 0 && total_pos < n, "AP needs both classes present");

  double ap = 0;
  double prev_recall = 0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) ++tp;
      else ++fp;
    }
    double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// Micro-averaged F1 at threshold 0.5, aggregating TP/FP/FN over both classes.
inline double micro_f1_score(const std::vector<double>& scores,
                             const std::vector<int>& labels, double threshold = 0.5) {
  CPDG_REQUIRE(!scores.empty() && scores.size() == labels.size(), "bad metric input");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int pred = scores[i] >= threshold ? 1 : 0;
    for (int cls : {0, 1}) {
      bool is_pred = pred == cls;
      bool is_true = labels[i] == cls;
      if (is_pred && is_true) ++tp;
      else if (is_pred) ++fp;
      else if (is_true) ++fn;
    }
  }
  return 2.0 * static_cast<double>(tp) /
         (2.0 * static_cast<double>(tp) + static_cast<double>(fp) + static_cast<double>(fn));
}

inline MetricReport compute_metrics(const std::vector<double>& scores,
                                    const std::vector<int>& labels) {
  MetricReport r;
  r.auc = auc_score(scores, labels);
  r.ap = average_precision(scores, labels);
  r.micro_f1 = micro_f1_score(scores, labels);
  for (int l : labels) (l == 1 ? r.positives : r.negatives) += 1;
  return r;
}

}  // namespace cpdg
