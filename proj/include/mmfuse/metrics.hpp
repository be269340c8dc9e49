#pragma once

#include <algorithm>
#include <numeric>
#include <optional>

#include "mmfuse/common.hpp"

#include <nlohmann/json.hpp>

namespace mmfuse {

struct MetricsReport {
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  std::optional<double> auroc, acc, f1, specificity, sensitivity, ppv, npv;

  long long total() const { return tp + fp + tn + fn; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["counts"] = {{"tp", tp}, {"fp", fp}, {"tn", tn}, {"fn", fn}};
    nlohmann::json m = nlohmann::json::object();
    auto put = [&](const char* name, const std::optional<double>& v) {
      if (v) m[name] = *v;  // undefined ratios stay absent, never 0
    };
    put("auroc", auroc);
    put("acc", acc);
    put("f1", f1);
    put("specificity", specificity);
    put("sensitivity", sensitivity);
    put("ppv", ppv);
    put("npv", npv);
    j["metrics"] = m;
    return j;
  }
};

// Rank-statistic AUROC: P(score_pos > score_neg) with ties counted 0.5.
// Returns nothing when only one class is present.
inline std::optional<double> auroc_rank(const std::vector<double>& scores,
                                        const std::vector<int>& labels) {
  std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  long long pos = 0, neg = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        pos_rank_sum += avg_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

inline MetricsReport metrics_from_counts(long long tp, long long fp, long long tn, long long fn) {
  MetricsReport r;
  r.tp = tp;
  r.fp = fp;
  r.tn = tn;
  r.fn = fn;
  auto ratio = [](long long num, long long den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.acc = ratio(tp + tn, tp + fp + tn + fn);
  r.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  r.specificity = ratio(tn, tn + fp);
  r.sensitivity = ratio(tp, tp + fn);
  r.ppv = ratio(tp, tp + fp);
  r.npv = ratio(tn, tn + fn);
  return r;
}

// Threshold rule: score >= threshold predicts positive.
inline MetricsReport compute_metrics(const std::vector<double>& scores,
                                     const std::vector<int>& labels, double threshold = 0.5) {
  if (scores.empty()) throw ContractError("compute_metrics: need at least one sample");
  if (scores.size() != labels.size()) {
    throw ContractError("compute_metrics: " + std::to_string(scores.size()) + " scores vs " +
                        std::to_string(labels.size()) + " labels");
  }
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw DataError("compute_metrics: label " + std::to_string(labels[i]) + " is not in {0,1}");
    }
    bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++tp : ++fn;
    } else {
      pred ? ++fp : ++tn;
    }
  }
  MetricsReport r = metrics_from_counts(tp, fp, tn, fn);
  r.auroc = auroc_rank(scores, labels);
  return r;
}

}  // namespace mmfuse
