#include "muse/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <vector>

#include "muse/error.hpp"
#include "muse/numcore.hpp"

namespace muse {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::to_string(scores.size()) + " scores but " +
                                              std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw Error(ErrorKind::EmptyDataset, "metric over no samples");
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorKind::InvalidArgument, "label " + std::to_string(y) + " is not 0/1");
  }
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positive_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1..j share their average.
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        positive_rank_sum += avg;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::InvalidArgument, "AUC needs both classes present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double logloss(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) total += nc::bce(scores[i], labels[i]);
  return total / static_cast<double>(scores.size());
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += (scores[i] >= threshold ? 1 : 0) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

EvalReport evaluate(std::span<const double> scores, std::span<const int> labels) {
  EvalReport r;
  r.auc = roc_auc(scores, labels);
  r.accuracy = accuracy(scores, labels);
  r.logloss = logloss(scores, labels);
  r.n_positive = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  r.n_negative = labels.size() - r.n_positive;
  return r;
}

std::string format_report(const EvalReport& report, const std::string& prefix) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%sauc = %.10f\n%saccuracy = %.10f\n%slogloss = %.10f\n%sn_positive = %zu\n%sn_negative = %zu\n",
                prefix.c_str(), report.auc, prefix.c_str(), report.accuracy, prefix.c_str(), report.logloss,
                prefix.c_str(), report.n_positive, prefix.c_str(), report.n_negative);
  return buf;
}

}  // namespace muse
