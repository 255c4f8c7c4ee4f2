#pragma once

// Ranking and calibration metrics over binary labels.

#include <cstddef>
#include <span>
#include <string>

namespace muse {

// Rank-statistic AUC with average ranks for tied scores; equals
// P(score+ > score-) + P(tie) / 2. Throws InvalidArgument unless both classes
// are present.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
// Mean BCE with probabilities clamped to [1e-7, 1 - 1e-7].
double logloss(std::span<const double> scores, std::span<const int> labels);
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct EvalReport {
  double auc = 0.0;
  double accuracy = 0.0;
  double logloss = 0.0;
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
};

EvalReport evaluate(std::span<const double> scores, std::span<const int> labels);
// "key = value" lines, each key prefixed with `prefix` when given.
std::string format_report(const EvalReport& report, const std::string& prefix = "");

}  // namespace muse
