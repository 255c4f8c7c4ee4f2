#pragma once

// Seeded synthetic student logs with known answer probabilities. Each user
// has a latent skill per part; a question's success probability is
// sigmoid((skill[part] - difficulty + attempt_bonus * seen_before) / noise).
// Lectures raise the skill of their part, answering raises it slightly.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "muse/datamodel.hpp"

namespace muse {

struct SimConfig {
  int n_users = 2000;
  int n_questions = 800;
  int n_lectures = 60;
  int parts = kPartCount;
  double mean_interactions = 80.0;
  int min_interactions = 10;
  double lecture_prob = 0.06;
  double lecture_gain = 0.25;    // skill added to the lecture's part
  double attempt_bonus = 0.4;    // logit bonus on a repeated question
  double practice_gain = 0.01;   // skill added per answered question of a part
  double repeat_prob = 0.1;      // chance a question step revisits a seen question
  double noise_scale = 1.0;      // logit temperature
  double skill_sd = 1.0;
  double skill_correlation = 0.7;  // shared component across a user's parts
  double difficulty_sd = 1.0;
  int tags_per_part = 15;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SimDataset {
  std::vector<InteractionRow> rows;  // grouped by user, chronological
  QuestionTable questions;
  LectureTable lectures;
  std::map<std::int64_t, double> truth;  // row_id -> p*
};

SimDataset generate(const SimConfig& config);

// Writes interactions.csv, questions.csv, lectures.csv and truth.csv.
void write_dataset(const std::filesystem::path& dir, const SimDataset& data);
std::map<std::int64_t, double> parse_truth(const std::filesystem::path& path);

// AUC of p* against the realized labels of the question rows. Throws
// InvalidArgument when truth and labelled rows do not pair up one-to-one.
double oracle_auc(const std::map<std::int64_t, double>& truth, std::span<const InteractionRow> rows);
double oracle_auc(const std::filesystem::path& truth_file, const std::filesystem::path& interactions_file);

}  // namespace muse
