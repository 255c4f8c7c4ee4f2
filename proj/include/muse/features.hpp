#pragma once

// Causal feature pipeline: exercise, response and lecture-state streams plus
// the nine global statistics, computed by folding a user's history in order.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "muse/datamodel.hpp"

namespace muse {

inline constexpr double kMaxLagSeconds = 300.0;
inline constexpr double kMaxElapsedSeconds = 300.0;
inline constexpr std::int64_t kHotnessCap = 22000;
inline constexpr int kTopLectureTags = 14;
inline constexpr int kOtherTagBucket = 15;
inline constexpr int kGlobalFeatureCount = 9;
inline constexpr double kHardnessSmoothing = 1.0;

// Response tokens. The response slot at step k carries the outcome of the
// previous question; kStart marks a user's first question, kMask hides it.
enum ResponseToken : int { kWrong = 0, kCorrect = 1, kMask = 2, kStart = 3 };
inline constexpr int kResponseVocab = 4;
inline constexpr int kExplanationAbsent = 2;

struct LastLecture {
  int part = 0;      // 1..7
  int type = 0;      // LectureType index 0..3
  int tag = 0;       // raw tag id
  bool operator==(const LastLecture&) const = default;
};

struct RunningUserStats {
  std::array<std::int64_t, 4> answer_counts{};
  std::int64_t correct_count = 0;
  std::int64_t answered_count = 0;
  std::int64_t lecture_watch_count = 0;
  std::map<std::int32_t, std::int64_t> attempt_counts;
  std::optional<LastLecture> last_lecture;

  // Ordering and response-side bookkeeping.
  std::optional<std::int64_t> last_timestamp;
  std::int64_t last_row_id = -1;
  std::optional<std::int64_t> last_question_timestamp;
  int last_response = kStart;

  bool operator==(const RunningUserStats&) const = default;
};

struct ContentStats {
  std::vector<std::int64_t> content_attempts;  // indexed by question id
  std::vector<std::int64_t> content_correct;
  std::array<std::int64_t, kPartCount + 1> part_attempts{};
  std::array<std::int64_t, kPartCount + 1> part_correct{};

  // Counts every labelled question row.
  static ContentStats build(const std::vector<InteractionRow>& rows, const QuestionTable& questions);
  std::int64_t attempts(std::int32_t content) const;
  std::int64_t correct(std::int32_t content) const;
};

// tag -> bucket 1..14 for the most frequent lecture tags; other tags map to 15.
using TagBuckets = std::unordered_map<int, int>;
TagBuckets build_tag_buckets(const std::vector<InteractionRow>& rows, const LectureTable& lectures);
int tag_bucket(const TagBuckets& buckets, int tag);

// Embedding table sizes covering every question/bundle id and question tag.
int content_vocab(const QuestionTable& questions);
int question_tag_vocab(const QuestionTable& questions);

struct FeatureContext {
  QuestionTable questions;
  LectureTable lectures;
  ContentStats content;
  TagBuckets tag_buckets;
};

struct GlobalFeatureVector {
  double hotness = 0.0;
  double hardness = 0.0;
  double part_hardness = 0.0;
  std::array<double, 4> response_ratio{};
  double cumulative_correct_rate = 0.0;
  double lecture_watch_feature = 0.0;

  std::array<double, kGlobalFeatureCount> to_array() const;
};

struct ExerciseFeatures {
  int content_id = 0;
  int bundle_id = 0;
  int part = 0;  // 0 marks padding
  std::vector<int> tags;
  int answer = 0;
  bool operator==(const ExerciseFeatures&) const = default;
};

struct ResponseFeatures {
  int task_container = 0;
  int response = kStart;
  double elapsed_seconds = 0.0;  // capped at 300
  bool elapsed_missing = true;
  double lag_seconds = 0.0;      // [0, 300]
  int had_explanation = kExplanationAbsent;
  std::int64_t attempt_count = 0;  // prior attempts of this content
  bool operator==(const ResponseFeatures&) const = default;
};

struct LectureState {
  int last_part = 0;  // 0..7
  int last_type = 0;  // 0..4
  int last_tag = 0;   // 0..15
  bool operator==(const LectureState&) const = default;
};

using GlobalArray = std::array<double, kGlobalFeatureCount>;

struct StepFeatures {
  std::int64_t row_id = -1;
  ExerciseFeatures ex;
  ResponseFeatures resp;
  LectureState lect;
  GlobalArray global{};
  int label = -1;  // -1 when the row has no answer
  bool operator==(const StepFeatures&) const = default;
};

double lag_time(std::int64_t prev_exercise_start_ms, std::int64_t cur_exercise_start_ms);
int attempt_feature_local(std::int64_t count);
double attempt_feature_global(std::int64_t count);
LectureState lecture_state(const RunningUserStats& stats, const TagBuckets& buckets);
GlobalFeatureVector global_features(const RunningUserStats& user, const ContentStats& content, const QuestionMeta& q);

// Features of a question row given the stats of everything before it.
StepFeatures make_step(const RunningUserStats& stats, const FeatureContext& ctx, const InteractionRow& row);
// Throws OrderingViolation unless row comes strictly after the last folded row.
void check_order(const RunningUserStats& stats, const InteractionRow& row);
// Folds one row into the stats; throws OrderingViolation if it is not later
// than the previous row.
void stream_update(RunningUserStats& stats, const FeatureContext& ctx, const InteractionRow& row);

// Step features for every question row among rows[0, end).
std::vector<StepFeatures> compute_steps(const UserHistory& history, const FeatureContext& ctx,
                                        std::size_t end = static_cast<std::size_t>(-1));

struct LocalFeatureFrame {
  int window = 0;
  std::vector<ExerciseFeatures> ex;
  std::vector<ResponseFeatures> resp;
  std::vector<LectureState> lect;
  std::vector<GlobalArray> global;
  std::vector<int> label;
  std::vector<std::uint8_t> valid;
  std::vector<std::int64_t> row_id;

  std::size_t valid_count() const;
  bool operator==(const LocalFeatureFrame&) const = default;
};

// Window of the `window` most recent steps ending at steps[end] (inclusive),
// left-padded so the last slot holds steps[end].
LocalFeatureFrame frame_from_steps(std::span<const StepFeatures> steps, std::size_t end, int window);
// Frame whose last slot is the question at history.rows[target_index].
LocalFeatureFrame build_frame(const UserHistory& history, std::size_t target_index, int window,
                              const FeatureContext& ctx);

// Binary frame cache. Schema (all little-endian):
//   header line "MUSE-FRAMES 1 <count>\n"
//   per frame: u32 window, then per slot:
//     i64 row_id, u8 valid, i32 label,
//     i32 content, i32 bundle, i32 part, i32 answer, u32 n_tags, i32 tags[n_tags],
//     i32 task_container, i32 response, f64 elapsed, u8 elapsed_missing, f64 lag,
//     i32 had_explanation, i64 attempt_count,
//     i32 last_part, i32 last_type, i32 last_tag, f64 global[9]
void write_frame_cache(const std::filesystem::path& path, std::span<const LocalFeatureFrame> frames);
std::vector<LocalFeatureFrame> read_frame_cache(const std::filesystem::path& path);

}  // namespace muse
