#pragma once

// Riiid/EdNet-format interaction logs and content metadata.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace muse {

enum class ContentType : std::uint8_t { Question = 0, Lecture = 1 };

struct InteractionRow {
  std::int64_t row_id = 0;
  std::int64_t timestamp = 0;  // ms since the user's first event
  std::int64_t user_id = 0;
  std::int32_t content_id = 0;
  ContentType content_type = ContentType::Question;
  std::int32_t task_container_id = 0;
  std::optional<int> user_answer;         // 0..3, questions only
  std::optional<int> answered_correctly;  // 0/1, questions only
  std::optional<double> prior_elapsed_time;  // ms
  std::optional<int> prior_had_explanation;  // 0/1

  bool is_question() const noexcept { return content_type == ContentType::Question; }
  bool operator==(const InteractionRow&) const = default;
};

struct QuestionMeta {
  std::int32_t question_id = 0;
  std::int32_t bundle_id = 0;
  int correct_answer = 0;  // 0..3
  int part = 1;            // 1..7
  std::vector<int> tags;
  bool tags_empty = false;  // set when the tags field was blank
};

enum class LectureType : std::uint8_t { Concept = 0, SolvingQuestion = 1, Intention = 2, Starter = 3 };
inline constexpr int kLectureTypeCount = 4;
inline constexpr int kPartCount = 7;

struct LectureMeta {
  std::int32_t lecture_id = 0;
  int tag = 0;
  int part = 1;
  LectureType type = LectureType::Concept;
};

const char* to_string(LectureType type);
LectureType parse_lecture_type(const std::string& text);

class QuestionTable {
 public:
  void insert(QuestionMeta q);
  // Throws UnknownContentId.
  const QuestionMeta& at(std::int32_t id) const;
  bool contains(std::int32_t id) const { return by_id_.contains(id); }
  std::size_t size() const noexcept { return by_id_.size(); }
  const std::map<std::int32_t, QuestionMeta>& all() const { return by_id_; }

 private:
  std::map<std::int32_t, QuestionMeta> by_id_;
};

class LectureTable {
 public:
  void insert(LectureMeta l);
  const LectureMeta& at(std::int32_t id) const;
  bool contains(std::int32_t id) const { return by_id_.contains(id); }
  std::size_t size() const noexcept { return by_id_.size(); }
  const std::map<std::int32_t, LectureMeta>& all() const { return by_id_; }

 private:
  std::map<std::int32_t, LectureMeta> by_id_;
};

struct UserHistory {
  std::int64_t user_id = 0;
  std::vector<InteractionRow> rows;  // sorted by (timestamp, row_id)
};

inline constexpr const char* kInteractionsHeader =
    "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,user_answer,answered_correctly,"
    "prior_question_elapsed_time,prior_question_had_explanation";
inline constexpr const char* kQuestionsHeader = "question_id,bundle_id,correct_answer,part,tags";
inline constexpr const char* kLecturesHeader = "lecture_id,tag,part,type_of";

std::vector<InteractionRow> parse_interactions(const std::filesystem::path& path);
std::vector<InteractionRow> parse_interactions_text(const std::string& text, const std::string& source = "<text>");
QuestionTable parse_questions(const std::filesystem::path& path);
QuestionTable parse_questions_text(const std::string& text, const std::string& source = "<text>");
LectureTable parse_lectures(const std::filesystem::path& path);
LectureTable parse_lectures_text(const std::string& text, const std::string& source = "<text>");

std::string format_interaction(const InteractionRow& row);
std::string format_interactions(const std::vector<InteractionRow>& rows);
std::string format_questions(const QuestionTable& questions);
std::string format_lectures(const LectureTable& lectures);

std::map<std::int64_t, UserHistory> group_by_user(const std::vector<InteractionRow>& rows);

struct TailSplit {
  std::vector<InteractionRow> train;
  std::vector<InteractionRow> blend;
};

// The blend set is the final ceil(fraction * N) rows in the given order.
TailSplit split_tail(const std::vector<InteractionRow>& rows, double holdout_fraction);
std::size_t tail_size(std::size_t n, double holdout_fraction);

}  // namespace muse
