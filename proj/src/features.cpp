#include "muse/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "muse/error.hpp"

namespace muse {

ContentStats ContentStats::build(const std::vector<InteractionRow>& rows, const QuestionTable& questions) {
  ContentStats s;
  std::int32_t max_id = 0;
  for (const auto& [id, q] : questions.all()) max_id = std::max(max_id, id);
  s.content_attempts.assign(static_cast<std::size_t>(max_id) + 1, 0);
  s.content_correct.assign(static_cast<std::size_t>(max_id) + 1, 0);
  for (const auto& r : rows) {
    if (!r.is_question() || !r.answered_correctly) continue;
    const QuestionMeta& q = questions.at(r.content_id);
    const auto id = static_cast<std::size_t>(r.content_id);
    s.content_attempts[id] += 1;
    s.content_correct[id] += *r.answered_correctly;
    s.part_attempts[static_cast<std::size_t>(q.part)] += 1;
    s.part_correct[static_cast<std::size_t>(q.part)] += *r.answered_correctly;
  }
  return s;
}

std::int64_t ContentStats::attempts(std::int32_t content) const {
  const auto id = static_cast<std::size_t>(content);
  return content >= 0 && id < content_attempts.size() ? content_attempts[id] : 0;
}

std::int64_t ContentStats::correct(std::int32_t content) const {
  const auto id = static_cast<std::size_t>(content);
  return content >= 0 && id < content_correct.size() ? content_correct[id] : 0;
}

TagBuckets build_tag_buckets(const std::vector<InteractionRow>& rows, const LectureTable& lectures) {
  std::map<int, std::int64_t> freq;
  for (const auto& r : rows) {
    if (r.is_question()) continue;
    freq[lectures.at(r.content_id).tag] += 1;
  }
  std::vector<std::pair<int, std::int64_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  TagBuckets buckets;
  for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(kTopLectureTags); ++i) {
    buckets[ranked[i].first] = static_cast<int>(i) + 1;
  }
  return buckets;
}

int tag_bucket(const TagBuckets& buckets, int tag) {
  auto it = buckets.find(tag);
  return it == buckets.end() ? kOtherTagBucket : it->second;
}

GlobalArray GlobalFeatureVector::to_array() const {
  return {hotness,           hardness,          part_hardness,
          response_ratio[0], response_ratio[1], response_ratio[2],
          response_ratio[3], cumulative_correct_rate, lecture_watch_feature};
}

int content_vocab(const QuestionTable& questions) {
  int vocab = 1;
  for (const auto& [id, q] : questions.all()) vocab = std::max({vocab, id + 1, q.bundle_id + 1});
  return vocab;
}

int question_tag_vocab(const QuestionTable& questions) {
  int vocab = 1;
  for (const auto& [id, q] : questions.all())
    for (int t : q.tags) vocab = std::max(vocab, t + 1);
  return vocab;
}

double lag_time(std::int64_t prev_exercise_start_ms, std::int64_t cur_exercise_start_ms) {
  if (cur_exercise_start_ms < prev_exercise_start_ms) {
    throw Error(ErrorKind::OrderingViolation, "exercise starts before the previous one (" +
                                                  std::to_string(cur_exercise_start_ms) + " < " +
                                                  std::to_string(prev_exercise_start_ms) + ")");
  }
  const double seconds = static_cast<double>(cur_exercise_start_ms - prev_exercise_start_ms) / 1000.0;
  return std::min(seconds, kMaxLagSeconds);
}

int attempt_feature_local(std::int64_t count) { return count > 0 ? 1 : 0; }

double attempt_feature_global(std::int64_t count) {
  // -expm1(-x) keeps the small-count values accurate.
  return -std::expm1(-static_cast<double>(count));
}

LectureState lecture_state(const RunningUserStats& stats, const TagBuckets& buckets) {
  if (!stats.last_lecture) return {};
  const auto& l = *stats.last_lecture;
  return LectureState{l.part, l.type + 1, tag_bucket(buckets, l.tag)};
}

GlobalFeatureVector global_features(const RunningUserStats& user, const ContentStats& content, const QuestionMeta& q) {
  GlobalFeatureVector f;
  const std::int64_t attempts = content.attempts(q.question_id);
  const std::int64_t correct = content.correct(q.question_id);
  f.hotness = static_cast<double>(std::min(attempts, kHotnessCap)) / static_cast<double>(kHotnessCap);
  f.hardness = (static_cast<double>(correct) + kHardnessSmoothing) /
               (static_cast<double>(attempts) + 2.0 * kHardnessSmoothing);
  const auto part = static_cast<std::size_t>(q.part);
  f.part_hardness = (static_cast<double>(content.part_correct[part]) + kHardnessSmoothing) /
                    (static_cast<double>(content.part_attempts[part]) + 2.0 * kHardnessSmoothing);
  std::int64_t total = 0;
  for (auto c : user.answer_counts) total += c;
  for (std::size_t i = 0; i < 4; ++i) {
    f.response_ratio[i] = total == 0 ? 0.25 : static_cast<double>(user.answer_counts[i]) / static_cast<double>(total);
  }
  f.cumulative_correct_rate = user.answered_count == 0 ? 0.5
                                                       : static_cast<double>(user.correct_count) /
                                                             static_cast<double>(user.answered_count);
  f.lecture_watch_feature = -std::expm1(-static_cast<double>(user.lecture_watch_count));
  return f;
}

StepFeatures make_step(const RunningUserStats& stats, const FeatureContext& ctx, const InteractionRow& row) {
  if (!row.is_question()) {
    throw Error(ErrorKind::InvalidArgument, "row " + std::to_string(row.row_id) + " is a lecture, not a question");
  }
  const QuestionMeta& q = ctx.questions.at(row.content_id);
  StepFeatures s;
  s.row_id = row.row_id;
  s.ex = ExerciseFeatures{q.question_id, q.bundle_id, q.part, q.tags, q.correct_answer};
  s.resp.task_container = row.task_container_id;
  s.resp.response = stats.last_response;
  if (row.prior_elapsed_time) {
    s.resp.elapsed_seconds = std::min(*row.prior_elapsed_time / 1000.0, kMaxElapsedSeconds);
    s.resp.elapsed_missing = false;
  }
  s.resp.lag_seconds = stats.last_question_timestamp ? lag_time(*stats.last_question_timestamp, row.timestamp) : 0.0;
  s.resp.had_explanation = row.prior_had_explanation.value_or(kExplanationAbsent);
  if (auto it = stats.attempt_counts.find(row.content_id); it != stats.attempt_counts.end()) {
    s.resp.attempt_count = it->second;
  }
  s.lect = lecture_state(stats, ctx.tag_buckets);
  s.global = global_features(stats, ctx.content, q).to_array();
  s.label = row.answered_correctly.value_or(-1);
  return s;
}

void check_order(const RunningUserStats& stats, const InteractionRow& row) {
  if (stats.last_timestamp &&
      (row.timestamp < *stats.last_timestamp ||
       (row.timestamp == *stats.last_timestamp && row.row_id <= stats.last_row_id))) {
    throw Error(ErrorKind::OrderingViolation, "row " + std::to_string(row.row_id) + " arrives after row " +
                                                  std::to_string(stats.last_row_id));
  }
}

void stream_update(RunningUserStats& stats, const FeatureContext& ctx, const InteractionRow& row) {
  check_order(stats, row);
  stats.last_timestamp = row.timestamp;
  stats.last_row_id = row.row_id;
  if (row.is_question()) {
    if (row.user_answer) stats.answer_counts[static_cast<std::size_t>(*row.user_answer)] += 1;
    if (row.answered_correctly) {
      stats.answered_count += 1;
      stats.correct_count += *row.answered_correctly;
    }
    stats.attempt_counts[row.content_id] += 1;
    stats.last_question_timestamp = row.timestamp;
    stats.last_response = row.answered_correctly ? *row.answered_correctly : kMask;
  } else {
    const LectureMeta& l = ctx.lectures.at(row.content_id);
    stats.lecture_watch_count += 1;
    stats.last_lecture = LastLecture{l.part, static_cast<int>(l.type), l.tag};
  }
}

std::vector<StepFeatures> compute_steps(const UserHistory& history, const FeatureContext& ctx, std::size_t end) {
  end = std::min(end, history.rows.size());
  std::vector<StepFeatures> steps;
  RunningUserStats stats;
  for (std::size_t i = 0; i < end; ++i) {
    const auto& row = history.rows[i];
    if (row.is_question()) steps.push_back(make_step(stats, ctx, row));
    stream_update(stats, ctx, row);
  }
  return steps;
}

std::size_t LocalFeatureFrame::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

LocalFeatureFrame frame_from_steps(std::span<const StepFeatures> steps, std::size_t end, int window) {
  if (window < 1) throw Error(ErrorKind::InvalidArgument, "window must be positive");
  if (end >= steps.size()) throw Error(ErrorKind::IndexOutOfRange, "frame end beyond the step sequence");
  const auto W = static_cast<std::size_t>(window);
  const std::size_t start = end + 1 >= W ? end + 1 - W : 0;
  const std::size_t count = end - start + 1;
  const std::size_t pad = W - count;

  LocalFeatureFrame f;
  f.window = window;
  f.ex.assign(W, ExerciseFeatures{});
  f.resp.assign(W, ResponseFeatures{});
  f.lect.assign(W, LectureState{});
  f.global.assign(W, GlobalArray{});
  f.label.assign(W, -1);
  f.valid.assign(W, 0);
  f.row_id.assign(W, -1);
  for (std::size_t i = 0; i < count; ++i) {
    const StepFeatures& s = steps[start + i];
    const std::size_t slot = pad + i;
    f.ex[slot] = s.ex;
    f.resp[slot] = s.resp;
    f.lect[slot] = s.lect;
    f.global[slot] = s.global;
    f.label[slot] = s.label;
    f.valid[slot] = 1;
    f.row_id[slot] = s.row_id;
  }
  return f;
}

LocalFeatureFrame build_frame(const UserHistory& history, std::size_t target_index, int window,
                              const FeatureContext& ctx) {
  if (target_index >= history.rows.size()) throw Error(ErrorKind::IndexOutOfRange, "target beyond history");
  if (!history.rows[target_index].is_question()) {
    throw Error(ErrorKind::InvalidArgument, "frame target row " + std::to_string(history.rows[target_index].row_id) +
                                                " is a lecture");
  }
  const auto steps = compute_steps(history, ctx, target_index + 1);
  return frame_from_steps(steps, steps.size() - 1, window);
}

// ---- frame cache -----------------------------------------------------------

namespace {

class LeWriter {
 public:
  template <typename T>
  void put(T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    U bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class LeReader {
 public:
  explicit LeReader(std::string bytes) : bytes_(std::move(bytes)) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    if (pos_ + sizeof(T) > bytes_.size()) throw Error(ErrorKind::MalformedRow, "frame cache truncated");
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_frame_cache(const std::filesystem::path& path, std::span<const LocalFeatureFrame> frames) {
  LeWriter w;
  for (const auto& f : frames) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.window));
    for (std::size_t s = 0; s < static_cast<std::size_t>(f.window); ++s) {
      w.put<std::int64_t>(f.row_id[s]);
      w.put<std::uint8_t>(f.valid[s]);
      w.put<std::int32_t>(f.label[s]);
      const auto& e = f.ex[s];
      w.put<std::int32_t>(e.content_id);
      w.put<std::int32_t>(e.bundle_id);
      w.put<std::int32_t>(e.part);
      w.put<std::int32_t>(e.answer);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(e.tags.size()));
      for (int t : e.tags) w.put<std::int32_t>(t);
      const auto& r = f.resp[s];
      w.put<std::int32_t>(r.task_container);
      w.put<std::int32_t>(r.response);
      w.put<double>(r.elapsed_seconds);
      w.put<std::uint8_t>(r.elapsed_missing ? 1 : 0);
      w.put<double>(r.lag_seconds);
      w.put<std::int32_t>(r.had_explanation);
      w.put<std::int64_t>(r.attempt_count);
      w.put<std::int32_t>(f.lect[s].last_part);
      w.put<std::int32_t>(f.lect[s].last_type);
      w.put<std::int32_t>(f.lect[s].last_tag);
      for (double g : f.global[s]) w.put<double>(g);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "MUSE-FRAMES 1 " << frames.size() << '\n';
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
}

std::vector<LocalFeatureFrame> read_frame_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::string magic, version;
  std::size_t count = 0;
  in >> magic >> version >> count;
  if (magic != "MUSE-FRAMES" || version != "1") throw Error(ErrorKind::MalformedRow, path.string() + ": bad header");
  in.get();
  std::ostringstream rest;
  rest << in.rdbuf();
  LeReader r(rest.str());
  std::vector<LocalFeatureFrame> frames;
  for (std::size_t k = 0; k < count; ++k) {
    LocalFeatureFrame f;
    f.window = static_cast<int>(r.get<std::uint32_t>());
    const auto W = static_cast<std::size_t>(f.window);
    f.ex.resize(W);
    f.resp.resize(W);
    f.lect.resize(W);
    f.global.resize(W);
    f.label.resize(W);
    f.valid.resize(W);
    f.row_id.resize(W);
    for (std::size_t s = 0; s < W; ++s) {
      f.row_id[s] = r.get<std::int64_t>();
      f.valid[s] = r.get<std::uint8_t>();
      f.label[s] = r.get<std::int32_t>();
      auto& e = f.ex[s];
      e.content_id = r.get<std::int32_t>();
      e.bundle_id = r.get<std::int32_t>();
      e.part = r.get<std::int32_t>();
      e.answer = r.get<std::int32_t>();
      e.tags.resize(r.get<std::uint32_t>());
      for (auto& t : e.tags) t = r.get<std::int32_t>();
      auto& rs = f.resp[s];
      rs.task_container = r.get<std::int32_t>();
      rs.response = r.get<std::int32_t>();
      rs.elapsed_seconds = r.get<double>();
      rs.elapsed_missing = r.get<std::uint8_t>() != 0;
      rs.lag_seconds = r.get<double>();
      rs.had_explanation = r.get<std::int32_t>();
      rs.attempt_count = r.get<std::int64_t>();
      f.lect[s].last_part = r.get<std::int32_t>();
      f.lect[s].last_type = r.get<std::int32_t>();
      f.lect[s].last_tag = r.get<std::int32_t>();
      for (double& g : f.global[s]) g = r.get<double>();
    }
    frames.push_back(std::move(f));
  }
  if (!r.done()) throw Error(ErrorKind::MalformedRow, path.string() + ": trailing bytes");
  return frames;
}

}  // namespace muse
