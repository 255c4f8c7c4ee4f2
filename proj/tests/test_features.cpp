#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "muse/error.hpp"
#include "muse/features.hpp"
#include "support.hpp"

using namespace muse;
using muse::testing::tiny_world;

namespace {

InteractionRow question(std::int64_t id, std::int64_t ts, int content, int answer, int correct) {
  InteractionRow r;
  r.row_id = id;
  r.timestamp = ts;
  r.user_id = 1;
  r.content_id = content;
  r.user_answer = answer;
  r.answered_correctly = correct;
  return r;
}

InteractionRow lecture(std::int64_t id, std::int64_t ts, int content) {
  InteractionRow r;
  r.row_id = id;
  r.timestamp = ts;
  r.user_id = 1;
  r.content_id = content;
  r.content_type = ContentType::Lecture;
  return r;
}

// Recomputes the user-side step features of history.rows[k] directly from
// rows[0, k) without any running state.
StepFeatures brute_force_step(const UserHistory& h, std::size_t k, const FeatureContext& ctx) {
  const auto& row = h.rows[k];
  const auto& q = ctx.questions.at(row.content_id);
  std::array<std::int64_t, 4> answers{};
  std::int64_t correct = 0, answered = 0, lectures = 0, attempts = 0;
  std::optional<std::size_t> last_q, last_l;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& r = h.rows[i];
    if (r.is_question()) {
      if (r.user_answer) ++answers[static_cast<std::size_t>(*r.user_answer)];
      if (r.answered_correctly) {
        ++answered;
        correct += *r.answered_correctly;
      }
      attempts += r.content_id == row.content_id;
      last_q = i;
    } else {
      ++lectures;
      last_l = i;
    }
  }
  StepFeatures s;
  s.row_id = row.row_id;
  s.ex = ExerciseFeatures{q.question_id, q.bundle_id, q.part, q.tags, q.correct_answer};
  s.resp.task_container = row.task_container_id;
  s.resp.response = !last_q ? kStart : h.rows[*last_q].answered_correctly.value_or(kMask);
  s.resp.elapsed_missing = !row.prior_elapsed_time;
  s.resp.elapsed_seconds = row.prior_elapsed_time ? std::min(*row.prior_elapsed_time / 1000.0, 300.0) : 0.0;
  s.resp.lag_seconds =
      last_q ? std::min(static_cast<double>(row.timestamp - h.rows[*last_q].timestamp) / 1000.0, 300.0) : 0.0;
  s.resp.had_explanation = row.prior_had_explanation.value_or(kExplanationAbsent);
  s.resp.attempt_count = attempts;
  if (last_l) {
    const auto& l = ctx.lectures.at(h.rows[*last_l].content_id);
    s.lect = LectureState{l.part, static_cast<int>(l.type) + 1, tag_bucket(ctx.tag_buckets, l.tag)};
  }
  const double ca = static_cast<double>(ctx.content.attempts(q.question_id));
  const double cc = static_cast<double>(ctx.content.correct(q.question_id));
  const auto part = static_cast<std::size_t>(q.part);
  std::int64_t total = answers[0] + answers[1] + answers[2] + answers[3];
  s.global = {std::min(ca, 22000.0) / 22000.0,
              (cc + 1) / (ca + 2),
              (static_cast<double>(ctx.content.part_correct[part]) + 1) / (static_cast<double>(ctx.content.part_attempts[part]) + 2),
              total ? static_cast<double>(answers[0]) / static_cast<double>(total) : 0.25,
              total ? static_cast<double>(answers[1]) / static_cast<double>(total) : 0.25,
              total ? static_cast<double>(answers[2]) / static_cast<double>(total) : 0.25,
              total ? static_cast<double>(answers[3]) / static_cast<double>(total) : 0.25,
              answered ? static_cast<double>(correct) / static_cast<double>(answered) : 0.5,
              1.0 - std::exp(-static_cast<double>(lectures))};
  s.label = row.answered_correctly.value_or(-1);
  return s;
}

}  // namespace

TEST_CASE("lag time is capped and rejects negative gaps") {
  CHECK(lag_time(0, 5000) == 5.0);
  CHECK(lag_time(0, 1'000'000'000) == 300.0);
  CHECK(lag_time(7, 7) == 0.0);
  CHECK_THROWS_AS(lag_time(10, 5), Error);
}

TEST_CASE("attempt features") {
  CHECK(attempt_feature_local(0) == 0);
  CHECK(attempt_feature_local(1) == 1);
  CHECK(attempt_feature_local(17) == 1);
  CHECK(attempt_feature_global(0) == 0.0);
  CHECK(attempt_feature_global(1) == doctest::Approx(0.6321205588).epsilon(1e-10));
  double prev = -1.0;
  // 1 - e^-c rounds to exactly 1.0 from c = 37 on.
  for (int c = 0; c < 36; ++c) {
    const double v = attempt_feature_global(c);
    CHECK(v > prev);
    CHECK(v < 1.0);
    prev = v;
  }
  CHECK(attempt_feature_global(1000) <= 1.0);
}

TEST_CASE("global features on hand cases") {
  QuestionMeta q;
  q.question_id = 2;
  q.part = 3;
  ContentStats content;
  content.content_attempts = {0, 0, 3, 30000};
  content.content_correct = {0, 0, 2, 10};
  content.part_attempts[3] = 8;
  content.part_correct[3] = 4;
  RunningUserStats fresh;
  auto f = global_features(fresh, content, q);
  CHECK(f.hardness == doctest::Approx(0.6));
  CHECK(f.part_hardness == doctest::Approx(0.5));
  CHECK(f.hotness == doctest::Approx(3.0 / 22000));
  CHECK(f.response_ratio == std::array<double, 4>{0.25, 0.25, 0.25, 0.25});
  CHECK(f.cumulative_correct_rate == 0.5);
  CHECK(f.lecture_watch_feature == 0.0);
  q.question_id = 3;
  CHECK(global_features(fresh, content, q).hotness == 1.0);
  q.question_id = 50;  // never seen in training
  CHECK(global_features(fresh, content, q).hardness == 0.5);

  RunningUserStats u;
  u.answer_counts = {1, 2, 0, 4};
  u.answered_count = 7;
  u.correct_count = 3;
  u.lecture_watch_count = 2;
  f = global_features(u, content, q);
  CHECK(f.response_ratio[1] == doctest::Approx(2.0 / 7));
  double s = 0;
  for (double r : f.response_ratio) s += r;
  CHECK(std::abs(s - 1.0) <= 1e-12);
  CHECK(f.cumulative_correct_rate == doctest::Approx(3.0 / 7));
  CHECK(f.lecture_watch_feature == doctest::Approx(1 - std::exp(-2.0)));
}

TEST_CASE("stream updates count answers and lectures") {
  FeatureContext ctx;
  ctx.questions.insert(QuestionMeta{5, 5, 1, 2, {3}, false});
  ctx.lectures.insert(LectureMeta{100, 40, 4, LectureType::Intention});
  RunningUserStats s;
  stream_update(s, ctx, question(0, 0, 5, 2, 1));
  CHECK(s.answer_counts[2] == 1);
  CHECK(s.correct_count == 1);
  CHECK(s.answered_count == 1);
  CHECK(s.attempt_counts.at(5) == 1);
  stream_update(s, ctx, lecture(1, 10, 100));
  CHECK(s.lecture_watch_count == 1);
  CHECK(s.answer_counts[2] == 1);
  CHECK(s.last_lecture == LastLecture{4, static_cast<int>(LectureType::Intention), 40});
  CHECK_THROWS_AS(stream_update(s, ctx, question(2, 5, 5, 0, 0)), Error);
  CHECK_THROWS_AS(stream_update(s, ctx, question(0, 10, 5, 0, 0)), Error);
  stream_update(s, ctx, question(2, 10, 5, 0, 0));
  CHECK(s.attempt_counts.at(5) == 2);
}

TEST_CASE("lecture state uses the tag frequency buckets") {
  LectureTable lectures;
  std::vector<InteractionRow> rows;
  std::int64_t id = 0;
  // Tag t gets 20 - t views, so tag t ranks t + 1; tags 14 and above fall outside the top 14.
  for (int t = 0; t < 18; ++t) {
    lectures.insert(LectureMeta{1000 + t, t, 1 + t % 7, LectureType::Concept});
    for (int k = 0; k < 20 - t; ++k, ++id) rows.push_back(lecture(id, id, 1000 + t));
  }
  const TagBuckets buckets = build_tag_buckets(rows, lectures);
  CHECK(tag_bucket(buckets, 0) == 1);
  CHECK(tag_bucket(buckets, 2) == 3);
  CHECK(tag_bucket(buckets, 13) == 14);
  CHECK(tag_bucket(buckets, 14) == 15);
  CHECK(tag_bucket(buckets, 999) == 15);

  RunningUserStats s;
  CHECK(lecture_state(s, buckets) == LectureState{0, 0, 0});
  s.last_lecture = LastLecture{6, static_cast<int>(LectureType::Starter), 2};
  CHECK(lecture_state(s, buckets) == LectureState{6, 4, 3});
  s.last_lecture->tag = 17;
  CHECK(lecture_state(s, buckets).last_tag == 15);
}

TEST_CASE("step features equal a from-scratch recomputation at every row") {
  const auto world = tiny_world(7, 12);
  std::size_t checked = 0;
  for (const auto& h : world.users) {
    const auto steps = compute_steps(h, world.ctx);
    std::size_t s = 0;
    for (std::size_t k = 0; k < h.rows.size(); ++k) {
      if (!h.rows[k].is_question()) continue;
      const StepFeatures expect = brute_force_step(h, k, world.ctx);
      CHECK(steps[s] == expect);
      for (double v : steps[s].global) CHECK(std::isfinite(v));
      CHECK(steps[s].resp.lag_seconds >= 0.0);
      CHECK(steps[s].resp.lag_seconds <= 300.0);
      ++s;
      ++checked;
    }
    CHECK(s == steps.size());
  }
  CHECK(checked > 200);
}

TEST_CASE("streaming stats equal a fold over any prefix") {
  const auto world = tiny_world(8, 6);
  for (const auto& h : world.users) {
    RunningUserStats streamed;
    for (std::size_t n = 0; n < h.rows.size(); ++n) {
      stream_update(streamed, world.ctx, h.rows[n]);
      RunningUserStats folded;
      for (std::size_t i = 0; i <= n; ++i) stream_update(folded, world.ctx, h.rows[i]);
      CHECK(streamed == folded);
      CHECK(streamed.correct_count <= streamed.answered_count);
    }
  }
}

TEST_CASE("frames are left padded and hold the target in the last slot") {
  FeatureContext ctx;
  for (int q = 0; q < 5; ++q) ctx.questions.insert(QuestionMeta{q, q, 0, 1 + q % 7, {q}, false});
  ctx.lectures.insert(LectureMeta{10, 1, 2, LectureType::Concept});
  ctx.content.content_attempts.assign(5, 0);
  ctx.content.content_correct.assign(5, 0);
  UserHistory h;
  h.user_id = 1;
  h.rows = {question(0, 0, 1, 0, 1), lecture(1, 1000, 10), question(2, 2000, 2, 1, 0), question(3, 3000, 3, 2, 1),
            question(4, 9000, 4, 0, 1)};
  const auto f = build_frame(h, 4, 8, ctx);
  CHECK(f.window == 8);
  CHECK(f.valid_count() == 4);
  CHECK(f.valid == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(f.row_id[7] == 4);
  CHECK(f.row_id[4] == 0);
  CHECK(f.resp[4].response == kStart);
  CHECK(f.resp[5].response == kCorrect);  // outcome of row 0
  CHECK(f.resp[6].response == kWrong);
  CHECK(f.resp[7].lag_seconds == 6.0);
  CHECK(f.lect[4] == LectureState{0, 0, 0});
  CHECK(f.lect[5].last_part == 2);  // the lecture never takes a slot of its own
  CHECK(f.label[7] == 1);
  CHECK(f.ex[0].part == 0);
  CHECK_THROWS_AS(build_frame(h, 1, 8, ctx), Error);
  CHECK_THROWS_AS(build_frame(h, 9, 8, ctx), Error);

  const auto short_frame = build_frame(h, 4, 2, ctx);
  CHECK(short_frame.row_id == std::vector<std::int64_t>{3, 4});
}

TEST_CASE("frames do not depend on later rows") {
  auto world = tiny_world(9, 8);
  for (auto& h : world.users) {
    for (std::size_t k = 0; k < h.rows.size(); k += 3) {
      if (!h.rows[k].is_question()) continue;
      const auto before = build_frame(h, k, 16, world.ctx);
      UserHistory mutated = h;
      for (std::size_t j = k + 1; j < mutated.rows.size(); ++j) {
        auto& r = mutated.rows[j];
        if (r.answered_correctly) r.answered_correctly = 1 - *r.answered_correctly;
        if (r.user_answer) r.user_answer = (*r.user_answer + 1) % 4;
        r.prior_elapsed_time = 1.0;
      }
      CHECK(build_frame(mutated, k, 16, world.ctx) == before);
    }
  }
}

TEST_CASE("frame cache round-trips bit for bit") {
  const auto world = tiny_world(10, 4);
  std::vector<LocalFeatureFrame> frames;
  for (const auto& h : world.users) {
    for (std::size_t k = 0; k < h.rows.size(); k += 5) {
      if (h.rows[k].is_question()) frames.push_back(build_frame(h, k, 12, world.ctx));
    }
  }
  const auto path = std::filesystem::temp_directory_path() / "muse_frames_test.bin";
  write_frame_cache(path, frames);
  CHECK(read_frame_cache(path) == frames);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(read_frame_cache(path), Error);
  std::filesystem::remove(path);
}
