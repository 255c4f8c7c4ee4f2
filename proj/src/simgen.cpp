#include "muse/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "muse/error.hpp"
#include "muse/metrics.hpp"

namespace muse {

namespace {

using Rng = std::mt19937_64;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Distribution helpers built on raw 64-bit draws so the stream is the same
// on every standard library.
double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(Rng& rng, int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); }

double normal(Rng& rng) {
  // Box-Muller; u1 is kept away from zero.
  const double u1 = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double lognormal_ms(Rng& rng, double median_ms, double sigma) { return median_ms * std::exp(sigma * normal(rng)); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

}  // namespace

void SimConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, "simulation: " + what); };
  if (n_users < 1 || n_questions < 1 || n_lectures < 1 || parts < 1 || parts > kPartCount) {
    fail("counts must be positive and parts within 1..7");
  }
  if (min_interactions < 1 || mean_interactions < min_interactions) fail("mean_interactions must be >= min_interactions");
  for (double p : {lecture_prob, repeat_prob, skill_correlation}) {
    if (p < 0.0 || p > 1.0) fail("probabilities must lie in [0,1]");
  }
  if (!(noise_scale > 0.0)) fail("noise_scale must be positive");
  if (skill_sd < 0.0 || difficulty_sd < 0.0) fail("standard deviations must be non-negative");
  if (tags_per_part < 1) fail("tags_per_part must be positive");
}

SimDataset generate(const SimConfig& cfg) {
  cfg.validate();
  SimDataset data;

  Rng items(splitmix(cfg.seed ^ 0x6974656d73ULL));
  std::vector<double> difficulty(static_cast<std::size_t>(cfg.n_questions));
  for (int q = 0; q < cfg.n_questions; ++q) {
    QuestionMeta meta;
    meta.question_id = q;
    meta.bundle_id = q;
    meta.correct_answer = uniform_int(items, 4);
    meta.part = 1 + uniform_int(items, cfg.parts);
    const int n_tags = 1 + uniform_int(items, 3);
    for (int t = 0; t < n_tags; ++t) {
      const int tag = (meta.part - 1) * cfg.tags_per_part + uniform_int(items, cfg.tags_per_part);
      if (std::find(meta.tags.begin(), meta.tags.end(), tag) == meta.tags.end()) meta.tags.push_back(tag);
    }
    std::sort(meta.tags.begin(), meta.tags.end());
    difficulty[static_cast<std::size_t>(q)] = cfg.difficulty_sd * normal(items);
    data.questions.insert(std::move(meta));
  }
  std::vector<std::vector<std::int32_t>> lectures_by_part(static_cast<std::size_t>(cfg.parts) + 1);
  for (int l = 0; l < cfg.n_lectures; ++l) {
    LectureMeta meta;
    meta.lecture_id = cfg.n_questions + l;  // ids disjoint from questions
    meta.part = 1 + (l % cfg.parts);
    meta.tag = (meta.part - 1) * cfg.tags_per_part + uniform_int(items, cfg.tags_per_part);
    meta.type = static_cast<LectureType>(uniform_int(items, kLectureTypeCount));
    lectures_by_part[static_cast<std::size_t>(meta.part)].push_back(meta.lecture_id);
    data.lectures.insert(meta);
  }

  std::int64_t row_id = 0;
  const double extra_mean = cfg.mean_interactions - cfg.min_interactions;
  const double shared = std::sqrt(cfg.skill_correlation), own = std::sqrt(1.0 - cfg.skill_correlation);
  for (int u = 0; u < cfg.n_users; ++u) {
    Rng rng(splitmix(splitmix(cfg.seed) ^ static_cast<std::uint64_t>(u)));
    std::vector<double> skill(static_cast<std::size_t>(cfg.parts) + 1, 0.0);
    const double common = normal(rng);
    for (int p = 1; p <= cfg.parts; ++p) skill[static_cast<std::size_t>(p)] = cfg.skill_sd * (shared * common + own * normal(rng));
    const double extra = extra_mean > 0.0 ? -extra_mean * std::log(1.0 - uniform01(rng)) : 0.0;
    const int n_events = cfg.min_interactions + static_cast<int>(std::floor(extra));

    std::vector<std::int32_t> seen;
    std::vector<std::uint8_t> attempted(static_cast<std::size_t>(cfg.n_questions), 0);
    std::int64_t timestamp = 0;
    bool first_question = true;
    double last_elapsed = 0.0;
    int last_explanation = 0;
    for (int e = 0; e < n_events; ++e) {
      if (e > 0) timestamp += static_cast<std::int64_t>(std::llround(lognormal_ms(rng, 20000.0, 0.8)));
      InteractionRow row;
      row.row_id = row_id++;
      row.timestamp = timestamp;
      row.user_id = u;
      row.task_container_id = e;
      if (uniform01(rng) < cfg.lecture_prob) {
        const int part = 1 + uniform_int(rng, cfg.parts);
        const auto& pool = lectures_by_part[static_cast<std::size_t>(part)];
        if (!pool.empty()) {
          row.content_type = ContentType::Lecture;
          row.content_id = pool[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(pool.size())))];
          skill[static_cast<std::size_t>(part)] += cfg.lecture_gain;
          data.rows.push_back(row);
          continue;
        }
      }
      std::int32_t q;
      if (!seen.empty() && uniform01(rng) < cfg.repeat_prob) {
        q = seen[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(seen.size())))];
      } else {
        q = uniform_int(rng, cfg.n_questions);
      }
      const QuestionMeta& meta = data.questions.at(q);
      const bool repeat = attempted[static_cast<std::size_t>(q)] != 0;
      const double logit = (skill[static_cast<std::size_t>(meta.part)] - difficulty[static_cast<std::size_t>(q)] +
                            cfg.attempt_bonus * (repeat ? 1.0 : 0.0)) /
                           cfg.noise_scale;
      const double p_star = 1.0 / (1.0 + std::exp(-logit));
      const int correct = uniform01(rng) < p_star ? 1 : 0;
      int answer = meta.correct_answer;
      if (!correct) {
        answer = uniform_int(rng, 3);
        if (answer >= meta.correct_answer) ++answer;
      }
      row.content_type = ContentType::Question;
      row.content_id = q;
      row.user_answer = answer;
      row.answered_correctly = correct;
      if (!first_question) {
        row.prior_elapsed_time = last_elapsed;
        row.prior_had_explanation = last_explanation;
      }
      first_question = false;
      last_elapsed = static_cast<double>(std::llround(lognormal_ms(rng, 15000.0, 0.6)));
      last_explanation = uniform01(rng) < 0.9 ? 1 : 0;
      if (!repeat) {
        attempted[static_cast<std::size_t>(q)] = 1;
        seen.push_back(q);
      }
      skill[static_cast<std::size_t>(meta.part)] += cfg.practice_gain;
      data.truth[row.row_id] = p_star;
      data.rows.push_back(row);
    }
  }
  return data;
}

void write_dataset(const std::filesystem::path& dir, const SimDataset& data) {
  std::filesystem::create_directories(dir);
  write_text(dir / "interactions.csv", format_interactions(data.rows));
  write_text(dir / "questions.csv", format_questions(data.questions));
  write_text(dir / "lectures.csv", format_lectures(data.lectures));
  std::string truth = "row_id,p_star\n";
  char buf[64];
  for (const auto& [row, p] : data.truth) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g\n", static_cast<long long>(row), p);
    truth += buf;
  }
  write_text(dir / "truth.csv", truth);
}

std::map<std::int64_t, double> parse_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "row_id,p_star") {
    throw Error(ErrorKind::MissingColumn, path.string() + ": expected header row_id,p_star");
  }
  std::map<std::int64_t, double> truth;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    long long row = 0;
    double p = 0.0;
    if (std::sscanf(line.c_str(), "%lld,%lf", &row, &p) != 2) {
      throw Error(ErrorKind::MalformedRow, path.string() + " line " + std::to_string(line_no));
    }
    truth[row] = p;
  }
  return truth;
}

double oracle_auc(const std::map<std::int64_t, double>& truth, std::span<const InteractionRow> rows) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : rows) {
    if (!r.is_question() || !r.answered_correctly) continue;
    auto it = truth.find(r.row_id);
    if (it == truth.end()) {
      throw Error(ErrorKind::InvalidArgument, "no true probability for row " + std::to_string(r.row_id));
    }
    scores.push_back(it->second);
    labels.push_back(*r.answered_correctly);
  }
  if (scores.size() != truth.size()) {
    throw Error(ErrorKind::InvalidArgument, "truth has " + std::to_string(truth.size()) + " rows but the log has " +
                                                std::to_string(scores.size()) + " labelled questions");
  }
  return roc_auc(scores, labels);
}

double oracle_auc(const std::filesystem::path& truth_file, const std::filesystem::path& interactions_file) {
  const auto rows = parse_interactions(interactions_file);
  return oracle_auc(parse_truth(truth_file), rows);
}

}  // namespace muse
