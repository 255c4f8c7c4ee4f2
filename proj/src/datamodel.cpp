#include "muse/datamodel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string_view>

#include "muse/error.hpp"

namespace muse {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

// Iterates non-empty lines, stripping a trailing '\r'.
class LineReader {
 public:
  explicit LineReader(const std::string& text) : text_(text) {}
  bool next(std::string_view& line) {
    while (pos_ < text_.size()) {
      std::size_t end = text_.find('\n', pos_);
      if (end == std::string::npos) end = text_.size();
      line = std::string_view(text_).substr(pos_, end - pos_);
      pos_ = end + 1;
      ++line_no_;
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty()) return true;
    }
    return false;
  }
  int line_no() const { return line_no_; }

 private:
  const std::string& text_;
  std::size_t pos_ = 0;
  int line_no_ = 0;
};

struct Context {
  const std::string& source;
  int line;
  [[noreturn]] void fail(ErrorKind kind, const std::string& what) const {
    throw Error(kind, source + " line " + std::to_string(line) + ": " + what);
  }
};

template <typename T>
T parse_int(std::string_view s, const Context& ctx, const char* column) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    ctx.fail(ErrorKind::MalformedRow, std::string("column ") + column + " is not an integer: '" + std::string(s) + "'");
  }
  return v;
}

double parse_double(std::string_view s, const Context& ctx, const char* column) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    ctx.fail(ErrorKind::MalformedRow, std::string("column ") + column + " is not a number: '" + std::string(s) + "'");
  }
  return v;
}

bool is_absent(std::string_view s) { return s.empty() || s == "-1" || s == "nan" || s == "NaN"; }

std::vector<std::size_t> map_header(std::string_view header, const std::vector<std::string>& wanted,
                                    const std::string& source) {
  const auto cols = split(header, ',');
  std::vector<std::size_t> index;
  for (const auto& w : wanted) {
    auto it = std::find(cols.begin(), cols.end(), w);
    if (it == cols.end()) throw Error(ErrorKind::MissingColumn, source + ": header lacks column '" + w + "'");
    index.push_back(static_cast<std::size_t>(it - cols.begin()));
  }
  return index;
}

std::vector<std::string> header_names(const char* header) {
  std::vector<std::string> out;
  for (auto sv : split(header, ',')) out.emplace_back(sv);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace

const char* to_string(LectureType type) {
  switch (type) {
    case LectureType::Concept: return "concept";
    case LectureType::SolvingQuestion: return "solving question";
    case LectureType::Intention: return "intention";
    case LectureType::Starter: return "starter";
  }
  return "?";
}

LectureType parse_lecture_type(const std::string& text) {
  for (int i = 0; i < kLectureTypeCount; ++i) {
    const auto t = static_cast<LectureType>(i);
    if (text == to_string(t)) return t;
  }
  throw Error(ErrorKind::InvalidEnum, "lecture type '" + text + "'");
}

void QuestionTable::insert(QuestionMeta q) { by_id_[q.question_id] = std::move(q); }

const QuestionMeta& QuestionTable::at(std::int32_t id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw Error(ErrorKind::UnknownContentId, "question " + std::to_string(id));
  return it->second;
}

void LectureTable::insert(LectureMeta l) { by_id_[l.lecture_id] = l; }

const LectureMeta& LectureTable::at(std::int32_t id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw Error(ErrorKind::UnknownContentId, "lecture " + std::to_string(id));
  return it->second;
}

// ---- interactions ----------------------------------------------------------

std::vector<InteractionRow> parse_interactions_text(const std::string& text, const std::string& source) {
  LineReader reader(text);
  std::string_view line;
  if (!reader.next(line)) throw Error(ErrorKind::MissingColumn, source + ": empty file, no header");
  const auto names = header_names(kInteractionsHeader);
  const auto col = map_header(line, names, source);
  const std::size_t width = split(line, ',').size();

  std::vector<InteractionRow> rows;
  while (reader.next(line)) {
    const Context ctx{source, reader.line_no()};
    const auto f = split(line, ',');
    if (f.size() != width) {
      ctx.fail(ErrorKind::MalformedRow, "expected " + std::to_string(width) + " fields, found " + std::to_string(f.size()));
    }
    InteractionRow r;
    r.row_id = parse_int<std::int64_t>(f[col[0]], ctx, "row_id");
    r.timestamp = parse_int<std::int64_t>(f[col[1]], ctx, "timestamp");
    r.user_id = parse_int<std::int64_t>(f[col[2]], ctx, "user_id");
    r.content_id = parse_int<std::int32_t>(f[col[3]], ctx, "content_id");
    const int type = parse_int<int>(f[col[4]], ctx, "content_type_id");
    if (type != 0 && type != 1) ctx.fail(ErrorKind::InvalidEnum, "content_type_id " + std::to_string(type));
    r.content_type = static_cast<ContentType>(type);
    r.task_container_id = parse_int<std::int32_t>(f[col[5]], ctx, "task_container_id");
    if (r.row_id < 0) ctx.fail(ErrorKind::MalformedRow, "negative row_id");
    if (r.timestamp < 0) ctx.fail(ErrorKind::MalformedRow, "negative timestamp");

    if (!is_absent(f[col[6]])) {
      const int a = parse_int<int>(f[col[6]], ctx, "user_answer");
      if (a < 0 || a > 3) ctx.fail(ErrorKind::InvalidEnum, "user_answer " + std::to_string(a));
      r.user_answer = a;
    }
    if (!is_absent(f[col[7]])) {
      const int c = parse_int<int>(f[col[7]], ctx, "answered_correctly");
      if (c != 0 && c != 1) ctx.fail(ErrorKind::InvalidEnum, "answered_correctly " + std::to_string(c));
      r.answered_correctly = c;
    }
    if (!is_absent(f[col[8]])) {
      const double e = parse_double(f[col[8]], ctx, "prior_question_elapsed_time");
      if (e < 0.0) ctx.fail(ErrorKind::MalformedRow, "negative prior_question_elapsed_time");
      r.prior_elapsed_time = e;
    }
    if (const auto s = f[col[9]]; !is_absent(s)) {
      if (s == "1" || s == "True" || s == "true") {
        r.prior_had_explanation = 1;
      } else if (s == "0" || s == "False" || s == "false") {
        r.prior_had_explanation = 0;
      } else {
        ctx.fail(ErrorKind::InvalidEnum, "prior_question_had_explanation '" + std::string(s) + "'");
      }
    }
    if (!r.is_question() && (r.user_answer || r.answered_correctly)) {
      ctx.fail(ErrorKind::MalformedRow, "lecture row carries an answer");
    }
    rows.push_back(r);
  }
  return rows;
}

std::vector<InteractionRow> parse_interactions(const std::filesystem::path& path) {
  return parse_interactions_text(read_file(path), path.string());
}

std::string format_interaction(const InteractionRow& r) {
  std::string s;
  s += std::to_string(r.row_id) + ',' + std::to_string(r.timestamp) + ',' + std::to_string(r.user_id) + ',' +
       std::to_string(r.content_id) + ',' + std::to_string(static_cast<int>(r.content_type)) + ',' +
       std::to_string(r.task_container_id) + ',';
  const char* absent = r.is_question() ? "" : "-1";
  s += r.user_answer ? std::to_string(*r.user_answer) : absent;
  s += ',';
  s += r.answered_correctly ? std::to_string(*r.answered_correctly) : absent;
  s += ',';
  if (r.prior_elapsed_time) s += format_double(*r.prior_elapsed_time);
  s += ',';
  if (r.prior_had_explanation) s += std::to_string(*r.prior_had_explanation);
  return s;
}

std::string format_interactions(const std::vector<InteractionRow>& rows) {
  std::string out = std::string(kInteractionsHeader) + '\n';
  for (const auto& r : rows) out += format_interaction(r) + '\n';
  return out;
}

// ---- questions / lectures -------------------------------------------------

QuestionTable parse_questions_text(const std::string& text, const std::string& source) {
  LineReader reader(text);
  std::string_view line;
  if (!reader.next(line)) throw Error(ErrorKind::MissingColumn, source + ": empty file, no header");
  const auto col = map_header(line, header_names(kQuestionsHeader), source);
  const std::size_t width = split(line, ',').size();
  QuestionTable table;
  while (reader.next(line)) {
    const Context ctx{source, reader.line_no()};
    const auto f = split(line, ',');
    if (f.size() != width) ctx.fail(ErrorKind::MalformedRow, "wrong field count");
    QuestionMeta q;
    q.question_id = parse_int<std::int32_t>(f[col[0]], ctx, "question_id");
    q.bundle_id = parse_int<std::int32_t>(f[col[1]], ctx, "bundle_id");
    q.correct_answer = parse_int<int>(f[col[2]], ctx, "correct_answer");
    if (q.correct_answer < 0 || q.correct_answer > 3) {
      ctx.fail(ErrorKind::InvalidEnum, "correct_answer " + std::to_string(q.correct_answer));
    }
    q.part = parse_int<int>(f[col[3]], ctx, "part");
    if (q.part < 1 || q.part > kPartCount) ctx.fail(ErrorKind::InvalidEnum, "part " + std::to_string(q.part));
    if (q.question_id < 0 || q.bundle_id < 0) ctx.fail(ErrorKind::MalformedRow, "negative id");
    for (auto tok : split(f[col[4]], ' ')) {
      if (tok.empty()) continue;
      const int tag = parse_int<int>(tok, ctx, "tags");
      if (tag < 0) ctx.fail(ErrorKind::MalformedRow, "negative tag");
      q.tags.push_back(tag);
    }
    q.tags_empty = q.tags.empty();
    table.insert(std::move(q));
  }
  return table;
}

QuestionTable parse_questions(const std::filesystem::path& path) {
  return parse_questions_text(read_file(path), path.string());
}

LectureTable parse_lectures_text(const std::string& text, const std::string& source) {
  LineReader reader(text);
  std::string_view line;
  if (!reader.next(line)) throw Error(ErrorKind::MissingColumn, source + ": empty file, no header");
  const auto col = map_header(line, header_names(kLecturesHeader), source);
  const std::size_t width = split(line, ',').size();
  LectureTable table;
  while (reader.next(line)) {
    const Context ctx{source, reader.line_no()};
    const auto f = split(line, ',');
    if (f.size() != width) ctx.fail(ErrorKind::MalformedRow, "wrong field count");
    LectureMeta l;
    l.lecture_id = parse_int<std::int32_t>(f[col[0]], ctx, "lecture_id");
    l.tag = parse_int<int>(f[col[1]], ctx, "tag");
    l.part = parse_int<int>(f[col[2]], ctx, "part");
    if (l.part < 1 || l.part > kPartCount) ctx.fail(ErrorKind::InvalidEnum, "part " + std::to_string(l.part));
    const std::string type(f[col[3]]);
    bool matched = false;
    for (int i = 0; i < kLectureTypeCount && !matched; ++i) {
      if (type == to_string(static_cast<LectureType>(i))) {
        l.type = static_cast<LectureType>(i);
        matched = true;
      }
    }
    if (!matched) ctx.fail(ErrorKind::InvalidEnum, "lecture type '" + type + "'");
    table.insert(l);
  }
  return table;
}

LectureTable parse_lectures(const std::filesystem::path& path) {
  return parse_lectures_text(read_file(path), path.string());
}

std::string format_questions(const QuestionTable& questions) {
  std::string out = std::string(kQuestionsHeader) + '\n';
  for (const auto& [id, q] : questions.all()) {
    out += std::to_string(q.question_id) + ',' + std::to_string(q.bundle_id) + ',' + std::to_string(q.correct_answer) +
           ',' + std::to_string(q.part) + ',';
    for (std::size_t i = 0; i < q.tags.size(); ++i) out += (i ? " " : "") + std::to_string(q.tags[i]);
    out += '\n';
  }
  return out;
}

std::string format_lectures(const LectureTable& lectures) {
  std::string out = std::string(kLecturesHeader) + '\n';
  for (const auto& [id, l] : lectures.all()) {
    out += std::to_string(l.lecture_id) + ',' + std::to_string(l.tag) + ',' + std::to_string(l.part) + ',' +
           to_string(l.type) + '\n';
  }
  return out;
}

// ---- grouping / splitting --------------------------------------------------

std::map<std::int64_t, UserHistory> group_by_user(const std::vector<InteractionRow>& rows) {
  std::map<std::int64_t, UserHistory> users;
  for (const auto& r : rows) {
    auto& h = users[r.user_id];
    h.user_id = r.user_id;
    h.rows.push_back(r);
  }
  for (auto& [id, h] : users) {
    std::stable_sort(h.rows.begin(), h.rows.end(), [](const InteractionRow& a, const InteractionRow& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.row_id < b.row_id;
    });
  }
  return users;
}

std::size_t tail_size(std::size_t n, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidArgument, "holdout fraction must lie in (0,1)");
  }
  const double x = holdout_fraction * static_cast<double>(n);
  const double nearest = std::round(x);
  // Absorb representation error so 0.1 * 100 is exactly 10.
  const double k = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(k));
}

TailSplit split_tail(const std::vector<InteractionRow>& rows, double holdout_fraction) {
  const std::size_t k = tail_size(rows.size(), holdout_fraction);
  TailSplit s;
  s.train.assign(rows.begin(), rows.end() - static_cast<std::ptrdiff_t>(k));
  s.blend.assign(rows.end() - static_cast<std::ptrdiff_t>(k), rows.end());
  return s;
}

}  // namespace muse
