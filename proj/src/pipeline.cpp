#include "muse/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "muse/error.hpp"

namespace muse {

namespace {

// Runs fn(i) for i in [0, n) over contiguous chunks; results must be written
// to per-index slots so the outcome does not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const std::size_t t = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(n, 1));
  if (t == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t c = 0; c < t; ++c) {
    pool.emplace_back([&, c] {
      for (std::size_t i = n * c / t; i < n * (c + 1) / t; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::vector<RowPrediction> flatten(std::vector<std::vector<RowPrediction>>& parts) {
  std::vector<RowPrediction> out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

nc::Tensor int_tensor(const std::vector<std::int64_t>& v) {
  nc::Tensor t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<double>(v[i]);
  return t;
}

std::vector<std::int64_t> tensor_ints(const nc::Tensor& t) {
  std::vector<std::int64_t> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<std::int64_t>(t[i]);
  return v;
}

}  // namespace

DataSplit split_users(const std::vector<InteractionRow>& rows, double blend_fraction, double test_fraction) {
  if (rows.empty()) throw Error(ErrorKind::EmptyDataset, "no interactions");
  std::map<std::int64_t, std::size_t> first_row;
  for (std::size_t i = 0; i < rows.size(); ++i) first_row.emplace(rows[i].user_id, i);
  const std::size_t blend_start = rows.size() - tail_size(rows.size(), blend_fraction);
  const std::size_t test_start = blend_start - std::min(blend_start, tail_size(blend_start, test_fraction));

  DataSplit split;
  for (auto& [user, history] : group_by_user(rows)) {
    const std::size_t first = first_row.at(user);
    if (first >= blend_start) {
      split.blend.push_back(std::move(history));
    } else if (first >= test_start) {
      split.test.push_back(std::move(history));
    } else {
      split.train_users.insert(user);
      split.train.push_back(std::move(history));
    }
  }
  if (split.train.empty() || split.blend.empty() || split.test.empty()) {
    throw Error(ErrorKind::EmptyDataset, "the train, blend and test splits each need at least one user");
  }
  return split;
}

FeatureContext load_tables(const std::filesystem::path& data_dir) {
  FeatureContext ctx;
  ctx.questions = parse_questions(data_dir / "questions.csv");
  ctx.lectures = parse_lectures(data_dir / "lectures.csv");
  return ctx;
}

PreparedData prepare_data(const std::filesystem::path& data_dir, double blend_fraction, double test_fraction) {
  PreparedData data;
  data.ctx = load_tables(data_dir);
  const auto rows = parse_interactions(data_dir / "interactions.csv");
  data.split = split_users(rows, blend_fraction, test_fraction);
  std::vector<InteractionRow> train_rows;
  for (const auto& h : data.split.train) train_rows.insert(train_rows.end(), h.rows.begin(), h.rows.end());
  data.ctx.content = ContentStats::build(train_rows, data.ctx.questions);
  data.ctx.tag_buckets = build_tag_buckets(train_rows, data.ctx.lectures);
  return data;
}

std::vector<LocalFeatureFrame> local_training_frames(std::span<const UserHistory> users, const FeatureContext& ctx,
                                                     int window) {
  std::vector<LocalFeatureFrame> frames;
  for (const auto& h : users) {
    const auto steps = compute_steps(h, ctx);
    std::vector<LocalFeatureFrame> mine;
    for (std::size_t end = steps.size(); end > 0;) {
      mine.push_back(frame_from_steps(steps, end - 1, window));
      end = end > static_cast<std::size_t>(window) ? end - static_cast<std::size_t>(window) : 0;
    }
    frames.insert(frames.end(), std::make_move_iterator(mine.rbegin()), std::make_move_iterator(mine.rend()));
  }
  return frames;
}

std::vector<std::vector<StepFeatures>> global_training_sequences(std::span<const UserHistory> users,
                                                                 const FeatureContext& ctx) {
  std::vector<std::vector<StepFeatures>> out;
  out.reserve(users.size());
  for (const auto& h : users) out.push_back(compute_steps(h, ctx));
  return out;
}

std::vector<RowPrediction> predict_local(const LocalModel& model, std::span<const UserHistory> users,
                                         const FeatureContext& ctx, int threads) {
  const auto W = static_cast<std::size_t>(model.config().window);
  const std::size_t stride = std::max<std::size_t>(1, W / 2);
  std::vector<std::vector<RowPrediction>> parts(users.size());
  parallel_for(users.size(), threads, [&](std::size_t u) {
    const auto steps = compute_steps(users[u], ctx);
    auto& out = parts[u];
    std::size_t done = 0;  // steps [0, done) already scored
    while (done < steps.size()) {
      const std::size_t end = done == 0 ? std::min(W, steps.size()) - 1 : std::min(steps.size() - 1, done - 1 + stride);
      const auto probs = model.predict_positions(frame_from_steps(steps, end, static_cast<int>(W)));
      for (std::size_t j = done; j <= end; ++j) {
        const StepFeatures& s = steps[j];
        out.push_back({s.row_id, users[u].user_id, probs[W - 1 - (end - j)], s.label, s.global});
      }
      done = end + 1;
    }
  });
  return flatten(parts);
}

std::vector<RowPrediction> predict_global(const GlobalModel& model, std::span<const UserHistory> users,
                                          const FeatureContext& ctx, int threads) {
  std::vector<std::vector<RowPrediction>> parts(users.size());
  parallel_for(users.size(), threads, [&](std::size_t u) {
    const auto steps = compute_steps(users[u], ctx);
    if (steps.empty()) return;
    nc::Graph g(&model.params());
    const GlobalSequence fw = model.forward_steps(g, steps);
    const nc::Tensor& p = g.value(fw.prob);
    for (std::size_t j = 0; j < steps.size(); ++j) {
      parts[u].push_back({steps[j].row_id, users[u].user_id, p[j], steps[j].label, steps[j].global});
    }
  });
  return flatten(parts);
}

void store_context(Archive& archive, const FeatureContext& ctx, const std::set<std::int64_t>& train_users) {
  archive.put("context.content_attempts", int_tensor(ctx.content.content_attempts));
  archive.put("context.content_correct", int_tensor(ctx.content.content_correct));
  archive.put("context.part_attempts",
              int_tensor({ctx.content.part_attempts.begin(), ctx.content.part_attempts.end()}));
  archive.put("context.part_correct", int_tensor({ctx.content.part_correct.begin(), ctx.content.part_correct.end()}));
  std::vector<std::pair<int, int>> buckets(ctx.tag_buckets.begin(), ctx.tag_buckets.end());
  std::sort(buckets.begin(), buckets.end());
  nc::Tensor b({buckets.size(), 2});
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    b[2 * i] = buckets[i].first;
    b[2 * i + 1] = buckets[i].second;
  }
  archive.put("context.tag_buckets", std::move(b));
  archive.set_meta("context.train_users", format_user_ranges(train_users));
}

void load_context(const Archive& archive, FeatureContext& ctx, std::set<std::int64_t>& train_users) {
  ctx.content.content_attempts = tensor_ints(archive.tensor("context.content_attempts"));
  ctx.content.content_correct = tensor_ints(archive.tensor("context.content_correct"));
  const auto pa = tensor_ints(archive.tensor("context.part_attempts"));
  const auto pc = tensor_ints(archive.tensor("context.part_correct"));
  if (pa.size() != ctx.content.part_attempts.size() || pc.size() != ctx.content.part_correct.size()) {
    throw Error(ErrorKind::ShapeMismatch, "checkpoint part statistics have the wrong length");
  }
  std::copy(pa.begin(), pa.end(), ctx.content.part_attempts.begin());
  std::copy(pc.begin(), pc.end(), ctx.content.part_correct.begin());
  const nc::Tensor& b = archive.tensor("context.tag_buckets");
  ctx.tag_buckets.clear();
  for (std::size_t i = 0; i + 1 < b.size(); i += 2) {
    ctx.tag_buckets[static_cast<int>(b[i])] = static_cast<int>(b[i + 1]);
  }
  train_users = parse_user_ranges(archive.meta("context.train_users"));
}

std::filesystem::path write_checkpoint(const std::filesystem::path& dir, const std::string& family, long step,
                                       const Archive& archive) {
  std::filesystem::create_directories(dir);
  const std::string name = family + "." + std::to_string(step) + ".ckpt";
  write_archive(dir / name, archive);
  std::ofstream latest(dir / (family + ".latest"), std::ios::binary);
  if (!latest) throw Error(ErrorKind::Io, "cannot write " + (dir / (family + ".latest")).string());
  latest << name << "\n";
  return dir / name;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir, const std::string& family) {
  const auto pointer = dir / (family + ".latest");
  std::ifstream in(pointer);
  if (!in) throw Error(ErrorKind::Io, "no checkpoint for '" + family + "': missing " + pointer.string());
  std::string name;
  std::getline(in, name);
  const auto path = dir / name;
  if (name.empty() || !std::filesystem::exists(path)) {
    throw Error(ErrorKind::Io, "checkpoint " + path.string() + " named by " + pointer.string() + " does not exist");
  }
  return path;
}

std::string format_user_ranges(const std::set<std::int64_t>& users) {
  std::string out;
  for (auto it = users.begin(); it != users.end();) {
    const std::int64_t lo = *it;
    std::int64_t hi = lo;
    ++it;
    while (it != users.end() && *it == hi + 1) hi = *it++;
    if (!out.empty()) out += ",";
    out += std::to_string(lo);
    if (hi != lo) out += "-" + std::to_string(hi);
  }
  return out;
}

std::set<std::int64_t> parse_user_ranges(const std::string& text) {
  std::set<std::int64_t> users;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part.empty()) continue;
    try {
      const auto dash = part.find('-', 1);
      const std::int64_t lo = std::stoll(part.substr(0, dash));
      const std::int64_t hi = dash == std::string::npos ? lo : std::stoll(part.substr(dash + 1));
      if (hi < lo) throw std::invalid_argument("range");
      for (std::int64_t u = lo; u <= hi; ++u) users.insert(u);
    } catch (const std::exception&) {
      throw Error(ErrorKind::MalformedRow, "bad user range '" + part + "'");
    }
  }
  return users;
}

}  // namespace muse
