#include "muse/muse_global.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "muse/error.hpp"

namespace muse {

namespace {

using nc::Graph;
using nc::Tensor;
using nc::Var;

constexpr int kPartVocab = kPartCount + 1;
constexpr int kLectTypeVocab = kLectureTypeCount + 1;
constexpr int kLectTagVocab = kOtherTagBucket + 1;
// Categorical and continuous inputs, each embedded to emb_dim.
constexpr std::size_t kEmbeddedInputs = 14;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string layer_name(const char* what, int layer) { return "global.gru." + std::to_string(layer) + "." + what; }

}  // namespace

GlobalConfig GlobalConfig::desk() {
  GlobalConfig c;
  c.hidden = 64;
  c.emb_dim = 16;
  return c;
}

void GlobalConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, "global model: " + what); };
  if (hidden < 1 || emb_dim < 1) fail("hidden and emb_dim must be positive");
  if (layers < 1) fail("layers must be at least 1");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0,1)");
  if (segment < 1) fail("segment must be positive");
  if (content_vocab < 1 || tag_vocab < 1) fail("vocabulary sizes must be positive");
}

GlobalConfig GlobalConfig::with_vocab(const FeatureContext& ctx) const {
  GlobalConfig c = *this;
  c.content_vocab = muse::content_vocab(ctx.questions);
  c.tag_vocab = question_tag_vocab(ctx.questions);
  return c;
}

void GlobalConfig::store(Archive& a) const {
  a.set_meta("global.hidden", std::to_string(hidden));
  a.set_meta("global.layers", std::to_string(layers));
  a.set_meta("global.dropout", format_double(dropout));
  a.set_meta("global.emb_dim", std::to_string(emb_dim));
  a.set_meta("global.segment", std::to_string(segment));
  a.set_meta("global.content_vocab", std::to_string(content_vocab));
  a.set_meta("global.tag_vocab", std::to_string(tag_vocab));
}

GlobalConfig GlobalConfig::load(const Archive& a) {
  GlobalConfig c;
  auto i = [&](const char* key) { return std::stoi(a.meta(std::string("global.") + key)); };
  c.hidden = i("hidden");
  c.layers = i("layers");
  c.dropout = std::stod(a.meta("global.dropout"));
  c.emb_dim = i("emb_dim");
  c.segment = i("segment");
  c.content_vocab = i("content_vocab");
  c.tag_vocab = i("tag_vocab");
  c.validate();
  return c;
}

// ---- state snapshots -------------------------------------------------------

void save_state(const std::filesystem::path& path, const UserStreamState& state) {
  Archive a;
  a.set_meta("kind", "user-stream-state");
  a.set_meta("layers", std::to_string(state.hidden.size()));
  for (std::size_t l = 0; l < state.hidden.size(); ++l) a.put("state.h." + std::to_string(l), state.hidden[l]);
  const RunningUserStats& s = state.stats;
  std::vector<double> counts = {static_cast<double>(s.answer_counts[0]), static_cast<double>(s.answer_counts[1]),
                                static_cast<double>(s.answer_counts[2]), static_cast<double>(s.answer_counts[3]),
                                static_cast<double>(s.correct_count),    static_cast<double>(s.answered_count),
                                static_cast<double>(s.lecture_watch_count)};
  a.put("stats.counts", Tensor::vector(std::move(counts)));
  std::vector<double> attempts;
  for (const auto& [content, n] : s.attempt_counts) {
    attempts.push_back(content);
    attempts.push_back(static_cast<double>(n));
  }
  if (!attempts.empty()) {
    const std::size_t n = attempts.size() / 2;
    a.put("stats.attempts", Tensor({n, 2}, std::move(attempts)));
  }
  if (s.last_lecture) {
    a.set_meta("stats.last_lecture", std::to_string(s.last_lecture->part) + " " + std::to_string(s.last_lecture->type) +
                                         " " + std::to_string(s.last_lecture->tag));
  }
  if (s.last_timestamp) a.set_meta("stats.last_timestamp", std::to_string(*s.last_timestamp));
  a.set_meta("stats.last_row_id", std::to_string(s.last_row_id));
  if (s.last_question_timestamp) a.set_meta("stats.last_question_timestamp", std::to_string(*s.last_question_timestamp));
  a.set_meta("stats.last_response", std::to_string(s.last_response));
  write_archive(path, a);
}

UserStreamState load_state(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (a.find_meta("kind").value_or("") != "user-stream-state") {
    throw Error(ErrorKind::Io, path.string() + " is not a stream state snapshot");
  }
  UserStreamState st;
  const int layers = std::stoi(a.meta("layers"));
  for (int l = 0; l < layers; ++l) st.hidden.push_back(a.tensor("state.h." + std::to_string(l)));
  RunningUserStats& s = st.stats;
  const Tensor& c = a.tensor("stats.counts");
  if (c.size() != 7) throw Error(ErrorKind::Io, path.string() + ": stats.counts must hold 7 values");
  for (std::size_t i = 0; i < 4; ++i) s.answer_counts[i] = static_cast<std::int64_t>(c[i]);
  s.correct_count = static_cast<std::int64_t>(c[4]);
  s.answered_count = static_cast<std::int64_t>(c[5]);
  s.lecture_watch_count = static_cast<std::int64_t>(c[6]);
  if (a.has("stats.attempts")) {
    const Tensor& t = a.tensor("stats.attempts");
    for (std::size_t r = 0; r < t.rows(); ++r)
      s.attempt_counts[static_cast<std::int32_t>(t.at(r, 0))] = static_cast<std::int64_t>(t.at(r, 1));
  }
  if (auto v = a.find_meta("stats.last_lecture")) {
    LastLecture l;
    if (std::sscanf(v->c_str(), "%d %d %d", &l.part, &l.type, &l.tag) != 3) {
      throw Error(ErrorKind::Io, path.string() + ": malformed stats.last_lecture");
    }
    s.last_lecture = l;
  }
  if (auto v = a.find_meta("stats.last_timestamp")) s.last_timestamp = std::stoll(*v);
  s.last_row_id = std::stoll(a.meta("stats.last_row_id"));
  if (auto v = a.find_meta("stats.last_question_timestamp")) s.last_question_timestamp = std::stoll(*v);
  s.last_response = std::stoi(a.meta("stats.last_response"));
  return st;
}

// ---- model -----------------------------------------------------------------

GlobalModel::GlobalModel(const GlobalConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  nc::Rng rng(seed);
  auto& ps = params_;
  const auto e = static_cast<std::size_t>(config_.emb_dim);
  const auto h = static_cast<std::size_t>(config_.hidden);
  const double es = 0.1;
  auto table = [&](const std::string& name, int vocab) {
    ps.add(name, nc::normal_tensor({static_cast<std::size_t>(vocab), e}, es, rng));
  };
  table("global.emb.content", config_.content_vocab);
  table("global.emb.part", kPartVocab);
  table("global.emb.tag", config_.tag_vocab);
  table("global.emb.answer", 4);
  table("global.emb.response", kResponseVocab);
  ps.add("global.emb.elapsed", nc::normal_tensor({e}, es, rng));
  table("global.emb.elapsed_missing", 2);
  ps.add("global.emb.lag", nc::normal_tensor({e}, es, rng));
  table("global.emb.explanation", 3);
  ps.add("global.emb.attempt", nc::normal_tensor({e}, es, rng));
  table("global.emb.lect_part", kPartVocab);
  table("global.emb.lect_type", kLectTypeVocab);
  table("global.emb.lect_tag", kLectTagVocab);
  const std::size_t in = kEmbeddedInputs * e + kGlobalFeatureCount;
  ps.add("global.proj.w", nc::glorot(in, h, rng));
  ps.add("global.proj.b", Tensor({h}));
  for (int l = 0; l < config_.layers; ++l) {
    ps.add(layer_name("w", l), nc::glorot(h, 3 * h, rng));
    ps.add(layer_name("u", l), nc::glorot(h, 3 * h, rng));
    ps.add(layer_name("b", l), Tensor({3 * h}));
  }
  ps.add("global.out.w", nc::normal_tensor({h, 1}, 0.01, rng));
  ps.add("global.out.b", Tensor({1}));
}

Var GlobalModel::embed_steps(Graph& g, std::span<const StepFeatures> steps) const {
  const std::size_t T = steps.size();
  if (T == 0) throw Error(ErrorKind::InvalidArgument, "no steps to embed");
  std::vector<int> content(T), bundle(T), part(T), answer(T), response(T), missing(T), expl(T), lpart(T), ltype(T),
      ltag(T);
  std::vector<std::vector<int>> tags(T);
  std::vector<double> elapsed(T), lag(T), attempt(T);
  Tensor glob({T, static_cast<std::size_t>(kGlobalFeatureCount)});
  for (std::size_t t = 0; t < T; ++t) {
    const StepFeatures& s = steps[t];
    content[t] = s.ex.content_id;
    bundle[t] = s.ex.bundle_id;
    part[t] = s.ex.part;
    answer[t] = s.ex.answer;
    tags[t] = s.ex.tags;
    response[t] = s.resp.response;
    elapsed[t] = s.resp.elapsed_seconds / kMaxElapsedSeconds;
    missing[t] = s.resp.elapsed_missing ? 1 : 0;
    lag[t] = s.resp.lag_seconds / kMaxLagSeconds;
    expl[t] = s.resp.had_explanation;
    attempt[t] = attempt_feature_global(s.resp.attempt_count);
    lpart[t] = s.lect.last_part;
    ltype[t] = s.lect.last_type;
    ltag[t] = s.lect.last_tag;
    std::copy(s.global.begin(), s.global.end(), glob.data() + t * kGlobalFeatureCount);
  }
  auto p = [&g](const char* name) { return g.param(name); };
  Var table = p("global.emb.content");
  const Var parts[] = {
      nc::embedding(g, table, content),
      nc::embedding(g, table, bundle),
      nc::embedding(g, p("global.emb.part"), part),
      nc::embedding_mean(g, p("global.emb.tag"), tags),
      nc::embedding(g, p("global.emb.answer"), answer),
      nc::embedding(g, p("global.emb.response"), response),
      nc::continuous_embed(g, g.constant(Tensor({T}, std::move(elapsed))), p("global.emb.elapsed")),
      nc::embedding(g, p("global.emb.elapsed_missing"), missing),
      nc::continuous_embed(g, g.constant(Tensor({T}, std::move(lag))), p("global.emb.lag")),
      nc::embedding(g, p("global.emb.explanation"), expl),
      nc::continuous_embed(g, g.constant(Tensor({T}, std::move(attempt))), p("global.emb.attempt")),
      nc::embedding(g, p("global.emb.lect_part"), lpart),
      nc::embedding(g, p("global.emb.lect_type"), ltype),
      nc::embedding(g, p("global.emb.lect_tag"), ltag),
      g.constant(std::move(glob)),
  };
  return nc::linear(g, nc::concat_cols(g, parts), p("global.proj.w"), p("global.proj.b"));
}

GlobalSequence GlobalModel::forward_steps(Graph& g, std::span<const StepFeatures> steps,
                                          const std::vector<Tensor>& initial, nc::Rng* dropout_rng) const {
  const auto h = static_cast<std::size_t>(config_.hidden);
  if (!initial.empty() && initial.size() != static_cast<std::size_t>(config_.layers)) {
    throw Error(ErrorKind::ShapeMismatch, "initial state has " + std::to_string(initial.size()) + " layers, model has " +
                                              std::to_string(config_.layers));
  }
  GlobalSequence out;
  Var x = embed_steps(g, steps);
  const std::size_t T = steps.size();
  for (int l = 0; l < config_.layers; ++l) {
    if (l > 0) x = nc::dropout(g, x, config_.dropout, dropout_rng);
    Tensor h0 = initial.empty() ? Tensor({h}) : initial[static_cast<std::size_t>(l)];
    if (h0.size() != h) throw Error(ErrorKind::ShapeMismatch, "initial state width differs from hidden size");
    x = nc::gru_sequence(g, x, g.constant(std::move(h0)), g.param(layer_name("w", l)), g.param(layer_name("u", l)),
                         g.param(layer_name("b", l)));
    out.final_state.push_back(nc::reshape(g, nc::slice_rows(g, x, T - 1, T), {h}));
  }
  Var logit = nc::linear(g, x, g.param("global.out.w"), g.param("global.out.b"));
  out.prob = nc::reshape(g, nc::sigmoid(g, logit), {T});

  std::vector<double> labels(T, 0.0), weights(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    if (steps[t].label >= 0) {
      labels[t] = steps[t].label;
      weights[t] = 1.0;
      ++out.n_targets;
    }
  }
  if (out.n_targets > 0) out.loss = nc::bce_loss(g, out.prob, labels, weights);
  return out;
}

std::vector<double> GlobalModel::forward_sequence(const UserHistory& history, const FeatureContext& ctx) const {
  const std::vector<StepFeatures> steps = compute_steps(history, ctx);
  if (steps.empty()) return {};
  Graph g(&params_);
  GlobalSequence seq = forward_steps(g, steps);
  const auto& v = g.value(seq.prob).values();
  return {v.begin(), v.end()};
}

UserStreamState GlobalModel::initial_state() const {
  UserStreamState s;
  s.hidden.assign(static_cast<std::size_t>(config_.layers), Tensor({static_cast<std::size_t>(config_.hidden)}));
  return s;
}

double GlobalModel::step(UserStreamState& state, const StepFeatures& input) const {
  const auto h = static_cast<std::size_t>(config_.hidden);
  if (state.hidden.size() != static_cast<std::size_t>(config_.layers)) {
    throw Error(ErrorKind::ShapeMismatch, "stream state does not match the model depth");
  }
  Graph g(&params_);
  Var x = nc::reshape(g, embed_steps(g, std::span<const StepFeatures>(&input, 1)), {h});
  for (int l = 0; l < config_.layers; ++l) {
    auto& hl = state.hidden[static_cast<std::size_t>(l)];
    x = nc::gru_cell(g, x, g.constant(hl), g.param(layer_name("w", l)), g.param(layer_name("u", l)),
                     g.param(layer_name("b", l)));
    hl = g.value(x);
  }
  Var logit = nc::linear(g, x, g.param("global.out.w"), g.param("global.out.b"));
  return g.value(nc::sigmoid(g, logit))[0];
}

std::optional<double> GlobalModel::observe(UserStreamState& state, const FeatureContext& ctx,
                                           const InteractionRow& row) const {
  check_order(state.stats, row);
  std::optional<double> p;
  if (row.is_question()) p = step(state, make_step(state.stats, ctx, row));
  stream_update(state.stats, ctx, row);
  return p;
}

void GlobalModel::store(Archive& archive) const {
  archive.set_meta("model", "global");
  config_.store(archive);
  store_params(archive, params_);
}

GlobalModel GlobalModel::load(const Archive& archive) {
  if (archive.find_meta("model").value_or("") != "global") {
    throw Error(ErrorKind::Io, "archive does not hold a global model");
  }
  GlobalModel m(GlobalConfig::load(archive), 0);
  load_params(archive, m.params_);
  return m;
}

}  // namespace muse
