#include "muse/muse_local.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

#include "muse/error.hpp"

namespace muse {

namespace {

using nc::Graph;
using nc::Tensor;
using nc::Var;

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using Vec = Eigen::VectorXd;

CMapR as_mat(const Tensor& t) {
  return CMapR(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MapR as_mat(Tensor& t) {
  return MapR(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Shared pooling core: query m pools valid seq rows j < limits[m].
Var pool_core(Graph& g, Var seq, Var queries, std::vector<std::size_t> limits, std::span<const std::uint8_t> valid,
              const PoolWeights& w) {
  const Tensor& sv = g.value(seq);
  const Tensor& qv = g.value(queries);
  const Tensor& w1v = g.value(w.w1);
  const std::size_t W = sv.rows(), d = sv.cols(), M = qv.rows();
  const std::size_t H = w1v.cols();
  if (qv.cols() != d || valid.size() != W || limits.size() != M) {
    throw Error(ErrorKind::ShapeMismatch, "attention pooling: sequence/query/mask sizes disagree");
  }
  if (w1v.rows() != 3 * d || g.value(w.b1).size() != H || g.value(w.w2).size() != H || g.value(w.b2).size() != 1) {
    throw Error(ErrorKind::ShapeMismatch, "attention pooling: MLP weights do not match width " + std::to_string(d));
  }
  const auto di = static_cast<Eigen::Index>(d), Hi = static_cast<Eigen::Index>(H);
  CMapR S = as_mat(sv), Q = as_mat(qv), W1 = as_mat(w1v);
  const Eigen::Map<const Eigen::RowVectorXd> b1(g.value(w.b1).data(), Hi);
  const Eigen::Map<const Vec> w2(g.value(w.w2).data(), Hi);
  const double b2 = g.value(w.b2)[0];

  const MatR SA = S * W1.topRows(di);
  const MatR QB = Q * W1.middleRows(di, di);

  // One row per (query m, step j) pair; X holds S_j * q_m.
  struct Cache {
    std::vector<Eigen::Index> m, j;
    MatR X;
    MatR hid;    // GELU output
    MatR slope;  // GELU derivative at the pre-activation
    Vec wts;
  };
  auto cache = std::make_shared<Cache>();
  Cache& c = *cache;
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t j = 0; j < std::min(limits[m], W); ++j) {
      if (!valid[j]) continue;
      c.m.push_back(static_cast<Eigen::Index>(m));
      c.j.push_back(static_cast<Eigen::Index>(j));
    }
  }
  const auto P = static_cast<Eigen::Index>(c.m.size());
  c.X.resize(P, di);
  for (Eigen::Index p = 0; p < P; ++p) c.X.row(p) = S.row(c.j[p]).cwiseProduct(Q.row(c.m[p]));
  MatR pre = c.X * W1.bottomRows(di);
  c.hid.resize(P, Hi);
  c.slope.resize(P, Hi);
  for (Eigen::Index p = 0; p < P; ++p) {
    const double* sa = SA.data() + c.j[p] * Hi;
    const double* qb = QB.data() + c.m[p] * Hi;
    for (Eigen::Index h = 0; h < Hi; ++h) {
      nc::gelu_with_grad(pre(p, h) + sa[h] + qb[h] + b1(h), c.hid(p, h), c.slope(p, h));
    }
  }
  c.wts = (c.hid * w2).array() + b2;
  Tensor out({M, d});
  MapR Out = as_mat(out);
  for (Eigen::Index p = 0; p < P; ++p) Out.row(c.m[p]) += c.wts(p) * S.row(c.j[p]);

  return g.record(std::move(out), {seq, queries, w.w1, w.b1, w.w2, w.b2},
                  [seq, queries, w, cache, d, H](Graph& gr, int self) {
    const Cache& c = *cache;
    const auto di = static_cast<Eigen::Index>(d), Hi = static_cast<Eigen::Index>(H);
    const auto P = static_cast<Eigen::Index>(c.m.size());
    CMapR S = as_mat(gr.value(seq)), Q = as_mat(gr.value(queries)), W1 = as_mat(gr.value(w.w1));
    const Eigen::Map<const Eigen::RowVectorXd> w2(gr.value(w.w2).data(), Hi);
    CMapR dOut = as_mat(gr.out_grad(self));

    MatR dS = MatR::Zero(S.rows(), di);
    MatR dQ = MatR::Zero(Q.rows(), di);
    MatR dSA = MatR::Zero(S.rows(), Hi);
    MatR dQB = MatR::Zero(Q.rows(), Hi);
    Vec dw(P);
    for (Eigen::Index p = 0; p < P; ++p) {
      dw(p) = S.row(c.j[p]).dot(dOut.row(c.m[p]));
      dS.row(c.j[p]) += c.wts(p) * dOut.row(c.m[p]);
    }
    MatR dpre = (dw * w2).cwiseProduct(c.slope);
    for (Eigen::Index p = 0; p < P; ++p) {
      dSA.row(c.j[p]) += dpre.row(p);
      dQB.row(c.m[p]) += dpre.row(p);
    }
    const MatR dX = dpre * W1.bottomRows(di).transpose();
    for (Eigen::Index p = 0; p < P; ++p) {
      dS.row(c.j[p]) += dX.row(p).cwiseProduct(Q.row(c.m[p]));
      dQ.row(c.m[p]) += dX.row(p).cwiseProduct(S.row(c.j[p]));
    }

    if (Tensor* g1 = gr.grad_slot(w.w1)) {
      MapR dW1 = as_mat(*g1);
      dW1.topRows(di).noalias() += S.transpose() * dSA;
      dW1.middleRows(di, di).noalias() += Q.transpose() * dQB;
      dW1.bottomRows(di).noalias() += c.X.transpose() * dpre;
    }
    if (Tensor* gs = gr.grad_slot(seq)) {
      dS.noalias() += dSA * W1.topRows(di).transpose();
      as_mat(*gs) += dS;
    }
    if (Tensor* gq = gr.grad_slot(queries)) {
      dQ.noalias() += dQB * W1.middleRows(di, di).transpose();
      as_mat(*gq) += dQ;
    }
    if (Tensor* gb1 = gr.grad_slot(w.b1)) {
      const Eigen::RowVectorXd db1 = dpre.colwise().sum();
      for (Eigen::Index h = 0; h < Hi; ++h) (*gb1)[static_cast<std::size_t>(h)] += db1(h);
    }
    if (Tensor* gw2 = gr.grad_slot(w.w2)) {
      const Vec dw2 = c.hid.transpose() * dw;
      for (Eigen::Index h = 0; h < Hi; ++h) (*gw2)[static_cast<std::size_t>(h)] += dw2(h);
    }
    if (Tensor* gb2 = gr.grad_slot(w.b2)) (*gb2)[0] += dw.sum();
  });
}

}  // namespace

// ---- config ----------------------------------------------------------------

LocalConfig LocalConfig::desk() {
  LocalConfig c;
  c.d_model = 32;
  c.heads = 4;
  c.window = 64;
  return c;
}

void LocalConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, "local model: " + what); };
  if (d_model <= 0 || heads <= 0) fail("d_model and heads must be positive");
  if (d_model % heads != 0) fail("d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
  if (n_user_enc < 1 || n_ex_dec < 1 || n_lect_enc < 1) fail("every encoder/decoder stack needs at least one block");
  if (window < 1) fail("window must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0,1)");
  if (agg_width < 0 || agg_layers < 0) fail("aggregator width/layers must be non-negative");
  if (ffn_mult < 1 || pool_hidden < 1 || head_hidden1 < 1 || head_hidden2 < 1) fail("layer widths must be positive");
  if (content_vocab < 1 || tag_vocab < 1 || task_vocab < 1) fail("vocabulary sizes must be positive");
}

LocalConfig LocalConfig::with_vocab(const FeatureContext& ctx) const {
  LocalConfig c = *this;
  c.content_vocab = muse::content_vocab(ctx.questions);
  c.tag_vocab = question_tag_vocab(ctx.questions);
  return c;
}

void LocalConfig::store(Archive& a) const {
  a.set_meta("local.d_model", std::to_string(d_model));
  a.set_meta("local.heads", std::to_string(heads));
  a.set_meta("local.n_user_enc", std::to_string(n_user_enc));
  a.set_meta("local.n_ex_dec", std::to_string(n_ex_dec));
  a.set_meta("local.n_lect_enc", std::to_string(n_lect_enc));
  a.set_meta("local.window", std::to_string(window));
  a.set_meta("local.dropout", format_double(dropout));
  a.set_meta("local.agg_width", std::to_string(agg_width));
  a.set_meta("local.agg_layers", std::to_string(agg_layers));
  a.set_meta("local.ffn_mult", std::to_string(ffn_mult));
  a.set_meta("local.pool_hidden", std::to_string(pool_hidden));
  a.set_meta("local.head_hidden1", std::to_string(head_hidden1));
  a.set_meta("local.head_hidden2", std::to_string(head_hidden2));
  a.set_meta("local.content_vocab", std::to_string(content_vocab));
  a.set_meta("local.tag_vocab", std::to_string(tag_vocab));
  a.set_meta("local.task_vocab", std::to_string(task_vocab));
}

LocalConfig LocalConfig::load(const Archive& a) {
  LocalConfig c;
  auto i = [&](const char* key) { return std::stoi(a.meta(std::string("local.") + key)); };
  c.d_model = i("d_model");
  c.heads = i("heads");
  c.n_user_enc = i("n_user_enc");
  c.n_ex_dec = i("n_ex_dec");
  c.n_lect_enc = i("n_lect_enc");
  c.window = i("window");
  c.dropout = std::stod(a.meta("local.dropout"));
  c.agg_width = i("agg_width");
  c.agg_layers = i("agg_layers");
  c.ffn_mult = i("ffn_mult");
  c.pool_hidden = i("pool_hidden");
  c.head_hidden1 = i("head_hidden1");
  c.head_hidden2 = i("head_hidden2");
  c.content_vocab = i("content_vocab");
  c.tag_vocab = i("tag_vocab");
  c.task_vocab = i("task_vocab");
  c.validate();
  return c;
}

// ---- standalone ops ----------------------------------------------------------

Tensor frame_attention_mask(std::span<const std::uint8_t> valid) {
  const std::size_t W = valid.size();
  Tensor m({W, W}, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < W; ++i) {
    for (std::size_t j = 0; j < i; ++j)
      if (valid[j]) m.at(i, j) = 0.0;
    m.at(i, i) = 0.0;
  }
  return m;
}

Var multi_scale_aggregate(Graph& g, Var x, Var logits, std::span<const std::uint8_t> valid) {
  const Tensor& xv = g.value(x);
  const Tensor& lv = g.value(logits);
  const std::size_t W = xv.rows(), d = xv.cols(), taps = lv.size();
  if (valid.size() != W) throw Error(ErrorKind::ShapeMismatch, "aggregate: mask length differs from sequence");
  if (taps == 0) throw Error(ErrorKind::ShapeMismatch, "aggregate: no taps");

  // exp(l - max) once; the softmax normalizer is replaced per row by the sum
  // over in-range taps.
  auto e = std::make_shared<std::vector<double>>(taps);
  const double mx = *std::max_element(lv.values().begin(), lv.values().end());
  for (std::size_t t = 0; t < taps; ++t) (*e)[t] = std::exp(lv[t] - mx);

  auto in_range = [valid, taps](std::size_t i, std::size_t t, std::size_t& j) {
    const std::size_t back = taps - 1 - t;
    if (back > i) return false;
    j = i - back;
    return valid[j] != 0;
  };

  Tensor y(xv.shape());
  for (std::size_t i = 0; i < W; ++i) {
    double* out = y.data() + i * d;
    if (!valid[i]) {
      std::copy_n(xv.data() + i * d, d, out);
      continue;
    }
    double z = 0.0;
    std::size_t j = 0;
    for (std::size_t t = 0; t < taps; ++t)
      if (in_range(i, t, j)) z += (*e)[t];
    for (std::size_t t = 0; t < taps; ++t) {
      if (!in_range(i, t, j)) continue;
      const double b = (*e)[t] / z;
      const double* src = xv.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) out[c] += b * src[c];
    }
  }

  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  return g.record(std::move(y), {x, logits}, [x, logits, e, mask = std::move(mask), d, taps](Graph& gr, int self) {
    const Tensor& xv = gr.value(x);
    const Tensor& yv = gr.value(Var{self});
    const Tensor& dy = gr.out_grad(self);
    Tensor* dx = gr.grad_slot(x);
    Tensor* dl = gr.grad_slot(logits);
    const std::size_t W = mask.size();
    auto in_range = [&mask, taps](std::size_t i, std::size_t t, std::size_t& j) {
      const std::size_t back = taps - 1 - t;
      if (back > i) return false;
      j = i - back;
      return mask[j] != 0;
    };
    for (std::size_t i = 0; i < W; ++i) {
      const double* gi = dy.data() + i * d;
      if (!mask[i]) {
        if (dx != nullptr)
          for (std::size_t c = 0; c < d; ++c) (*dx)[i * d + c] += gi[c];
        continue;
      }
      double z = 0.0;
      std::size_t j = 0;
      for (std::size_t t = 0; t < taps; ++t)
        if (in_range(i, t, j)) z += (*e)[t];
      double dot_out = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot_out += gi[c] * yv[i * d + c];
      for (std::size_t t = 0; t < taps; ++t) {
        if (!in_range(i, t, j)) continue;
        const double b = (*e)[t] / z;
        const double* src = xv.data() + j * d;
        if (dx != nullptr)
          for (std::size_t c = 0; c < d; ++c) (*dx)[j * d + c] += b * gi[c];
        if (dl != nullptr) {
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += gi[c] * src[c];
          (*dl)[t] += b * (dot - dot_out);
        }
      }
    }
  });
}

Var attention_pool(Graph& g, Var seq, Var query, std::span<const std::uint8_t> valid, const PoolWeights& w) {
  if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) {
    throw Error(ErrorKind::InvalidArgument, "attention pooling over a sequence with no valid step");
  }
  const std::size_t d = g.value(seq).cols();
  Var q = reshape(g, query, {1, d});
  Var pooled = pool_core(g, seq, q, {g.value(seq).rows()}, valid, w);
  return reshape(g, pooled, {d});
}

Var causal_attention_pool(Graph& g, Var seq, Var queries, std::span<const std::uint8_t> valid, const PoolWeights& w) {
  const std::size_t M = g.value(queries).rows();
  std::vector<std::size_t> limits(M);
  for (std::size_t m = 0; m < M; ++m) limits[m] = m + 1;
  return pool_core(g, seq, queries, std::move(limits), valid, w);
}

// ---- model -----------------------------------------------------------------

namespace {

constexpr int kPartVocab = kPartCount + 1;
constexpr int kLectTypeVocab = kLectureTypeCount + 1;
constexpr int kLectTagVocab = kOtherTagBucket + 1;

void add_attention_params(nc::ParamStore& ps, const std::string& prefix, std::size_t d, nc::Rng& rng) {
  for (const char* m : {"q", "k", "v", "o"}) {
    ps.add(prefix + ".w" + m, nc::glorot(d, d, rng));
    ps.add(prefix + ".b" + m, Tensor({d}));
  }
}

void add_norm_params(nc::ParamStore& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".g", Tensor({d}, 1.0));
  ps.add(prefix + ".b", Tensor({d}));
}

void add_ffn_params(nc::ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t hidden, nc::Rng& rng) {
  ps.add(prefix + ".w1", nc::glorot(d, hidden, rng));
  ps.add(prefix + ".b1", Tensor({hidden}));
  ps.add(prefix + ".w2", nc::glorot(hidden, d, rng));
  ps.add(prefix + ".b2", Tensor({d}));
}

void add_pool_params(nc::ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t hidden, nc::Rng& rng) {
  ps.add(prefix + ".w1", nc::glorot(3 * d, hidden, rng));
  ps.add(prefix + ".b1", Tensor({hidden}));
  ps.add(prefix + ".w2", nc::normal_tensor({hidden}, 0.1 / std::sqrt(static_cast<double>(hidden)), rng));
  ps.add(prefix + ".b2", Tensor({1}));
}

struct BlockContext {
  Graph& g;
  const Tensor& mask;
  std::size_t heads;
  double dropout;
  nc::Rng* rng;

  Var p(const std::string& name) const { return g.param(name); }

  nc::AttentionWeights attn(const std::string& prefix) const {
    return {p(prefix + ".wq"), p(prefix + ".bq"), p(prefix + ".wk"), p(prefix + ".bk"),
            p(prefix + ".wv"), p(prefix + ".bv"), p(prefix + ".wo"), p(prefix + ".bo")};
  }
  Var norm(Var x, const std::string& prefix) const {
    return nc::layer_norm(g, x, p(prefix + ".g"), p(prefix + ".b"));
  }
  Var ffn(Var x, const std::string& prefix) const {
    Var h = nc::gelu(g, nc::linear(g, x, p(prefix + ".w1"), p(prefix + ".b1")));
    return nc::linear(g, h, p(prefix + ".w2"), p(prefix + ".b2"));
  }
  Var drop(Var x) const { return nc::dropout(g, x, dropout, rng); }

  // Post-norm residual sublayers.
  Var encoder(Var x, const std::string& prefix) const {
    x = norm(nc::add(g, x, drop(nc::multi_head_attention(g, x, x, attn(prefix + ".attn"), mask, heads))),
             prefix + ".ln1");
    return norm(nc::add(g, x, drop(ffn(x, prefix + ".ffn"))), prefix + ".ln2");
  }
  Var decoder(Var x, Var memory, const std::string& prefix) const {
    x = norm(nc::add(g, x, drop(nc::multi_head_attention(g, x, x, attn(prefix + ".self"), mask, heads))),
             prefix + ".ln1");
    x = norm(nc::add(g, x, drop(nc::multi_head_attention(g, x, memory, attn(prefix + ".cross"), mask, heads))),
             prefix + ".ln2");
    return norm(nc::add(g, x, drop(ffn(x, prefix + ".ffn"))), prefix + ".ln3");
  }
  PoolWeights pool(const std::string& prefix) const {
    return {p(prefix + ".w1"), p(prefix + ".b1"), p(prefix + ".w2"), p(prefix + ".b2")};
  }
};

struct Embedded {
  Var ex, resp, lect, content;
};

Embedded embed_frame(Graph& g, const LocalConfig& cfg, const LocalFeatureFrame& f) {
  const std::size_t W = static_cast<std::size_t>(f.window);
  std::vector<int> content(W), bundle(W), part(W), answer(W), task(W), response(W), elapsed_missing(W),
      explanation(W), attempted(W), lpart(W), ltype(W), ltag(W);
  std::vector<std::vector<int>> tags(W);
  std::vector<double> elapsed(W), lag(W);
  for (std::size_t i = 0; i < W; ++i) {
    const auto& e = f.ex[i];
    const auto& r = f.resp[i];
    const auto& l = f.lect[i];
    content[i] = e.content_id;
    bundle[i] = e.bundle_id;
    part[i] = e.part;
    answer[i] = e.answer;
    tags[i] = e.tags;
    task[i] = std::clamp(r.task_container, 0, cfg.task_vocab - 1);
    response[i] = r.response;
    elapsed[i] = r.elapsed_seconds / kMaxElapsedSeconds;
    elapsed_missing[i] = r.elapsed_missing ? 1 : 0;
    lag[i] = r.lag_seconds / kMaxLagSeconds;
    explanation[i] = r.had_explanation;
    attempted[i] = attempt_feature_local(r.attempt_count);
    lpart[i] = l.last_part;
    ltype[i] = l.last_type;
    ltag[i] = l.last_tag;
  }
  auto p = [&g](const char* name) { return g.param(name); };
  Embedded out;
  Var table = p("local.emb.content");
  out.content = nc::embedding(g, table, content);
  const Var ex_parts[] = {out.content, nc::embedding(g, table, bundle), nc::embedding(g, p("local.emb.part"), part),
                          nc::embedding_mean(g, p("local.emb.tag"), tags),
                          nc::embedding(g, p("local.emb.answer"), answer)};
  out.ex = nc::add(g, nc::linear(g, nc::concat_cols(g, ex_parts), p("local.proj.ex.w"), p("local.proj.ex.b")),
                   p("local.pos.ex"));

  const Var resp_parts[] = {
      nc::embedding(g, p("local.emb.task"), task),
      nc::embedding(g, p("local.emb.response"), response),
      nc::continuous_embed(g, g.constant(Tensor({W}, std::move(elapsed))), p("local.emb.elapsed")),
      nc::embedding(g, p("local.emb.elapsed_missing"), elapsed_missing),
      nc::continuous_embed(g, g.constant(Tensor({W}, std::move(lag))), p("local.emb.lag")),
      nc::embedding(g, p("local.emb.explanation"), explanation),
      nc::embedding(g, p("local.emb.attempted"), attempted)};
  out.resp = nc::add(g, nc::linear(g, nc::concat_cols(g, resp_parts), p("local.proj.resp.w"), p("local.proj.resp.b")),
                     p("local.pos.resp"));

  const Var lect_parts[] = {nc::embedding(g, p("local.emb.lect_part"), lpart),
                            nc::embedding(g, p("local.emb.lect_type"), ltype),
                            nc::embedding(g, p("local.emb.lect_tag"), ltag)};
  out.lect = nc::add(g, nc::linear(g, nc::concat_cols(g, lect_parts), p("local.proj.lect.w"), p("local.proj.lect.b")),
                     p("local.pos.lect"));
  return out;
}

}  // namespace

LocalModel::LocalModel(const LocalConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  nc::Rng rng(seed);
  auto& ps = params_;
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto W = static_cast<std::size_t>(config_.window);
  const double es = 0.1;
  auto table = [&](const std::string& name, int vocab) {
    ps.add(name, nc::normal_tensor({static_cast<std::size_t>(vocab), d}, es, rng));
  };
  table("local.emb.content", config_.content_vocab);
  table("local.emb.part", kPartVocab);
  table("local.emb.tag", config_.tag_vocab);
  table("local.emb.answer", 4);
  table("local.emb.task", config_.task_vocab);
  table("local.emb.response", kResponseVocab);
  ps.add("local.emb.elapsed", nc::normal_tensor({d}, es, rng));
  table("local.emb.elapsed_missing", 2);
  ps.add("local.emb.lag", nc::normal_tensor({d}, es, rng));
  table("local.emb.explanation", 3);
  table("local.emb.attempted", 2);
  table("local.emb.lect_part", kPartVocab);
  table("local.emb.lect_type", kLectTypeVocab);
  table("local.emb.lect_tag", kLectTagVocab);
  for (const char* s : {"ex", "resp", "lect"}) ps.add(std::string("local.pos.") + s, nc::normal_tensor({W, d}, es, rng));
  ps.add("local.proj.ex.w", nc::glorot(5 * d, d, rng));
  ps.add("local.proj.ex.b", Tensor({d}));
  ps.add("local.proj.resp.w", nc::glorot(7 * d, d, rng));
  ps.add("local.proj.resp.b", Tensor({d}));
  ps.add("local.proj.lect.w", nc::glorot(3 * d, d, rng));
  ps.add("local.proj.lect.b", Tensor({d}));

  const auto taps = static_cast<std::size_t>(2 * config_.agg_width + 1);
  for (const char* s : {"ex", "resp"})
    for (int l = 0; l < config_.agg_layers; ++l)
      ps.add("local.agg." + std::string(s) + "." + std::to_string(l), Tensor({taps}));

  const auto ffn = d * static_cast<std::size_t>(config_.ffn_mult);
  for (int i = 0; i < config_.n_user_enc; ++i) {
    const std::string pre = "local.user_enc." + std::to_string(i);
    add_attention_params(ps, pre + ".attn", d, rng);
    add_norm_params(ps, pre + ".ln1", d);
    add_ffn_params(ps, pre + ".ffn", d, ffn, rng);
    add_norm_params(ps, pre + ".ln2", d);
  }
  for (int i = 0; i < config_.n_lect_enc; ++i) {
    const std::string pre = "local.lect_enc." + std::to_string(i);
    add_attention_params(ps, pre + ".attn", d, rng);
    add_norm_params(ps, pre + ".ln1", d);
    add_ffn_params(ps, pre + ".ffn", d, ffn, rng);
    add_norm_params(ps, pre + ".ln2", d);
  }
  for (int i = 0; i < config_.n_ex_dec; ++i) {
    const std::string pre = "local.ex_dec." + std::to_string(i);
    add_attention_params(ps, pre + ".self", d, rng);
    add_norm_params(ps, pre + ".ln1", d);
    add_attention_params(ps, pre + ".cross", d, rng);
    add_norm_params(ps, pre + ".ln2", d);
    add_ffn_params(ps, pre + ".ffn", d, ffn, rng);
    add_norm_params(ps, pre + ".ln3", d);
  }
  const auto ph = static_cast<std::size_t>(config_.pool_hidden);
  add_pool_params(ps, "local.pool.ex", d, ph, rng);
  add_pool_params(ps, "local.pool.lect", d, ph, rng);
  ps.add("local.gru.w", nc::glorot(d, 3 * d, rng));
  ps.add("local.gru.u", nc::glorot(d, 3 * d, rng));
  ps.add("local.gru.b", Tensor({3 * d}));

  const auto h1 = static_cast<std::size_t>(config_.head_hidden1), h2 = static_cast<std::size_t>(config_.head_hidden2);
  const std::size_t head_in = 4 * d + kGlobalFeatureCount;
  ps.add("local.head.w1", nc::glorot(head_in, h1, rng));
  ps.add("local.head.b1", Tensor({h1}));
  ps.add("local.head.w2", nc::glorot(h1, h2, rng));
  ps.add("local.head.b2", Tensor({h2}));
  ps.add("local.head.w3", nc::normal_tensor({h2, 1}, 0.01, rng));
  ps.add("local.head.b3", Tensor({1}));
}

void LocalModel::check_frame(const LocalFeatureFrame& f) const {
  const auto W = static_cast<std::size_t>(f.window);
  if (f.window != config_.window) {
    throw Error(ErrorKind::ShapeMismatch, "frame window " + std::to_string(f.window) + " but model window " +
                                              std::to_string(config_.window));
  }
  if (f.ex.size() != W || f.resp.size() != W || f.lect.size() != W || f.global.size() != W || f.label.size() != W ||
      f.valid.size() != W) {
    throw Error(ErrorKind::ShapeMismatch, "frame streams differ in length");
  }
}

LocalModel::Streams LocalModel::embed_streams(Graph& g, const LocalFeatureFrame& frame) const {
  check_frame(frame);
  Embedded e = embed_frame(g, config_, frame);
  return {e.ex, e.resp, e.lect};
}

LocalForward LocalModel::forward(Graph& g, const LocalFeatureFrame& f, const LocalForwardOptions& opt) const {
  check_frame(f);
  const auto W = static_cast<std::size_t>(f.window);
  const auto d = static_cast<std::size_t>(config_.d_model);
  Embedded e = embed_frame(g, config_, f);
  LocalForward out;
  out.ex = e.ex;
  out.resp = e.resp;
  out.lect = e.lect;
  Var ex = e.ex, resp = e.resp, lect = e.lect;
  if (opt.perturbation != nullptr) {
    ex = nc::add(g, ex, opt.perturbation->ex);
    resp = nc::add(g, resp, opt.perturbation->resp);
    lect = nc::add(g, lect, opt.perturbation->lect);
  }
  for (int l = 0; l < config_.agg_layers; ++l) {
    ex = multi_scale_aggregate(g, ex, g.param("local.agg.ex." + std::to_string(l)), f.valid);
    resp = multi_scale_aggregate(g, resp, g.param("local.agg.resp." + std::to_string(l)), f.valid);
  }

  const Tensor mask = frame_attention_mask(f.valid);
  const BlockContext bc{g, mask, static_cast<std::size_t>(config_.heads), config_.dropout, opt.dropout_rng};
  Var h = resp;
  for (int i = 0; i < config_.n_user_enc; ++i) h = bc.encoder(h, "local.user_enc." + std::to_string(i));
  Var hl = lect;
  for (int i = 0; i < config_.n_lect_enc; ++i) hl = bc.encoder(hl, "local.lect_enc." + std::to_string(i));
  Var dec = ex;
  for (int i = 0; i < config_.n_ex_dec; ++i) dec = bc.decoder(dec, h, "local.ex_dec." + std::to_string(i));

  Var pooled_dec = causal_attention_pool(g, dec, e.content, f.valid, bc.pool("local.pool.ex"));
  Var pooled_lect = causal_attention_pool(g, hl, e.content, f.valid, bc.pool("local.pool.lect"));
  Var summary = nc::gru_sequence(g, resp, g.constant(Tensor({d})), g.param("local.gru.w"), g.param("local.gru.u"),
                                 g.param("local.gru.b"), f.valid);

  Tensor glob({W, static_cast<std::size_t>(kGlobalFeatureCount)});
  for (std::size_t i = 0; i < W; ++i) std::copy(f.global[i].begin(), f.global[i].end(), glob.data() + i * kGlobalFeatureCount);
  const Var head_parts[] = {pooled_dec, pooled_lect, summary, dec, g.constant(std::move(glob))};
  Var z = nc::concat_cols(g, head_parts);
  z = nc::gelu(g, nc::linear(g, z, g.param("local.head.w1"), g.param("local.head.b1")));
  z = nc::gelu(g, nc::linear(g, z, g.param("local.head.w2"), g.param("local.head.b2")));
  z = nc::linear(g, z, g.param("local.head.w3"), g.param("local.head.b3"));
  out.prob = nc::reshape(g, nc::sigmoid(g, z), {W});

  std::vector<double> labels(W, 0.0), weights(W, 0.0);
  for (std::size_t i = 0; i < W; ++i) {
    if (f.valid[i] && f.label[i] >= 0) {
      labels[i] = f.label[i];
      weights[i] = 1.0;
      ++out.n_targets;
    }
  }
  if (out.n_targets > 0) out.loss = nc::bce_loss(g, out.prob, labels, weights);
  return out;
}

std::vector<double> LocalModel::predict_positions(const LocalFeatureFrame& frame) const {
  Graph g(&params_);
  LocalForward fw = forward(g, frame);
  const auto& v = g.value(fw.prob).values();
  return {v.begin(), v.end()};
}

double LocalModel::predict(const LocalFeatureFrame& frame) const {
  check_frame(frame);
  if (frame.window == 0 || !frame.valid.back()) {
    throw Error(ErrorKind::InvalidArgument, "frame has no valid target in its last slot");
  }
  return predict_positions(frame).back();
}

void LocalModel::store(Archive& archive) const {
  archive.set_meta("model", "local");
  config_.store(archive);
  store_params(archive, params_);
}

LocalModel LocalModel::load(const Archive& archive) {
  if (archive.find_meta("model").value_or("") != "local") {
    throw Error(ErrorKind::Io, "archive does not hold a local model");
  }
  LocalModel m(LocalConfig::load(archive), 0);
  load_params(archive, m.params_);
  return m;
}

}  // namespace muse
