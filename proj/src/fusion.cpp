#include "muse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "muse/error.hpp"
#include "muse/metrics.hpp"

namespace muse {

namespace {

constexpr double kProbFloor = 1e-7;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Split {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
  double g_left = 0.0, h_left = 0.0;
};

struct Leaf {
  std::vector<std::vector<std::uint32_t>> sorted;  // rows of this leaf, per feature, by value
  double g = 0.0, h = 0.0;
  int depth = 0;
  int node = 0;
  Split best;
};

double leaf_score(double g, double h, double lambda) { return g * g / (h + lambda); }

void find_split(Leaf& leaf, const BlendMatrix& x, std::span<const double> grad, std::span<const double> hess,
                const GbdtConfig& cfg) {
  leaf.best = Split{};
  const std::size_t n = leaf.sorted.empty() ? 0 : leaf.sorted[0].size();
  if (leaf.depth >= cfg.max_depth || n < 2 * static_cast<std::size_t>(cfg.min_data_in_leaf)) return;
  const double parent = leaf_score(leaf.g, leaf.h, cfg.lambda);
  const auto nf = static_cast<std::size_t>(x.n_features);
  for (std::size_t f = 0; f < nf; ++f) {
    const auto& order = leaf.sorted[f];
    double gl = 0.0, hl = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      gl += grad[order[i]];
      hl += hess[order[i]];
      const double v = x.values[order[i] * nf + f];
      const double next = x.values[order[i + 1] * nf + f];
      if (!(v < next)) continue;
      if (i + 1 < static_cast<std::size_t>(cfg.min_data_in_leaf)) continue;
      if (n - i - 1 < static_cast<std::size_t>(cfg.min_data_in_leaf)) break;
      const double gain =
          leaf_score(gl, hl, cfg.lambda) + leaf_score(leaf.g - gl, leaf.h - hl, cfg.lambda) - parent;
      if (gain > leaf.best.gain) {
        leaf.best = Split{gain, static_cast<int>(f), 0.5 * (v + next), gl, hl};
      }
    }
  }
}

RegressionTree grow_tree(const BlendMatrix& x, const std::vector<std::vector<std::uint32_t>>& presorted,
                         std::span<const double> grad, std::span<const double> hess, const GbdtConfig& cfg,
                         std::vector<char>& goes_left) {
  RegressionTree tree;
  tree.nodes.emplace_back();
  std::vector<Leaf> leaves(1);
  leaves[0].sorted = presorted;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    leaves[0].g += grad[i];
    leaves[0].h += hess[i];
  }
  find_split(leaves[0], x, grad, hess, cfg);
  const auto nf = static_cast<std::size_t>(x.n_features);

  while (static_cast<int>(leaves.size()) < cfg.max_leaves) {
    std::size_t pick = leaves.size();
    for (std::size_t l = 0; l < leaves.size(); ++l) {
      if (leaves[l].best.feature < 0) continue;
      if (pick == leaves.size() || leaves[l].best.gain > leaves[pick].best.gain) pick = l;
    }
    if (pick == leaves.size()) break;

    Leaf parent = std::move(leaves[pick]);
    const Split s = parent.best;
    const auto f = static_cast<std::size_t>(s.feature);
    for (std::uint32_t r : parent.sorted[0]) goes_left[r] = x.values[r * nf + f] <= s.threshold ? 1 : 0;

    Leaf left, right;
    left.sorted.resize(nf);
    right.sorted.resize(nf);
    for (std::size_t k = 0; k < nf; ++k) {
      for (std::uint32_t r : parent.sorted[k]) (goes_left[r] ? left : right).sorted[k].push_back(r);
    }
    left.g = s.g_left;
    left.h = s.h_left;
    right.g = parent.g - s.g_left;
    right.h = parent.h - s.h_left;
    left.depth = right.depth = parent.depth + 1;
    left.node = static_cast<int>(tree.nodes.size());
    right.node = left.node + 1;
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    TreeNode& node = tree.nodes[static_cast<std::size_t>(parent.node)];
    node.feature = s.feature;
    node.threshold = s.threshold;
    node.left = left.node;
    node.right = right.node;

    find_split(left, x, grad, hess, cfg);
    find_split(right, x, grad, hess, cfg);
    leaves[pick] = std::move(left);
    leaves.insert(leaves.begin() + static_cast<std::ptrdiff_t>(pick) + 1, std::move(right));
  }
  for (const Leaf& leaf : leaves) tree.nodes[static_cast<std::size_t>(leaf.node)].value = -leaf.g / (leaf.h + cfg.lambda);
  return tree;
}

// Higher is better.
double validation_score(std::span<const double> margins, std::span<const int> labels, bool use_auc) {
  std::vector<double> p(margins.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(margins[i]);
  if (use_auc) return roc_auc(p, labels);
  return -logloss(p, labels);
}

}  // namespace

void GbdtConfig::validate() const {
  if (!(learning_rate > 0.0) || max_leaves < 2 || max_depth < 1 || lambda < 0.0 || max_rounds < 0 ||
      early_stopping < 1 || min_data_in_leaf < 1 || (stop_metric != "auc" && stop_metric != "logloss")) {
    throw Error(ErrorKind::Config, "gbdt: learning_rate > 0, max_leaves >= 2, max_depth >= 1, lambda >= 0, "
                                   "early_stopping >= 1, min_data_in_leaf >= 1 and stop_metric auc|logloss are required");
  }
}

double RegressionTree::predict(std::span<const double> x) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const TreeNode& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return nodes[i].value;
}

int RegressionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    best = std::max(best, d[i]);
    if (nodes[i].feature >= 0) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return best;
}

double BlenderModel::margin(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != n_features) {
    throw Error(ErrorKind::ShapeMismatch, "blender expects " + std::to_string(n_features) + " features");
  }
  double sum = 0.0;
  for (int t = 0; t < best_iteration; ++t) sum += trees[static_cast<std::size_t>(t)].predict(x);
  return base_score + learning_rate * sum;
}

double BlenderModel::predict(std::span<const double> x) const { return sigmoid(margin(x)); }

void BlendMatrix::push(std::span<const double> x, int label) {
  if (static_cast<int>(x.size()) != n_features) throw Error(ErrorKind::ShapeMismatch, "blend row width");
  values.insert(values.end(), x.begin(), x.end());
  labels.push_back(label);
}

std::vector<int> make_folds(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::InvalidArgument, "need at least 2 folds");
  if (static_cast<std::size_t>(k) > n) {
    throw Error(ErrorKind::InvalidArgument, std::to_string(k) + " folds for " + std::to_string(n) + " rows");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix(seed ^ 0x666f6c6473ULL));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<int> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  return fold;
}

BlenderModel fit_gbdt(const BlendMatrix& train, const BlendMatrix& valid, const GbdtConfig& cfg) {
  cfg.validate();
  if (train.rows() == 0 || valid.rows() == 0) throw Error(ErrorKind::EmptyDataset, "gbdt needs train and valid rows");
  if (train.n_features != valid.n_features || train.n_features < 1) {
    throw Error(ErrorKind::ShapeMismatch, "train and valid feature counts differ");
  }
  for (const auto* m : {&train, &valid}) {
    for (int y : m->labels) {
      if (y != 0 && y != 1) throw Error(ErrorKind::InvalidArgument, "labels must be 0 or 1");
    }
  }
  BlenderModel model;
  model.learning_rate = cfg.learning_rate;
  model.n_features = train.n_features;
  const std::size_t n = train.rows();
  const double positives = static_cast<double>(std::count(train.labels.begin(), train.labels.end(), 1));
  const double rate = std::clamp(positives / static_cast<double>(n), kProbFloor, 1.0 - kProbFloor);
  model.base_score = std::log(rate / (1.0 - rate));
  if (positives == 0.0 || positives == static_cast<double>(n)) return model;

  const auto nf = static_cast<std::size_t>(train.n_features);
  std::vector<std::vector<std::uint32_t>> presorted(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    auto& order = presorted[f];
    order.resize(n);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return train.values[a * nf + f] < train.values[b * nf + f]; });
  }
  const bool valid_both = std::count(valid.labels.begin(), valid.labels.end(), 1) > 0 &&
                          std::count(valid.labels.begin(), valid.labels.end(), 0) > 0;
  const bool use_auc = valid_both && cfg.stop_metric == "auc";

  std::vector<double> margin(n, model.base_score), grad(n), hess(n);
  std::vector<double> vmargin(valid.rows(), model.base_score);
  std::vector<char> goes_left(n, 0);
  double best = validation_score(vmargin, valid.labels, use_auc);
  int best_round = 0;
  for (int round = 1; round <= cfg.max_rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(margin[i]);
      grad[i] = p - train.labels[i];
      hess[i] = p * (1.0 - p);
    }
    RegressionTree tree = grow_tree(train, presorted, grad, hess, cfg, goes_left);
    for (std::size_t i = 0; i < n; ++i) margin[i] += cfg.learning_rate * tree.predict(train.row(i));
    for (std::size_t i = 0; i < valid.rows(); ++i) vmargin[i] += cfg.learning_rate * tree.predict(valid.row(i));
    model.trees.push_back(std::move(tree));
    const double score = validation_score(vmargin, valid.labels, use_auc);
    if (score > best) {
      best = score;
      best_round = round;
    } else if (round - best_round >= cfg.early_stopping) {
      break;
    }
  }
  model.best_iteration = best_round;
  return model;
}

double blend_predict(const BlenderModel& model, double p_local, double p_global) {
  const double x[2] = {p_local, p_global};
  return model.predict(x);
}

std::string dump_blender(const BlenderModel& model) {
  std::ostringstream out;
  char buf[128];
  out << "blender\n";
  std::snprintf(buf, sizeof buf, "base_score %.17g\nlearning_rate %.17g\n", model.base_score, model.learning_rate);
  out << buf;
  out << "n_features " << model.n_features << "\nbest_iteration " << model.best_iteration << "\ntrees "
      << model.trees.size() << "\n";
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    const auto& nodes = model.trees[t].nodes;
    out << "tree " << t << " nodes " << nodes.size() << "\n";
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const TreeNode& n = nodes[i];
      if (n.feature >= 0) {
        std::snprintf(buf, sizeof buf, "  %zu split f%d <= %.17g ? %d : %d\n", i, n.feature, n.threshold, n.left, n.right);
      } else {
        std::snprintf(buf, sizeof buf, "  %zu leaf %.17g\n", i, n.value);
      }
      out << buf;
    }
  }
  return out.str();
}

BlenderModel parse_blender(const std::string& text) {
  std::istringstream in(text);
  auto fail = [](const std::string& what) -> void { throw Error(ErrorKind::MalformedRow, "blender dump: " + what); };
  std::string word;
  BlenderModel model;
  std::size_t n_trees = 0;
  in >> word;
  if (word != "blender") fail("missing header");
  if (!(in >> word >> model.base_score) || word != "base_score") fail("base_score");
  if (!(in >> word >> model.learning_rate) || word != "learning_rate") fail("learning_rate");
  if (!(in >> word >> model.n_features) || word != "n_features") fail("n_features");
  if (!(in >> word >> model.best_iteration) || word != "best_iteration") fail("best_iteration");
  if (!(in >> word >> n_trees) || word != "trees") fail("trees");
  for (std::size_t t = 0; t < n_trees; ++t) {
    std::size_t index = 0, count = 0;
    std::string nodes_word;
    if (!(in >> word >> index >> nodes_word >> count) || word != "tree" || index != t) fail("tree " + std::to_string(t));
    RegressionTree tree;
    tree.nodes.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t id = 0;
      std::string kind;
      if (!(in >> id >> kind) || id != i) fail("node order in tree " + std::to_string(t));
      TreeNode& n = tree.nodes[i];
      if (kind == "leaf") {
        if (!(in >> n.value)) fail("leaf value");
      } else if (kind == "split") {
        std::string feat, le, q, colon;
        if (!(in >> feat >> le >> n.threshold >> q >> n.left >> colon >> n.right) || feat.size() < 2 || feat[0] != 'f') {
          fail("split node");
        }
        n.feature = std::stoi(feat.substr(1));
        if (n.feature < 0 || n.feature >= model.n_features || n.left <= static_cast<int>(i) ||
            n.right <= static_cast<int>(i) || n.left >= static_cast<int>(count) || n.right >= static_cast<int>(count)) {
          fail("split node out of range");
        }
      } else {
        fail("unknown node kind " + kind);
      }
    }
    model.trees.push_back(std::move(tree));
  }
  if (model.best_iteration < 0 || model.best_iteration > static_cast<int>(model.trees.size())) fail("best_iteration");
  return model;
}

FusionResult run_fusion(std::span<const BlendRow> rows, const std::set<std::int64_t>& component_train_users,
                        const FusionOptions& options) {
  if (options.folds < 3) throw Error(ErrorKind::InvalidArgument, "fusion needs at least 3 folds");
  for (const auto& r : rows) {
    if (component_train_users.count(r.user_id)) {
      throw Error(ErrorKind::Provenance, "blend row " + std::to_string(r.row_id) + " belongs to user " +
                                             std::to_string(r.user_id) + ", who was in the component training split");
    }
  }
  const int k = options.folds;
  FusionResult result;
  result.fold = make_folds(rows.size(), k, options.seed);
  const int width = 2 + (options.use_extra && !rows.empty() ? static_cast<int>(rows[0].extra.size()) : 0);
  auto features = [&](const BlendRow& r) {
    std::vector<double> x{r.p_local, r.p_global};
    if (options.use_extra) {
      if (static_cast<int>(r.extra.size()) + 2 != width) throw Error(ErrorKind::ShapeMismatch, "ragged extra features");
      x.insert(x.end(), r.extra.begin(), r.extra.end());
    }
    return x;
  };

  // Folds whose rows each blender actually saw, checked again before scoring.
  std::vector<std::vector<int>> trained_on(static_cast<std::size_t>(k));
  result.blenders.resize(static_cast<std::size_t>(k));
  auto fit_fold = [&](int f) {
    const int valid_fold = (f + 1) % k;
    BlendMatrix train{width, {}, {}}, valid{width, {}, {}};
    std::vector<int>& seen = trained_on[static_cast<std::size_t>(f)];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int fi = result.fold[i];
      if (fi == f) continue;
      (fi == valid_fold ? valid : train).push(features(rows[i]), rows[i].label);
      if (std::find(seen.begin(), seen.end(), fi) == seen.end()) seen.push_back(fi);
    }
    result.blenders[static_cast<std::size_t>(f)] = fit_gbdt(train, valid, options.gbdt);
  };
  const int threads = std::clamp(options.threads, 1, k);
  if (threads == 1) {
    for (int f = 0; f < k; ++f) fit_fold(f);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (int f = t; f < k; f += threads) fit_fold(f);
      });
    }
    for (auto& th : pool) th.join();
  }

  result.fused.resize(rows.size());
  result.blender_of_row.resize(rows.size());
  std::vector<double> pl(rows.size()), pg(rows.size());
  std::vector<int> labels(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int f = result.fold[i];
    const auto& seen = trained_on[static_cast<std::size_t>(f)];
    if (std::find(seen.begin(), seen.end(), f) != seen.end()) {
      throw Error(ErrorKind::Provenance, "blender " + std::to_string(f) + " was fitted on the fold it scores");
    }
    result.blender_of_row[i] = f;
    result.fused[i] = result.blenders[static_cast<std::size_t>(f)].predict(features(rows[i]));
    pl[i] = rows[i].p_local;
    pg[i] = rows[i].p_global;
    labels[i] = rows[i].label;
  }
  result.auc_local = roc_auc(pl, labels);
  result.auc_global = roc_auc(pg, labels);
  result.auc_fused = roc_auc(result.fused, labels);
  return result;
}

void write_fused_predictions(const std::filesystem::path& path, std::span<const BlendRow> rows,
                             std::span<const double> fused) {
  if (rows.size() != fused.size()) throw Error(ErrorKind::ShapeMismatch, "fused predictions do not match rows");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "row_id,p_local,p_global,p_fused,label\n";
  char buf[160];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%d\n", static_cast<long long>(rows[i].row_id),
                  rows[i].p_local, rows[i].p_global, fused[i], rows[i].label);
    out << buf;
  }
}

}  // namespace muse
