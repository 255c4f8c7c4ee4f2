#include "muse/run_config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "muse/error.hpp"

namespace muse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& value, const char* type) {
  throw Error(ErrorKind::Config, "'" + value + "' is not a valid " + type);
}

void parse_value(const std::string& v, int& out) {
  char* end = nullptr;
  errno = 0;
  const long x = std::strtol(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno != 0 || x < INT32_MIN || x > INT32_MAX) bad_value(v, "integer");
  out = static_cast<int>(x);
}

void parse_value(const std::string& v, std::uint64_t& out) {
  char* end = nullptr;
  errno = 0;
  if (v.empty() || v[0] == '-') bad_value(v, "unsigned integer");
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (*end != '\0' || errno != 0) bad_value(v, "unsigned integer");
  out = x;
}

void parse_value(const std::string& v, double& out) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno != 0 || !std::isfinite(x)) bad_value(v, "number");
  out = x;
}

void parse_value(const std::string& v, bool& out) {
  if (v == "true" || v == "1") {
    out = true;
  } else if (v == "false" || v == "0") {
    out = false;
  } else {
    bad_value(v, "boolean (true/false)");
  }
}

void parse_value(const std::string& v, std::string& out) { out = v; }
void parse_value(const std::string& v, std::filesystem::path& out) {
  if (v.empty()) bad_value(v, "path");
  out = v;
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(const std::filesystem::path& v) { return v.string(); }
std::string format_value(double v) {
  char buf[64];
  const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;  // shortest form that reads back exactly
  return std::string(buf, end);
}

template <typename Get>
ConfigKey entry(std::string key, std::string help, Get get) {
  return ConfigKey{std::move(key), std::move(help),
                   [get](RunConfig& c, const std::string& v) { parse_value(v, get(c)); },
                   [get](const RunConfig& c) { return format_value(get(const_cast<RunConfig&>(c))); }};
}

#define MUSE_KEY(name, help, expr) entry(name, help, [](RunConfig& c) -> auto& { return expr; })

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  k.push_back(entry("preset", "desk or paper; applied before every other key",
                    [](RunConfig& c) -> std::string& { return c.preset; }));
  k.push_back(MUSE_KEY("data_dir", "dataset directory (interactions/questions/lectures/truth csv)", c.data_dir));
  k.push_back(MUSE_KEY("out_dir", "checkpoints, logs, reports and predictions", c.out_dir));
  k.push_back(MUSE_KEY("seed", "master seed for data generation, initialization and training", c.seed));
  k.push_back(MUSE_KEY("threads", "worker threads, 0 = machine parallelism, 1 = reference mode", c.threads));

  k.push_back(MUSE_KEY("sim.n_users", "simulated users", c.sim.n_users));
  k.push_back(MUSE_KEY("sim.n_questions", "simulated questions", c.sim.n_questions));
  k.push_back(MUSE_KEY("sim.n_lectures", "simulated lectures", c.sim.n_lectures));
  k.push_back(MUSE_KEY("sim.mean_interactions", "mean events per user", c.sim.mean_interactions));
  k.push_back(MUSE_KEY("sim.min_interactions", "minimum events per user", c.sim.min_interactions));
  k.push_back(MUSE_KEY("sim.lecture_prob", "chance an event is a lecture", c.sim.lecture_prob));
  k.push_back(MUSE_KEY("sim.lecture_gain", "skill gained on the lecture's part", c.sim.lecture_gain));
  k.push_back(MUSE_KEY("sim.attempt_bonus", "logit bonus on repeated questions", c.sim.attempt_bonus));
  k.push_back(MUSE_KEY("sim.practice_gain", "skill gained per answered question", c.sim.practice_gain));
  k.push_back(MUSE_KEY("sim.repeat_prob", "chance a question revisits a seen one", c.sim.repeat_prob));
  k.push_back(MUSE_KEY("sim.noise_scale", "logit temperature", c.sim.noise_scale));
  k.push_back(MUSE_KEY("sim.skill_sd", "spread of user skill", c.sim.skill_sd));
  k.push_back(MUSE_KEY("sim.skill_correlation", "shared share of skill variance across parts", c.sim.skill_correlation));
  k.push_back(MUSE_KEY("sim.difficulty_sd", "spread of question difficulty", c.sim.difficulty_sd));
  k.push_back(MUSE_KEY("sim.tags_per_part", "tag ids per part", c.sim.tags_per_part));

  k.push_back(MUSE_KEY("split.blend_fraction", "tail share of rows held out for blending", c.blend_fraction));
  k.push_back(MUSE_KEY("split.test_fraction", "share of the remaining rows held out for evaluation", c.test_fraction));

  k.push_back(MUSE_KEY("local.d_model", "model width", c.local.d_model));
  k.push_back(MUSE_KEY("local.heads", "attention heads", c.local.heads));
  k.push_back(MUSE_KEY("local.n_user_enc", "user encoder blocks", c.local.n_user_enc));
  k.push_back(MUSE_KEY("local.n_ex_dec", "exercise decoder blocks", c.local.n_ex_dec));
  k.push_back(MUSE_KEY("local.n_lect_enc", "lecture encoder blocks", c.local.n_lect_enc));
  k.push_back(MUSE_KEY("local.window", "frame length", c.local.window));
  k.push_back(MUSE_KEY("local.dropout", "dropout rate", c.local.dropout));
  k.push_back(MUSE_KEY("local.agg_width", "aggregator half-width w (2w+1 taps)", c.local.agg_width));
  k.push_back(MUSE_KEY("local.agg_layers", "stacked aggregators per stream", c.local.agg_layers));
  k.push_back(MUSE_KEY("local.ffn_mult", "feed-forward expansion", c.local.ffn_mult));
  k.push_back(MUSE_KEY("local.pool_hidden", "attention pooling hidden width", c.local.pool_hidden));
  k.push_back(MUSE_KEY("local.head_hidden1", "first head layer width", c.local.head_hidden1));
  k.push_back(MUSE_KEY("local.head_hidden2", "second head layer width", c.local.head_hidden2));
  k.push_back(MUSE_KEY("local.task_vocab", "task container id buckets", c.local.task_vocab));

  k.push_back(MUSE_KEY("global.hidden", "GRU width", c.global.hidden));
  k.push_back(MUSE_KEY("global.layers", "GRU layers", c.global.layers));
  k.push_back(MUSE_KEY("global.dropout", "dropout between GRU layers", c.global.dropout));
  k.push_back(MUSE_KEY("global.emb_dim", "per-feature embedding width", c.global.emb_dim));
  k.push_back(MUSE_KEY("global.segment", "truncated backprop length", c.global.segment));

  k.push_back(MUSE_KEY("train.local.lr_base", "peak learning rate", c.train_local.lr_base));
  k.push_back(MUSE_KEY("train.local.beta1", "Adam beta1", c.train_local.beta1));
  k.push_back(MUSE_KEY("train.local.beta2", "Adam beta2", c.train_local.beta2));
  k.push_back(MUSE_KEY("train.local.adam_eps", "Adam epsilon", c.train_local.adam_eps));
  k.push_back(MUSE_KEY("train.local.weight_decay", "decoupled weight decay", c.train_local.weight_decay));
  k.push_back(MUSE_KEY("train.local.batch", "frames per step", c.train_local.batch));
  k.push_back(MUSE_KEY("train.local.warmup", "Noam warmup steps", c.train_local.warmup));
  k.push_back(MUSE_KEY("train.local.epochs", "passes over the training frames", c.train_local.epochs));
  k.push_back(MUSE_KEY("train.local.ram_ratio", "random answer masking ratio", c.train_local.ram_ratio));
  k.push_back(MUSE_KEY("train.local.clip_norm", "gradient norm cap, <= 0 disables", c.train_local.clip_norm));
  k.push_back(MUSE_KEY("train.local.checkpoint_every", "steps between checkpoints, 0 = end only",
                       c.train_local.checkpoint_every));
  k.push_back(MUSE_KEY("train.adv.ascent_steps", "ascent passes per batch", c.train_local.adv_ascent_steps));
  k.push_back(MUSE_KEY("train.adv.step_size", "ascent step length", c.train_local.adv_step_size));
  k.push_back(MUSE_KEY("train.adv.epsilon", "perturbation norm bound", c.train_local.adv_epsilon));
  k.push_back(MUSE_KEY("train.adv.extra_steps", "fine-tuning steps", c.train_local.adv_extra_steps));
  k.push_back(MUSE_KEY("train.adv.lr", "fine-tuning learning rate", c.train_local.adv_lr));

  k.push_back(MUSE_KEY("train.global.lr_base", "learning rate", c.train_global.lr_base));
  k.push_back(MUSE_KEY("train.global.weight_decay", "decoupled weight decay", c.train_global.weight_decay));
  k.push_back(MUSE_KEY("train.global.batch", "users per step", c.train_global.batch));
  k.push_back(MUSE_KEY("train.global.epochs", "passes over the training users", c.train_global.epochs));
  k.push_back(MUSE_KEY("train.global.clip_norm", "gradient norm cap, <= 0 disables", c.train_global.clip_norm));
  k.push_back(MUSE_KEY("train.global.checkpoint_every", "steps between checkpoints, 0 = end only",
                       c.train_global.checkpoint_every));

  k.push_back(MUSE_KEY("fusion.folds", "out-of-fold partitions", c.fusion.folds));
  k.push_back(MUSE_KEY("fusion.use_extra", "append the nine global features to the blender input", c.fusion.use_extra));
  k.push_back(MUSE_KEY("fusion.local_model", "local checkpoint family to fuse: local or local_adv", c.blend_local));
  k.push_back(MUSE_KEY("fusion.learning_rate", "boosting shrinkage", c.fusion.gbdt.learning_rate));
  k.push_back(MUSE_KEY("fusion.max_leaves", "leaves per tree", c.fusion.gbdt.max_leaves));
  k.push_back(MUSE_KEY("fusion.max_depth", "tree depth cap", c.fusion.gbdt.max_depth));
  k.push_back(MUSE_KEY("fusion.lambda", "leaf L2 penalty", c.fusion.gbdt.lambda));
  k.push_back(MUSE_KEY("fusion.max_rounds", "boosting round cap", c.fusion.gbdt.max_rounds));
  k.push_back(MUSE_KEY("fusion.early_stopping", "rounds without validation gain before stopping",
                       c.fusion.gbdt.early_stopping));
  k.push_back(MUSE_KEY("fusion.min_data_in_leaf", "smallest leaf", c.fusion.gbdt.min_data_in_leaf));
  k.push_back(MUSE_KEY("fusion.stop_metric", "validation metric for early stopping: auc or logloss",
                       c.fusion.gbdt.stop_metric));
  return k;
}

#undef MUSE_KEY

TrainConfig global_training(bool desk) {
  TrainConfig c;
  c.weight_decay = 0.0;
  c.ram_ratio = 0.0;
  c.epochs = 3;
  c.batch = desk ? 32 : 256;
  return c;
}

}  // namespace

RunConfig RunConfig::preset_config(const std::string& name) {
  RunConfig c;
  if (name == "desk") {
    c.local = LocalConfig::desk();
    c.global = GlobalConfig::desk();
    c.train_local = TrainConfig::desk();
    c.train_global = global_training(true);
    // Depth-1 trees: an additive per-component blend that a few thousand rows can support.
    c.fusion.gbdt.max_leaves = 2;
    c.fusion.gbdt.max_depth = 1;
    c.fusion.gbdt.stop_metric = "logloss";
  } else if (name == "paper") {
    c.local = LocalConfig{};
    c.global = GlobalConfig{};
    c.train_local = TrainConfig{};
    c.train_global = global_training(false);
  } else {
    throw Error(ErrorKind::Config, "unknown preset '" + name + "' (expected desk or paper)");
  }
  c.preset = name;
  return c;
}

RunConfig RunConfig::resolved() const {
  RunConfig c = *this;
  if (c.threads <= 0) c.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  c.sim.seed = seed;
  c.train_local.seed = seed;
  c.train_local.threads = c.threads;
  c.train_global.seed = seed ^ 0x5eedULL;
  c.train_global.threads = c.threads;
  c.fusion.seed = seed;
  c.fusion.threads = c.threads;
  return c;
}

void RunConfig::validate() const {
  sim.validate();
  local.validate();
  global.validate();
  train_local.validate();
  train_global.validate();
  fusion.gbdt.validate();
  if (!(blend_fraction > 0.0 && blend_fraction < 1.0) || !(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorKind::Config, "split fractions must lie in (0,1)");
  }
  if (fusion.folds < 3) throw Error(ErrorKind::Config, "fusion.folds must be at least 3");
  if (blend_local != "local" && blend_local != "local_adv") {
    throw Error(ErrorKind::Config, "fusion.local_model must be local or local_adv, got '" + blend_local + "'");
  }
  if (threads < 0) throw Error(ErrorKind::Config, "threads must be >= 0");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.key != key) continue;
    try {
      k.set(config, value);
    } catch (const Error& e) {
      throw Error(ErrorKind::Config, key + ": " + e.detail());
    }
    return;
  }
  throw Error(ErrorKind::Config, "unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  struct Line {
    std::size_t number;
    std::string key, value;
  };
  std::vector<Line> lines;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t number = 0;
  while (std::getline(in, raw)) {
    ++number;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw Error(ErrorKind::Config, where + "expected 'key = value'");
    Line l{number, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (l.key.empty()) throw Error(ErrorKind::Config, where + "missing key");
    if (auto it = seen.find(l.key); it != seen.end()) {
      throw Error(ErrorKind::Config, where + "'" + l.key + "' already set on line " + std::to_string(it->second));
    }
    seen[l.key] = number;
    lines.push_back(std::move(l));
  }
  RunConfig config = RunConfig::preset_config("desk");
  for (const auto& l : lines) {
    if (l.key != "preset") continue;
    try {
      config = RunConfig::preset_config(l.value);
    } catch (const Error& e) {
      throw Error(ErrorKind::Config, source + ":" + std::to_string(l.number) + ": " + e.detail());
    }
  }
  for (const auto& l : lines) {
    if (l.key == "preset") continue;
    try {
      set_config_value(config, l.key, l.value);
    } catch (const Error& e) {
      throw Error(ErrorKind::Config, source + ":" + std::to_string(l.number) + ": " + e.detail());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string describe_config(const RunConfig& config) {
  std::size_t width = 0;
  for (const auto& k : config_keys()) width = std::max(width, k.key.size() + 3 + k.get(config).size());
  std::string out;
  for (const auto& k : config_keys()) {
    std::string line = k.key + " = " + k.get(config);
    line.resize(width, ' ');
    out += line + "  # " + k.help + "\n";
  }
  return out;
}

}  // namespace muse
