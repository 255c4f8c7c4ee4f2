#include "muse/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "muse/error.hpp"
#include "muse/log.hpp"
#include "muse/metrics.hpp"
#include "muse/pipeline.hpp"
#include "muse/simgen.hpp"
#include "muse/training.hpp"

namespace muse {

namespace {

RunConfig ready(const RunConfig& config) {
  RunConfig c = config.resolved();
  c.validate();
  return c;
}

void require_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorKind::Io, "data directory " + dir.string() + " does not exist");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(const char* pattern, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

TrainHooks progress_hooks(const std::string& family, std::function<void(long)> on_checkpoint) {
  TrainHooks hooks;
  hooks.on_step = [family](const TrainLogEntry& e) {
    const std::string line = family + " step " + std::to_string(e.step) + fmt(" lr %.3e", e.lr) + fmt(" loss %.6f", e.loss);
    log_message(e.step % 50 == 0 ? LogLevel::Info : LogLevel::Debug, line);
  };
  hooks.on_checkpoint = std::move(on_checkpoint);
  return hooks;
}

Archive local_archive(const LocalModel& model, const FeatureContext& ctx, const std::set<std::int64_t>& users,
                      const std::string& family, long step) {
  Archive a;
  a.set_meta("family", family);
  a.set_meta("train.step", std::to_string(step));
  model.store(a);
  store_context(a, ctx, users);
  return a;
}

Archive global_archive(const GlobalModel& model, const FeatureContext& ctx, const std::set<std::int64_t>& users,
                       long step) {
  Archive a;
  a.set_meta("family", "global");
  a.set_meta("train.step", std::to_string(step));
  model.store(a);
  store_context(a, ctx, users);
  return a;
}

struct LoadedCheckpoint {
  Archive archive;
  std::string kind;    // "local" or "global"
  std::string family;  // local, local_adv, global
  FeatureContext ctx;
  std::set<std::int64_t> train_users;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::filesystem::path& data_dir) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "checkpoint " + path.string() + " does not exist");
  LoadedCheckpoint c;
  c.archive = read_archive(path);
  c.kind = c.archive.find_meta("model").value_or("");
  if (c.kind != "local" && c.kind != "global") {
    throw Error(ErrorKind::InvalidArgument, path.string() + " is not a local or global model checkpoint");
  }
  c.family = c.archive.find_meta("family").value_or(c.kind);
  c.ctx = load_tables(data_dir);
  load_context(c.archive, c.ctx, c.train_users);
  return c;
}

std::vector<RowPrediction> predict_with(const LoadedCheckpoint& c, std::span<const UserHistory> users, int threads) {
  if (c.kind == "local") return predict_local(LocalModel::load(c.archive), users, c.ctx, threads);
  return predict_global(GlobalModel::load(c.archive), users, c.ctx, threads);
}

void check_disjoint(const std::set<std::int64_t>& train_users, std::span<const UserHistory> users, const std::string& what) {
  for (const auto& h : users) {
    if (train_users.count(h.user_id)) {
      throw Error(ErrorKind::Provenance, what + " user " + std::to_string(h.user_id) + " was used to train the checkpoint");
    }
  }
}

EvalReport report_of(const std::vector<RowPrediction>& preds) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& r : preds) {
    if (r.label < 0) continue;
    s.push_back(r.p);
    l.push_back(r.label);
  }
  return evaluate(s, l);
}

std::vector<BlendRow> blend_rows(const std::vector<RowPrediction>& local, const std::vector<RowPrediction>& global) {
  if (local.size() != global.size()) throw Error(ErrorKind::ShapeMismatch, "component predictions differ in length");
  std::vector<BlendRow> rows;
  for (std::size_t i = 0; i < local.size(); ++i) {
    if (local[i].row_id != global[i].row_id) throw Error(ErrorKind::ShapeMismatch, "component predictions are misaligned");
    if (local[i].label < 0) continue;
    BlendRow r;
    r.row_id = local[i].row_id;
    r.user_id = local[i].user_id;
    r.p_local = local[i].p;
    r.p_global = global[i].p;
    r.label = local[i].label;
    r.extra.assign(local[i].global.begin(), local[i].global.end());
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<double> blender_features(const BlendRow& r, bool use_extra) {
  std::vector<double> x{r.p_local, r.p_global};
  if (use_extra) x.insert(x.end(), r.extra.begin(), r.extra.end());
  return x;
}

}  // namespace

std::filesystem::path checkpoint_dir(const RunConfig& config) { return config.out_dir / "checkpoints"; }

double cmd_generate(const RunConfig& config) {
  const RunConfig c = ready(config);
  const SimDataset data = generate(c.sim);
  write_dataset(c.data_dir, data);
  const double auc = oracle_auc(data.truth, data.rows);
  log_info("generated " + std::to_string(data.rows.size()) + " rows into " + c.data_dir.string() +
           fmt(", oracle AUC %.10f", auc));
  return auc;
}

std::filesystem::path cmd_train(const RunConfig& config, const std::string& model) {
  const RunConfig c = ready(config);
  if (model != "local" && model != "global") {
    throw Error(ErrorKind::InvalidArgument, "model must be local or global, got '" + model + "'");
  }
  require_dir(c.data_dir);
  const PreparedData data = prepare_data(c.data_dir, c.blend_fraction, c.test_fraction);
  const auto dir = checkpoint_dir(c);
  std::filesystem::path last;
  std::vector<TrainLogEntry> log;
  if (model == "local") {
    LocalModel m(c.local.with_vocab(data.ctx), c.seed);
    const auto frames = local_training_frames(data.split.train, data.ctx, c.local.window);
    log_info("local: " + std::to_string(frames.size()) + " frames from " + std::to_string(data.split.train.size()) +
             " users");
    auto hooks = progress_hooks("local", [&](long step) {
      last = write_checkpoint(dir, "local", step, local_archive(m, data.ctx, data.split.train_users, "local", step));
    });
    log = train_local(m, frames, c.train_local, hooks);
  } else {
    GlobalModel m(c.global.with_vocab(data.ctx), c.seed ^ 0x676cULL);
    const auto seqs = global_training_sequences(data.split.train, data.ctx);
    log_info("global: " + std::to_string(seqs.size()) + " user sequences");
    auto hooks = progress_hooks("global", [&](long step) {
      last = write_checkpoint(dir, "global", step, global_archive(m, data.ctx, data.split.train_users, step));
    });
    log = train_global(m, seqs, c.train_global, hooks);
  }
  write_train_log(c.out_dir / (model + ".train_log.csv"), log);
  log_info(model + ": wrote " + last.string());
  return last;
}

std::filesystem::path cmd_finetune_adv(const RunConfig& config, const std::optional<std::filesystem::path>& checkpoint) {
  const RunConfig c = ready(config);
  require_dir(c.data_dir);
  const auto dir = checkpoint_dir(c);
  const auto start = checkpoint ? *checkpoint : latest_checkpoint(dir, "local");
  const LoadedCheckpoint base = load_checkpoint(start, c.data_dir);
  if (base.kind != "local") throw Error(ErrorKind::InvalidArgument, start.string() + " is not a local model checkpoint");
  LocalModel m = LocalModel::load(base.archive);
  const PreparedData data = prepare_data(c.data_dir, c.blend_fraction, c.test_fraction);
  if (data.split.train_users != base.train_users) {
    throw Error(ErrorKind::Provenance, start.string() + " was trained on a different user split than the current config");
  }
  const auto frames = local_training_frames(data.split.train, base.ctx, m.config().window);
  std::filesystem::path last;
  auto hooks = progress_hooks("local_adv", [&](long step) {
    last = write_checkpoint(dir, "local_adv", step, local_archive(m, base.ctx, base.train_users, "local_adv", step));
  });
  const AdversarialResult r = adversarial_finetune(m, frames, c.train_local, c.train_local.adv_extra_steps, hooks);
  write_train_log(c.out_dir / "local_adv.train_log.csv", r.log);
  std::string stats = "step,clean_loss,ascent_loss,max_delta_norm\n";
  for (std::size_t i = 0; i < r.batches.size(); ++i) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", i + 1, r.batches[i].clean_loss, r.batches[i].ascent_loss,
                  r.batches[i].max_delta_norm);
    stats += buf;
  }
  write_text(c.out_dir / "local_adv.batches.csv", stats);
  log_info("local_adv: wrote " + last.string());
  return last;
}

BlendOutcome cmd_blend(const RunConfig& config, const std::optional<std::filesystem::path>& local_checkpoint,
                       const std::optional<std::filesystem::path>& global_checkpoint) {
  const RunConfig c = ready(config);
  require_dir(c.data_dir);
  const auto dir = checkpoint_dir(c);
  const LoadedCheckpoint local =
      load_checkpoint(local_checkpoint ? *local_checkpoint : latest_checkpoint(dir, c.blend_local), c.data_dir);
  const LoadedCheckpoint global =
      load_checkpoint(global_checkpoint ? *global_checkpoint : latest_checkpoint(dir, "global"), c.data_dir);
  if (local.kind != "local" || global.kind != "global") {
    throw Error(ErrorKind::InvalidArgument, "blend needs one local and one global checkpoint");
  }
  const auto rows = parse_interactions(c.data_dir / "interactions.csv");
  const DataSplit split = split_users(rows, c.blend_fraction, c.test_fraction);
  std::set<std::int64_t> component_users = local.train_users;
  component_users.insert(global.train_users.begin(), global.train_users.end());

  const auto pl = predict_with(local, split.blend, c.threads);
  const auto pg = predict_with(global, split.blend, c.threads);
  const auto brows = blend_rows(pl, pg);
  BlendOutcome out;
  out.fusion = run_fusion(brows, component_users, c.fusion);

  for (std::size_t f = 0; f < out.fusion.blenders.size(); ++f) {
    write_text(c.out_dir / ("blender.fold" + std::to_string(f) + ".txt"), dump_blender(out.fusion.blenders[f]));
  }
  const int width = 2 + (c.fusion.use_extra ? kGlobalFeatureCount : 0);
  BlendMatrix train{width, {}, {}}, valid{width, {}, {}};
  for (std::size_t i = 0; i < brows.size(); ++i) {
    (out.fusion.fold[i] == 0 ? valid : train).push(blender_features(brows[i], c.fusion.use_extra), brows[i].label);
  }
  const BlenderModel final_blender = fit_gbdt(train, valid, c.fusion.gbdt);
  std::string dump = dump_blender(final_blender);
  dump += "use_extra " + std::string(c.fusion.use_extra ? "1" : "0") + "\n";
  write_text(c.out_dir / "blender.txt", dump);
  write_fused_predictions(c.out_dir / "fused_predictions.csv", brows, out.fusion.fused);

  std::string report = "blend.rows = " + std::to_string(brows.size()) + "\n";
  report += fmt("blend.auc_local = %.10f\n", out.fusion.auc_local);
  report += fmt("blend.auc_global = %.10f\n", out.fusion.auc_global);
  report += fmt("blend.auc_fused = %.10f\n", out.fusion.auc_fused);
  report += fmt("blend.gain = %.10f\n", out.fusion.auc_fused - std::max(out.fusion.auc_local, out.fusion.auc_global));
  write_text(c.out_dir / "blend_report.txt", report);
  out.report = report;
  log_info("blend: fused AUC " + fmt("%.6f", out.fusion.auc_fused) + " over " + std::to_string(brows.size()) + " rows");
  return out;
}

std::string cmd_evaluate(const RunConfig& config, const std::vector<std::filesystem::path>& checkpoints) {
  const RunConfig c = ready(config);
  require_dir(c.data_dir);
  const auto dir = checkpoint_dir(c);
  std::vector<std::filesystem::path> paths = checkpoints;
  const bool defaults = paths.empty();
  if (defaults) {
    paths.push_back(latest_checkpoint(dir, c.blend_local));
    paths.push_back(latest_checkpoint(dir, "global"));
  }
  const auto rows = parse_interactions(c.data_dir / "interactions.csv");
  const DataSplit split = split_users(rows, c.blend_fraction, c.test_fraction);

  std::string report = "test.users = " + std::to_string(split.test.size()) + "\n";
  const auto truth_path = c.data_dir / "truth.csv";
  if (std::filesystem::exists(truth_path)) {
    const auto truth = parse_truth(truth_path);
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& h : split.test) {
      for (const auto& r : h.rows) {
        if (!r.is_question() || !r.answered_correctly) continue;
        auto it = truth.find(r.row_id);
        if (it == truth.end()) continue;
        s.push_back(it->second);
        l.push_back(*r.answered_correctly);
      }
    }
    if (!s.empty()) report += fmt("test.oracle_auc = %.10f\n", roc_auc(s, l));
  }
  std::vector<RowPrediction> local_preds, global_preds;
  for (const auto& p : paths) {
    const LoadedCheckpoint ck = load_checkpoint(p, c.data_dir);
    check_disjoint(ck.train_users, split.test, "test");
    const auto preds = predict_with(ck, split.test, c.threads);
    report += format_report(report_of(preds), ck.family + ".");
    if (ck.kind == "local" && local_preds.empty()) local_preds = preds;
    if (ck.kind == "global" && global_preds.empty()) global_preds = preds;
  }
  const auto blender_path = c.out_dir / "blender.txt";
  if (defaults && std::filesystem::exists(blender_path)) {
    const std::string text = read_text(blender_path);
    const BlenderModel blender = parse_blender(text);
    const bool use_extra = text.find("use_extra 1") != std::string::npos;
    const auto brows = blend_rows(local_preds, global_preds);
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& r : brows) {
      s.push_back(blender.predict(blender_features(r, use_extra)));
      l.push_back(r.label);
    }
    report += format_report(evaluate(s, l), "fused.");
  }
  write_text(c.out_dir / "eval_report.txt", report);
  return report;
}

void cmd_predict(const RunConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                 const std::filesystem::path& output) {
  const RunConfig c = ready(config);
  require_dir(c.data_dir);
  const LoadedCheckpoint ck = load_checkpoint(checkpoint, c.data_dir);
  const auto rows = parse_interactions(input);
  std::vector<UserHistory> users;
  for (auto& [id, h] : group_by_user(rows)) users.push_back(std::move(h));
  auto preds = predict_with(ck, users, c.threads);
  std::sort(preds.begin(), preds.end(), [](const RowPrediction& a, const RowPrediction& b) { return a.row_id < b.row_id; });
  std::string text = "row_id,p\n";
  char buf[64];
  for (const auto& p : preds) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g\n", static_cast<long long>(p.row_id), p.p);
    text += buf;
  }
  write_text(output, text);
  log_info("predict: " + std::to_string(preds.size()) + " rows written to " + output.string());
}

}  // namespace muse
