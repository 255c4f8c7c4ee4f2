// Command-line entry point: muse <generate|train|finetune-adv|blend|evaluate|predict|config> [flags]

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "muse/commands.hpp"
#include "muse/error.hpp"
#include "muse/run_config.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale knowledge tracing: simulate, train, fuse and evaluate."};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out_dir, data_dir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "config file of key = value lines")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--threads", threads, "worker threads, 0 = machine parallelism, 1 = reference mode");
  app.add_option("--out", out_dir, "output directory (overrides out_dir)");
  app.add_option("--data", data_dir, "dataset directory (overrides data_dir)");
  app.add_option("--set", overrides, "override one config key, as key=value (repeatable)");
  app.footer("Config keys and desk defaults:\n" + muse::describe_config(muse::RunConfig::preset_config("desk")) +
             "\nEnvironment: MUSE_LOG=error|warn|info|debug sets log verbosity (default info).");

  auto* generate = app.add_subcommand("generate", "write a simulated dataset to data_dir");
  std::string model;
  auto* train = app.add_subcommand("train", "train the local or global model");
  train->add_option("--model", model, "local or global")->required()->check(CLI::IsMember({"local", "global"}));
  std::string checkpoint;
  auto* adv = app.add_subcommand("finetune-adv", "adversarial fine-tuning of a local checkpoint");
  adv->add_option("--checkpoint", checkpoint, "starting checkpoint (default: latest local)");
  std::string local_ckpt, global_ckpt;
  auto* blend = app.add_subcommand("blend", "out-of-fold fusion on the blend users");
  blend->add_option("--local-checkpoint", local_ckpt, "local checkpoint (default: latest of fusion.local_model)");
  blend->add_option("--global-checkpoint", global_ckpt, "global checkpoint (default: latest global)");
  std::vector<std::string> eval_ckpts;
  auto* evaluate = app.add_subcommand("evaluate", "score checkpoints on the test users");
  evaluate->add_option("--checkpoint", eval_ckpts, "checkpoint(s); default: latest local, global and fused");
  std::string input, output;
  auto* predict = app.add_subcommand("predict", "score every question row of an interactions file");
  predict->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  predict->add_option("--input", input, "interactions file")->required();
  predict->add_option("--output", output, "predictions file (default: <out>/predictions.csv)");
  auto* show = app.add_subcommand("config", "print the resolved configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    muse::RunConfig cfg = config_path.empty() ? muse::RunConfig::preset_config("desk") : muse::load_run_config(config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw muse::Error(muse::ErrorKind::Config, "--set expects key=value, got '" + o + "'");
      muse::set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!data_dir.empty()) cfg.data_dir = data_dir;

    if (*generate) {
      std::printf("oracle_auc = %.10f\n", muse::cmd_generate(cfg));
    } else if (*train) {
      std::printf("checkpoint = %s\n", muse::cmd_train(cfg, model).string().c_str());
    } else if (*adv) {
      std::optional<std::filesystem::path> start;
      if (!checkpoint.empty()) start = checkpoint;
      std::printf("checkpoint = %s\n", muse::cmd_finetune_adv(cfg, start).string().c_str());
    } else if (*blend) {
      std::optional<std::filesystem::path> l, g;
      if (!local_ckpt.empty()) l = local_ckpt;
      if (!global_ckpt.empty()) g = global_ckpt;
      std::fputs(muse::cmd_blend(cfg, l, g).report.c_str(), stdout);
    } else if (*evaluate) {
      std::vector<std::filesystem::path> paths(eval_ckpts.begin(), eval_ckpts.end());
      std::fputs(muse::cmd_evaluate(cfg, paths).c_str(), stdout);
    } else if (*predict) {
      const std::filesystem::path out = output.empty() ? cfg.out_dir / "predictions.csv" : std::filesystem::path(output);
      muse::cmd_predict(cfg, checkpoint, input, out);
    } else if (*show) {
      muse::RunConfig r = cfg.resolved();
      r.validate();
      std::fputs(muse::describe_config(r).c_str(), stdout);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "muse: %s\n", e.what());
    return 1;
  }
  return 0;
}
