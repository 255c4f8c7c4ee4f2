#pragma once

// The pipeline commands behind the CLI. Every output is a pure function of
// the config, the input files and the seed. Layout under out_dir:
//   checkpoints/<family>.<step>.ckpt, checkpoints/<family>.latest
//   <family>.train_log.csv, local_adv.batches.csv
//   blender.txt, blender.fold<f>.txt, fused_predictions.csv, blend_report.txt
//   eval_report.txt

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "muse/fusion.hpp"
#include "muse/run_config.hpp"

namespace muse {

std::filesystem::path checkpoint_dir(const RunConfig& config);

// Writes the simulated dataset to data_dir; returns its oracle AUC.
double cmd_generate(const RunConfig& config);

// model is "local" or "global"; returns the final checkpoint.
std::filesystem::path cmd_train(const RunConfig& config, const std::string& model);

// Starts from `checkpoint` or the latest local checkpoint.
std::filesystem::path cmd_finetune_adv(const RunConfig& config,
                                       const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

struct BlendOutcome {
  FusionResult fusion;
  std::string report;
};

BlendOutcome cmd_blend(const RunConfig& config, const std::optional<std::filesystem::path>& local_checkpoint = std::nullopt,
                       const std::optional<std::filesystem::path>& global_checkpoint = std::nullopt);

// Evaluates the given checkpoints on the test users; with none given, the
// latest local (fusion.local_model) and global checkpoints plus the fused
// blender when present. Returns the report text, also written to
// eval_report.txt.
std::string cmd_evaluate(const RunConfig& config, const std::vector<std::filesystem::path>& checkpoints = {});

// Scores every question row of `input` (an interactions file) using only the
// rows before it; writes "row_id,p".
void cmd_predict(const RunConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                 const std::filesystem::path& output);

}  // namespace muse
