#pragma once

// Optimization loops: AdamW with a Noam schedule and random answer masking
// for the local model, embedding-space adversarial fine-tuning, and
// truncated-BPTT Adam for the global model.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "muse/features.hpp"
#include "muse/muse_global.hpp"
#include "muse/muse_local.hpp"
#include "muse/numcore.hpp"

namespace muse {

struct TrainConfig {
  double lr_base = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.001;
  int batch = 2048;
  int warmup = 8000;
  int epochs = 3;
  double ram_ratio = 0.25;
  double clip_norm = 1.0;  // <= 0 disables clipping
  // Adversarial fine-tuning.
  int adv_ascent_steps = 3;
  double adv_step_size = 0.01;
  double adv_epsilon = 0.3;
  int adv_extra_steps = 10000;
  double adv_lr = 1e-4;
  std::uint64_t seed = 0;
  int threads = 1;
  int checkpoint_every = 0;  // optimizer steps between checkpoints, 0 = none

  static TrainConfig desk();
  void validate() const;
};

struct TrainLogEntry {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_step;
  // Called every checkpoint_every steps and after the last step.
  std::function<void(long step)> on_checkpoint;
};

// "{model}.{step}.ckpt"
std::string checkpoint_name(const std::string& model, long step);
void write_train_log(const std::filesystem::path& path, std::span<const TrainLogEntry> log);

// Peak-normalized Noam schedule: lr_base * raw(step) / raw(warmup) with
// raw(s) = d_model^-0.5 * min(s^-0.5, s * warmup^-1.5). Throws for step < 1.
double noam_lr(long step, long warmup, int d_model, double lr_base);

struct AdamState {
  std::vector<nc::Tensor> m, v;
  long step = 0;
  explicit AdamState(const nc::ParamStore& params);
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Bias-corrected Adam with decoupled weight decay:
// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
void adamw_update(nc::ParamStore& params, const nc::GradBuffer& grads, AdamState& state, double lr,
                  const AdamSettings& settings);

// Scales grads so their global norm is at most max_norm; returns the norm
// before clipping.
double clip_gradients(nc::GradBuffer& grads, double max_norm);

struct RamResult {
  LocalFeatureFrame frame;
  std::vector<std::size_t> masked;
};

// Each valid slot whose response token is a real outcome is replaced by
// kMask with probability `ratio`. Exercise stream, labels and validity are
// left alone.
RamResult apply_ram(const LocalFeatureFrame& frame, double ratio, nc::Rng& rng);

std::vector<TrainLogEntry> train_local(LocalModel& model, std::span<const LocalFeatureFrame> frames,
                                       const TrainConfig& config, const TrainHooks& hooks = {});

struct AdversarialBatchStats {
  double clean_loss = 0.0;   // mean loss at delta = 0
  double ascent_loss = 0.0;  // mean loss at the last ascent point
  double max_delta_norm = 0.0;
};

struct AdversarialResult {
  std::vector<TrainLogEntry> log;
  std::vector<AdversarialBatchStats> batches;
};

// FreeLB-style: per frame, delta over the three embedded streams starts at 0;
// K times the loss at embeddings + delta adds its parameter gradient, then
// delta ascends by step * g / ||g|| and is projected onto ||delta|| <= eps.
// The K accumulated gradients are averaged for one AdamW step at adv_lr.
AdversarialResult adversarial_finetune(LocalModel& model, std::span<const LocalFeatureFrame> frames,
                                       const TrainConfig& config, long steps, const TrainHooks& hooks = {});

// Global model: users are batched, each user's steps are cut into segments
// of config.segment with the hidden state carried (as a constant) across
// segments. Constant learning rate, no weight decay unless configured.
std::vector<TrainLogEntry> train_global(GlobalModel& model, std::span<const std::vector<StepFeatures>> sequences,
                                        const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace muse
