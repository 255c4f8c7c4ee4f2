#pragma once

// Unlimited-window recurrent model: a stack of unidirectional GRUs over
// per-question step vectors. A user's hidden states plus running statistics
// are all that streaming inference needs to carry.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "muse/archive.hpp"
#include "muse/features.hpp"
#include "muse/numcore.hpp"

namespace muse {

struct GlobalConfig {
  int hidden = 256;
  int layers = 2;
  double dropout = 0.1;  // between GRU layers, training only
  int emb_dim = 64;      // width of each categorical/continuous feature embedding
  int segment = 512;     // truncated backprop length
  int content_vocab = 1;
  int tag_vocab = 1;

  static GlobalConfig desk();
  void validate() const;
  GlobalConfig with_vocab(const FeatureContext& ctx) const;

  void store(Archive& archive) const;
  static GlobalConfig load(const Archive& archive);
  bool operator==(const GlobalConfig&) const = default;
};

struct UserStreamState {
  std::vector<nc::Tensor> hidden;  // one [hidden] vector per layer
  RunningUserStats stats;
  bool operator==(const UserStreamState&) const = default;
};

// Snapshot layout: archive with tensors state.h.<layer>, stats.counts,
// stats.attempts ([n,2] content/count pairs) and stats.* metadata.
void save_state(const std::filesystem::path& path, const UserStreamState& state);
UserStreamState load_state(const std::filesystem::path& path);

struct GlobalSequence {
  nc::Var prob;  // [T]
  nc::Var loss;  // summed BCE over labelled steps (invalid when none)
  std::size_t n_targets = 0;
  std::vector<nc::Var> final_state;  // per layer, [hidden]
};

class GlobalModel {
 public:
  GlobalModel(const GlobalConfig& config, std::uint64_t seed);

  const GlobalConfig& config() const noexcept { return config_; }
  nc::ParamStore& params() noexcept { return params_; }
  const nc::ParamStore& params() const noexcept { return params_; }

  // Step inputs projected to the GRU width, [T, hidden].
  nc::Var embed_steps(nc::Graph& g, std::span<const StepFeatures> steps) const;

  // Whole-sequence graph from the given per-layer initial states (empty means
  // zeros). Dropout between layers is active when dropout_rng is set.
  GlobalSequence forward_steps(nc::Graph& g, std::span<const StepFeatures> steps,
                               const std::vector<nc::Tensor>& initial = {}, nc::Rng* dropout_rng = nullptr) const;

  // Probability for every question row of the history, in order.
  std::vector<double> forward_sequence(const UserHistory& history, const FeatureContext& ctx) const;

  UserStreamState initial_state() const;
  // Advances the GRU stack by one question and returns its probability.
  double step(UserStreamState& state, const StepFeatures& input) const;
  // Streams one raw row: a question yields a probability, a lecture only
  // updates the statistics. Throws OrderingViolation on an out-of-order row.
  std::optional<double> observe(UserStreamState& state, const FeatureContext& ctx, const InteractionRow& row) const;

  void store(Archive& archive) const;
  static GlobalModel load(const Archive& archive);

 private:
  GlobalConfig config_;
  nc::ParamStore params_;
};

}  // namespace muse
