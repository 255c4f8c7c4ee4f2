#pragma once

// Windowed encoder-decoder over three embedded streams (exercise, response,
// lecture). The response stream goes through a stack of causal
// self-attention encoders, the exercise stream through decoders that also
// attend to that encoding, and the lecture stream through its own encoders.
// Query-conditioned pooling, a GRU summary and three dense layers produce a
// probability at every slot of the frame.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muse/archive.hpp"
#include "muse/features.hpp"
#include "muse/numcore.hpp"

namespace muse {

struct LocalConfig {
  int d_model = 128;
  int heads = 8;
  int n_user_enc = 3;
  int n_ex_dec = 3;
  int n_lect_enc = 2;
  int window = 200;
  double dropout = 0.0;
  int agg_width = 3;   // each aggregator spans 2w+1 causal taps
  int agg_layers = 2;
  int ffn_mult = 4;
  int pool_hidden = 64;
  int head_hidden1 = 256;
  int head_hidden2 = 64;
  // Vocabulary sizes; fitted to the data by with_vocab().
  int content_vocab = 1;
  int tag_vocab = 1;
  int task_vocab = 1000;

  static LocalConfig desk();
  // Throws Config on an unusable combination.
  void validate() const;
  LocalConfig with_vocab(const FeatureContext& ctx) const;

  void store(Archive& archive) const;
  static LocalConfig load(const Archive& archive);
  bool operator==(const LocalConfig&) const = default;
};

// Additive attention mask: query i sees key j when j <= i and j is valid
// (a padded query still sees itself so its softmax row is defined).
nc::Tensor frame_attention_mask(std::span<const std::uint8_t> valid);

// Causal learned smoothing: out_i = sum over taps t of beta_t X_{i-2w+t},
// beta = softmax(logits) renormalized over taps that are in range and valid.
// Invalid rows pass through unchanged.
nc::Var multi_scale_aggregate(nc::Graph& g, nc::Var x, nc::Var logits, std::span<const std::uint8_t> valid);

struct PoolWeights {
  nc::Var w1;  // [3d, hidden] acting on [S_j ; q ; S_j * q]
  nc::Var b1;  // [hidden]
  nc::Var w2;  // [hidden]
  nc::Var b2;  // [1]
};

// Unnormalized attention pooling sum_j a(S_j, q) S_j over valid steps j with
// a = MLP([S_j ; q ; S_j * q]) (GELU hidden layer, identity output).
// Throws InvalidArgument when no step is valid.
nc::Var attention_pool(nc::Graph& g, nc::Var seq, nc::Var query, std::span<const std::uint8_t> valid,
                       const PoolWeights& w);
// Row k pools seq rows j <= k with query row k. Rows with no valid step in
// range come out as zeros.
nc::Var causal_attention_pool(nc::Graph& g, nc::Var seq, nc::Var queries, std::span<const std::uint8_t> valid,
                              const PoolWeights& w);

struct StreamPerturbation {
  nc::Var ex, resp, lect;  // each [W, d], added after projection and position
};

struct LocalForwardOptions {
  nc::Rng* dropout_rng = nullptr;  // dropout active only when set
  const StreamPerturbation* perturbation = nullptr;
};

struct LocalForward {
  nc::Var prob;               // [W] probability at every slot
  nc::Var loss;               // summed BCE over labelled valid slots
  std::size_t n_targets = 0;  // number of slots contributing to loss
  nc::Var ex, resp, lect;     // embedded streams
};

class LocalModel {
 public:
  LocalModel(const LocalConfig& config, std::uint64_t seed);

  const LocalConfig& config() const noexcept { return config_; }
  nc::ParamStore& params() noexcept { return params_; }
  const nc::ParamStore& params() const noexcept { return params_; }

  // Builds the forward graph for one frame. The loss node is only valid when
  // at least one slot carries a label.
  LocalForward forward(nc::Graph& g, const LocalFeatureFrame& frame, const LocalForwardOptions& options = {}) const;

  // Per-stream embeddings [W, d] (projection plus position, no perturbation).
  struct Streams {
    nc::Var ex, resp, lect;
  };
  Streams embed_streams(nc::Graph& g, const LocalFeatureFrame& frame) const;

  std::vector<double> predict_positions(const LocalFeatureFrame& frame) const;
  // Probability for the question in the last slot.
  double predict(const LocalFeatureFrame& frame) const;

  void store(Archive& archive) const;
  static LocalModel load(const Archive& archive);

 private:
  void check_frame(const LocalFeatureFrame& frame) const;

  LocalConfig config_;
  nc::ParamStore params_;
};

}  // namespace muse
