#pragma once

// Out-of-fold stacking of component probabilities with a small
// gradient-boosted tree ensemble on logistic loss.

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace muse {

struct GbdtConfig {
  double learning_rate = 0.1;
  int max_leaves = 31;
  int max_depth = 6;
  double lambda = 1.0;
  int max_rounds = 1000;
  int early_stopping = 100;
  int min_data_in_leaf = 20;
  std::string stop_metric = "auc";  // validation metric watched by early stopping: auc or logloss

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // x <= threshold goes left
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf increment before the learning rate
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  double predict(std::span<const double> x) const;
  int depth() const;
};

struct BlenderModel {
  double base_score = 0.0;
  double learning_rate = 0.1;
  int n_features = 0;
  int best_iteration = 0;  // trees [0, best_iteration) are used
  std::vector<RegressionTree> trees;

  double margin(std::span<const double> x) const;
  double predict(std::span<const double> x) const;
};

// Row-major feature table.
struct BlendMatrix {
  int n_features = 0;
  std::vector<double> values;
  std::vector<int> labels;

  std::size_t rows() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * static_cast<std::size_t>(n_features), static_cast<std::size_t>(n_features)};
  }
  void push(std::span<const double> x, int label);
};

// Shuffled near-equal partition into k folds.
std::vector<int> make_folds(std::size_t n, int k, std::uint64_t seed);

// Early stopping watches validation AUC (log loss when the validation
// labels are single-class). A single-class training set yields a tree-less
// model whose base score is the clamped label log-odds.
BlenderModel fit_gbdt(const BlendMatrix& train, const BlendMatrix& valid, const GbdtConfig& config);

double blend_predict(const BlenderModel& model, double p_local, double p_global);

std::string dump_blender(const BlenderModel& model);
BlenderModel parse_blender(const std::string& text);

struct BlendRow {
  std::int64_t row_id = 0;
  std::int64_t user_id = 0;
  double p_local = 0.5;
  double p_global = 0.5;
  int label = 0;
  std::vector<double> extra;  // optional additional blender features
};

struct FusionOptions {
  int folds = 5;
  std::uint64_t seed = 0;
  bool use_extra = false;
  int threads = 1;
  GbdtConfig gbdt;
};

struct FusionResult {
  std::vector<double> fused;  // out-of-fold, aligned with the input rows
  std::vector<int> fold;
  std::vector<int> blender_of_row;  // index of the blender that scored the row
  std::vector<BlenderModel> blenders;  // blender f scores fold f
  double auc_local = 0.0;
  double auc_global = 0.0;
  double auc_fused = 0.0;
};

// Blender f is fitted on every fold except f and (f+1) % k, early-stopped on
// fold (f+1) % k, and predicts fold f. Throws Provenance when a row's user is
// among the users the components were trained on, or when a blender saw the
// fold it scores.
FusionResult run_fusion(std::span<const BlendRow> rows, const std::set<std::int64_t>& component_train_users,
                        const FusionOptions& options);

void write_fused_predictions(const std::filesystem::path& path, std::span<const BlendRow> rows,
                             std::span<const double> fused);

}  // namespace muse
