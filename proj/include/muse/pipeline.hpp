#pragma once

// Data preparation, frame construction, batch prediction and checkpoint
// bookkeeping shared by the command-line commands and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "muse/archive.hpp"
#include "muse/datamodel.hpp"
#include "muse/features.hpp"
#include "muse/muse_global.hpp"
#include "muse/muse_local.hpp"

namespace muse {

struct DataSplit {
  std::vector<UserHistory> train, blend, test;
  std::set<std::int64_t> train_users;
};

// The blend split takes the users whose first row lies in the final
// blend_fraction of the file; the test split does the same on what remains.
// Every user lands wholly in one split.
DataSplit split_users(const std::vector<InteractionRow>& rows, double blend_fraction, double test_fraction);

struct PreparedData {
  FeatureContext ctx;  // statistics from the train split only
  DataSplit split;
};

// Reads interactions/questions/lectures from data_dir.
PreparedData prepare_data(const std::filesystem::path& data_dir, double blend_fraction, double test_fraction);
FeatureContext load_tables(const std::filesystem::path& data_dir);

// Non-overlapping frames ending at each user's last question, then W, 2W, ...
// questions earlier.
std::vector<LocalFeatureFrame> local_training_frames(std::span<const UserHistory> users, const FeatureContext& ctx,
                                                     int window);
std::vector<std::vector<StepFeatures>> global_training_sequences(std::span<const UserHistory> users,
                                                                 const FeatureContext& ctx);

struct RowPrediction {
  std::int64_t row_id = 0;
  std::int64_t user_id = 0;
  double p = 0.5;
  int label = -1;
  GlobalArray global{};
};

// One prediction per question row, in user then chronological order. The
// local model scores rows with sliding frames of stride W/2, so every row
// after the first frame sees at least W/2 earlier questions.
std::vector<RowPrediction> predict_local(const LocalModel& model, std::span<const UserHistory> users,
                                         const FeatureContext& ctx, int threads);
std::vector<RowPrediction> predict_global(const GlobalModel& model, std::span<const UserHistory> users,
                                          const FeatureContext& ctx, int threads);

// Context statistics and the set of training users travel with every
// checkpoint so evaluation never needs the training split.
void store_context(Archive& archive, const FeatureContext& ctx, const std::set<std::int64_t>& train_users);
void load_context(const Archive& archive, FeatureContext& ctx, std::set<std::int64_t>& train_users);

// "<family>.<step>.ckpt" plus a "<family>.latest" file naming it.
std::filesystem::path write_checkpoint(const std::filesystem::path& dir, const std::string& family, long step,
                                       const Archive& archive);
// Throws Io naming the missing path.
std::filesystem::path latest_checkpoint(const std::filesystem::path& dir, const std::string& family);

std::string format_user_ranges(const std::set<std::int64_t>& users);
std::set<std::int64_t> parse_user_ranges(const std::string& text);

}  // namespace muse
