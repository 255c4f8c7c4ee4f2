#pragma once

// Checkpoint archive: a text manifest (metadata key-values plus one line per
// tensor giving name, dtype and shape) followed by the raw little-endian
// IEEE-754 buffers in manifest order. Writing then reading is bit-exact.
//
//   MUSE-ARCHIVE 1
//   meta <key> <value>
//   tensor <name> f64 <rank> <d0> <d1> ...
//   end
//   <bytes>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "muse/numcore.hpp"

namespace muse {

class Archive {
 public:
  void set_meta(const std::string& key, const std::string& value);
  std::optional<std::string> find_meta(const std::string& key) const;
  const std::string& meta(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& all_meta() const { return meta_; }

  void put(const std::string& name, nc::Tensor tensor);
  bool has(const std::string& name) const;
  const nc::Tensor& tensor(const std::string& name) const;
  const std::vector<std::pair<std::string, nc::Tensor>>& tensors() const { return tensors_; }

 private:
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<std::pair<std::string, nc::Tensor>> tensors_;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

// Parameters are stored under "param.<name>".
void store_params(Archive& archive, const nc::ParamStore& params);
// Every parameter of `params` must be present with a matching shape.
void load_params(const Archive& archive, nc::ParamStore& params);

}  // namespace muse
