#include "muse/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "muse/error.hpp"

namespace muse {

namespace {

constexpr const char* kMagic = "MUSE-ARCHIVE 1";

void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
    throw Error(ErrorKind::InvalidArgument, std::string(what) + " '" + s + "' must be a non-empty single token");
  }
}

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

}  // namespace

void Archive::set_meta(const std::string& key, const std::string& value) {
  check_token(key, "metadata key");
  if (value.find_first_of("\r\n") != std::string::npos) {
    throw Error(ErrorKind::InvalidArgument, "metadata value for " + key + " spans lines");
  }
  for (auto& [k, v] : meta_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  meta_.emplace_back(key, value);
}

std::optional<std::string> Archive::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta_)
    if (k == key) return v;
  return std::nullopt;
}

const std::string& Archive::meta(const std::string& key) const {
  for (const auto& [k, v] : meta_)
    if (k == key) return v;
  throw Error(ErrorKind::InvalidArgument, "archive has no metadata key " + key);
}

void Archive::put(const std::string& name, nc::Tensor tensor) {
  check_token(name, "tensor name");
  for (auto& [n, t] : tensors_) {
    if (n == name) {
      t = std::move(tensor);
      return;
    }
  }
  tensors_.emplace_back(name, std::move(tensor));
}

bool Archive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const nc::Tensor& Archive::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw Error(ErrorKind::InvalidArgument, "archive has no tensor " + name);
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << kMagic << '\n';
  for (const auto& [k, v] : archive.all_meta()) out << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, t] : archive.tensors()) {
    out << "tensor " << name << " f64 " << t.rank();
    for (auto d : t.shape()) out << ' ' << d;
    out << '\n';
  }
  out << "end\n";
  for (const auto& [name, t] : archive.tensors()) {
    for (double v : t.values()) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      out.write(buf, 8);
    }
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMagic) throw Error(ErrorKind::MalformedRow, path.string() + ": not a MUSE archive");
  Archive archive;
  std::vector<std::pair<std::string, nc::Shape>> layout;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "end") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      archive.set_meta(key, value);
    } else if (kind == "tensor") {
      std::string name, dtype;
      std::size_t rank = 0;
      ls >> name >> dtype >> rank;
      if (!ls || dtype != "f64") {
        throw Error(ErrorKind::MalformedRow, path.string() + " line " + std::to_string(line_no) + ": bad tensor entry");
      }
      nc::Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (!ls) throw Error(ErrorKind::MalformedRow, path.string() + " line " + std::to_string(line_no) + ": bad shape");
      layout.emplace_back(name, shape);
    } else {
      throw Error(ErrorKind::MalformedRow, path.string() + " line " + std::to_string(line_no) + ": unknown entry");
    }
  }
  if (line != "end") throw Error(ErrorKind::MalformedRow, path.string() + ": manifest not terminated");
  for (auto& [name, shape] : layout) {
    nc::Tensor t(shape);
    for (auto& v : t.values()) {
      char buf[8];
      if (!in.read(buf, 8)) throw Error(ErrorKind::MalformedRow, path.string() + ": truncated buffer for " + name);
      std::uint64_t bits;
      std::memcpy(&bits, buf, 8);
      v = std::bit_cast<double>(to_little(bits));
    }
    archive.put(name, std::move(t));
  }
  return archive;
}

void store_params(Archive& archive, const nc::ParamStore& params) {
  for (const auto& p : params) archive.put("param." + p.name, p.value);
}

void load_params(const Archive& archive, nc::ParamStore& params) {
  for (auto& p : params) {
    const nc::Tensor& t = archive.tensor("param." + p.name);
    if (!t.same_shape(p.value)) {
      throw Error(ErrorKind::ShapeMismatch, "checkpoint parameter " + p.name + " has shape " +
                                                nc::shape_string(t.shape()) + ", model expects " +
                                                nc::shape_string(p.value.shape()));
    }
    p.value = t;
  }
}

}  // namespace muse
