#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "ffecg/params.hpp"

namespace ffecg {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host order");

/// Container layout:
///   "FFECG-CKPT\n" <header byte count> "\n" <JSON header> <payload>
/// The header holds `format_version`, caller metadata under "meta" and one
/// entry per tensor (name, shape, dtype, byte offset into the payload).
inline constexpr const char* kCheckpointMagic = "FFECG-CKPT\n";
inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" or "f64"
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

class CheckpointWriter {
 public:
  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    if (!names_.insert(name).second) throw IoError("checkpoint", "duplicate entry '" + name + "'");
    CheckpointEntry e{name, t.shape(), dtype_name<T>(), payload_.size(), t.size() * sizeof(T)};
    const auto* p = reinterpret_cast<const char*>(t.data());
    payload_.insert(payload_.end(), p, p + e.nbytes);
    entries_.push_back(std::move(e));
  }

  template <class T>
  void add_parameters(const std::string& prefix, const ParameterSet<T>& ps) {
    for (const auto& e : ps.entries()) add(prefix + e.name, e.var.value());
  }

  nlohmann::json& meta() { return meta_; }

  /// Writes to a temporary sibling and renames it over `path`.
  void write(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["meta"] = meta_;
    header["entries"] = nlohmann::json::array();
    for (const auto& e : entries_)
      header["entries"].push_back(
          {{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", e.offset}, {"nbytes", e.nbytes}});
    const std::string text = header.dump();
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw IoError("checkpoint", "cannot open '" + tmp.string() + "'");
      os << kCheckpointMagic << text.size() << '\n' << text;
      os.write(payload_.data(), static_cast<std::streamsize>(payload_.size()));
      if (!os) throw IoError("checkpoint", "write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("checkpoint", "cannot rename '" + tmp.string() + "': " + ec.message());
  }

 private:
  nlohmann::json meta_ = nlohmann::json::object();
  std::vector<CheckpointEntry> entries_;
  std::set<std::string> names_;
  std::vector<char> payload_;
};

class Checkpoint {
 public:
  static Checkpoint read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint", "cannot open '" + path.string() + "'");
    std::string magic(std::strlen(kCheckpointMagic), '\0');
    is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kCheckpointMagic) throw IoError("checkpoint", "'" + path.string() + "' is not a checkpoint");
    std::size_t header_len = 0;
    is >> header_len;
    is.get();
    std::string text(header_len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw IoError("checkpoint", "truncated header in '" + path.string() + "'");
    Checkpoint ck;
    try {
      const auto header = nlohmann::json::parse(text);
      ck.version_ = header.at("format_version").get<int>();
      ck.meta_ = header.at("meta");
      for (const auto& j : header.at("entries"))
        ck.entries_.push_back({j.at("name").get<std::string>(), j.at("shape").get<Shape>(), j.at("dtype").get<std::string>(),
                               j.at("offset").get<std::uint64_t>(), j.at("nbytes").get<std::uint64_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError("checkpoint", "malformed header in '" + path.string() + "': " + e.what());
    }
    if (ck.version_ != kCheckpointFormatVersion)
      throw IoError("checkpoint", "unsupported format version " + std::to_string(ck.version_));
    ck.payload_.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    for (std::size_t i = 0; i < ck.entries_.size(); ++i) {
      const auto& e = ck.entries_[i];
      if (e.offset + e.nbytes > ck.payload_.size()) throw IoError("checkpoint", "entry '" + e.name + "' exceeds payload");
      if (!ck.index_.emplace(e.name, i).second) throw IoError("checkpoint", "duplicate entry '" + e.name + "'");
    }
    return ck;
  }

  const nlohmann::json& meta() const { return meta_; }
  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  template <class T>
  Tensor<T> tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint", "missing entry '" + name + "'");
    const auto& e = entries_[it->second];
    if (e.dtype != dtype_name<T>()) throw IoError("checkpoint", "entry '" + name + "' has dtype " + e.dtype);
    Tensor<T> t(e.shape);
    if (t.size() * sizeof(T) != e.nbytes) throw IoError("checkpoint", "entry '" + name + "' size mismatch");
    std::memcpy(t.data(), payload_.data() + e.offset, e.nbytes);
    return t;
  }

  /// Restores every entry of `ps` from `prefix + name`; all must be present
  /// with matching shapes.
  template <class T>
  void load_parameters(const std::string& prefix, ParameterSet<T>& ps) const {
    for (auto& e : ps.entries()) {
      Tensor<T> t = tensor<T>(prefix + e.name);
      if (t.shape() != e.var.value().shape())
        throw IoError("checkpoint", "shape mismatch for '" + prefix + e.name + "': " + shape_str(t.shape()) + " vs " +
                                        shape_str(e.var.value().shape()));
      e.var.mutable_value() = std::move(t);
    }
  }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
    return out;
  }

 private:
  int version_ = 0;
  nlohmann::json meta_;
  std::vector<CheckpointEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::vector<char> payload_;
};

}  // namespace ffecg
