#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ffecg/autograd.hpp"
#include "ffecg/rng.hpp"

namespace ffecg {

/// Ordered collection of named leaf tensors. Trainable entries are optimized;
/// non-trainable entries are buffers (batch-norm running statistics).
template <class T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable = true;
  };

  Var<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("params", "duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>(std::move(init), trainable), trainable});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Var<T>& at(const std::string& name) { return entries_[lookup(name)].var; }
  const Var<T>& at(const std::string& name) const { return entries_[lookup(name)].var; }

  // Mutable value of a buffer or parameter.
  Tensor<T>& value(const std::string& name) { return at(name).mutable_value(); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t numel(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable || !trainable_only) n += e.var.value().size();
    return n;
  }

  /// Enables or disables gradient recording for trainable entries whose name
  /// starts with `prefix` (all of them for an empty prefix).
  void set_requires_grad(bool on, const std::string& prefix = "") {
    for (auto& e : entries_)
      if (e.trainable && e.name.rfind(prefix, 0) == 0) e.var.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  /// Deep copy with fresh graph nodes.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& e : entries_) {
      auto& v = out.add(e.name, e.var.value(), e.trainable);
      v.set_requires_grad(e.var.requires_grad());
    }
    return out;
  }

  /// Copy values of every entry in `src` whose name, after stripping
  /// `src_prefix` and prepending `dst_prefix`, names an entry here.
  /// Returns the number of entries copied.
  std::size_t copy_from(const ParameterSet& src, const std::string& src_prefix = "", const std::string& dst_prefix = "") {
    std::size_t copied = 0;
    for (const auto& e : src.entries_) {
      if (e.name.rfind(src_prefix, 0) != 0) continue;
      const std::string dst = dst_prefix + e.name.substr(src_prefix.size());
      if (!contains(dst)) continue;
      auto& target = value(dst);
      if (target.shape() != e.var.value().shape())
        throw ShapeError("params", "shape mismatch copying '" + e.name + "' into '" + dst + "'");
      target = e.var.value();
      ++copied;
    }
    return copied;
  }

  /// Order-sensitive FNV-1a digest over names and raw value bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& e : entries_) {
      mix(e.name.data(), e.name.size());
      mix(e.var.value().data(), e.var.value().size() * sizeof(T));
    }
    return h;
  }

  void for_each(const std::function<void(Entry&)>& fn) {
    for (auto& e : entries_) fn(e);
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("params", "unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace init {

constexpr double kConvStd = 0.02;

template <class T>
Tensor<T> normal(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

template <class T>
void conv(ParameterSet<T>& ps, const std::string& name, int cout, int cin, int k, bool bias, Rng& rng) {
  ps.add(name + ".w", normal<T>(Shape{cout, cin, k, k}, rng, 0.0, kConvStd));
  if (bias) ps.add(name + ".b", Tensor<T>(Shape{cout}));
}

template <class T>
void conv_transpose(ParameterSet<T>& ps, const std::string& name, int cin, int cout, int k, bool bias, Rng& rng) {
  ps.add(name + ".w", normal<T>(Shape{cin, cout, k, k}, rng, 0.0, kConvStd));
  if (bias) ps.add(name + ".b", Tensor<T>(Shape{cout}));
}

template <class T>
void depthwise(ParameterSet<T>& ps, const std::string& name, int channels, int k, Rng& rng) {
  ps.add(name + ".w", normal<T>(Shape{channels, 1, k, k}, rng, 0.0, kConvStd));
}

template <class T>
void batch_norm(ParameterSet<T>& ps, const std::string& name, int channels, Rng& rng) {
  ps.add(name + ".gamma", normal<T>(Shape{channels}, rng, 1.0, kConvStd));
  ps.add(name + ".beta", Tensor<T>(Shape{channels}));
  ps.add(name + ".running_mean", Tensor<T>(Shape{channels}), false);
  ps.add(name + ".running_var", Tensor<T>(Shape{channels}, T(1)), false);
}

template <class T>
void prelu(ParameterSet<T>& ps, const std::string& name, int channels) {
  ps.add(name + ".alpha", Tensor<T>(Shape{channels}, T(0.25)));
}

}  // namespace init
}  // namespace ffecg
