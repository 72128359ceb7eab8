#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ffecg/params.hpp"

namespace ffecg {

/// Adaptive-moment optimizer over the trainable entries of one or more
/// parameter sets. Moments are keyed by the entry order captured at
/// construction, which is also the order they are checkpointed in.
template <class T>
class Adam {
 public:
  struct Slot {
    std::string name;
    Var<T> param;
    Tensor<T> m, v;
  };

  Adam() = default;
  Adam(double beta1, double beta2, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void track(ParameterSet<T>& ps, const std::string& prefix = "") {
    for (auto& e : ps.entries())
      if (e.trainable) slots_.push_back({prefix + e.name, e.var, Tensor<T>(e.var.shape()), Tensor<T>(e.var.shape())});
  }

  /// One update with learning rate `lr`. Entries that received no gradient
  /// this step (frozen or unused) are skipped, moments included.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      const auto& g = s.param.grad();
      if (g.empty() || !s.param.requires_grad()) continue;
      auto& p = s.param.mutable_value();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
        const double vi = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
        s.m[i] = static_cast<T>(mi);
        s.v[i] = static_cast<T>(vi);
        const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
        p[i] = static_cast<T>(p[i] - update);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long long t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace ffecg
