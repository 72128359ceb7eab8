#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ffecg/ops.hpp"

namespace ffecg {

/// Weights of the cycle (lambda) and pixel-consistency (gamma) terms.
struct LossWeights {
  double lambda_cyc = 1.0;
  double gamma_pc = 10.0;

  void validate() const {
    if (!(lambda_cyc >= 0.0) || !(gamma_pc >= 0.0))
      throw ConfigError("losses", "loss weights must be non-negative");
  }
};

/// Per-step values of every objective term.
struct LossRecord {
  double adv_g = 0, adv_f = 0, d_v = 0, d_n = 0, cyc = 0, pc = 0, total = 0;

  bool all_finite() const {
    for (double v : {adv_g, adv_f, d_v, d_n, cyc, pc, total})
      if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace losses {

namespace detail {
template <class T>
void check_finite(const Tensor<T>& t, const char* what) {
  if (!t.all_finite()) throw NumericError("losses", std::string("non-finite values in ") + what);
}
template <class T>
void check_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError("losses", std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

/// Discriminator side of the least-squares adversarial loss:
/// mean((D(real) - 1)^2) + mean(D(fake)^2).
template <class T>
Var<T> lsgan_discriminator(const Var<T>& real_scores, const Var<T>& fake_scores) {
  detail::check_same(real_scores.value(), fake_scores.value(), "lsgan_discriminator");
  detail::check_finite(real_scores.value(), "real scores");
  detail::check_finite(fake_scores.value(), "fake scores");
  return ops::weighted_sum<T>({ops::mean_squared_to(real_scores, T(1)), ops::mean_squared_to(fake_scores, T(0))},
                              {T(1), T(1)});
}

/// Generator side: mean((D(fake) - 1)^2).
template <class T>
Var<T> lsgan_generator(const Var<T>& fake_scores) {
  detail::check_finite(fake_scores.value(), "fake scores");
  return ops::mean_squared_to(fake_scores, T(1));
}

/// mean|x_rec - x| + mean|y_rec - y|.
template <class T>
Var<T> cycle(const Var<T>& x, const Var<T>& x_rec, const Var<T>& y, const Var<T>& y_rec) {
  detail::check_same(x.value(), x_rec.value(), "cycle_loss (x direction)");
  detail::check_same(y.value(), y_rec.value(), "cycle_loss (y direction)");
  return ops::weighted_sum<T>({ops::mean_abs_diff(x_rec, x), ops::mean_abs_diff(y_rec, y)}, {T(1), T(1)});
}

/// Pixel consistency against the approximately paired partner:
/// mean|G(i_V) - i_N| + mean|F(i_N) - i_V|. Element k of each batch must be
/// the partner of element k of the other; pass pairing keys to have that
/// checked.
template <class T>
Var<T> pixel_consistency(const Var<T>& fake_nir, const Var<T>& paired_nir, const Var<T>& fake_vis,
                         const Var<T>& paired_vis, std::span<const std::string> vis_keys = {},
                         std::span<const std::string> nir_keys = {}) {
  detail::check_same(fake_nir.value(), paired_nir.value(), "pixel_consistency_loss (NIR direction)");
  detail::check_same(fake_vis.value(), paired_vis.value(), "pixel_consistency_loss (VIS direction)");
  if (!vis_keys.empty() || !nir_keys.empty()) {
    const auto n = static_cast<std::size_t>(paired_nir.shape()[0]);
    if (vis_keys.size() != n || nir_keys.size() != n)
      throw ProtocolError("losses", "pixel consistency needs one partner key per batch element");
    for (std::size_t i = 0; i < n; ++i)
      if (vis_keys[i] != nir_keys[i])
        throw ProtocolError("losses", "batch element " + std::to_string(i) + " is unpaired ('" + vis_keys[i] +
                                          "' vs '" + nir_keys[i] + "')");
  }
  return ops::weighted_sum<T>({ops::mean_abs_diff(fake_nir, paired_nir), ops::mean_abs_diff(fake_vis, paired_vis)},
                              {T(1), T(1)});
}

/// adv_g + adv_f + lambda * cyc + gamma * pc over graph terms.
template <class T>
Var<T> total(const Var<T>& adv_g, const Var<T>& adv_f, const Var<T>& cyc, const Var<T>& pc, const LossWeights& w) {
  w.validate();
  return ops::weighted_sum<T>({adv_g, adv_f, cyc, pc},
                              {T(1), T(1), static_cast<T>(w.lambda_cyc), static_cast<T>(w.gamma_pc)});
}

}  // namespace losses

// Value-level entry points over plain tensors.

template <class T>
T lsgan_loss_discriminator(const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
  NoGradGuard g;
  return losses::lsgan_discriminator(Var<T>(real_scores), Var<T>(fake_scores)).item();
}

template <class T>
T lsgan_loss_generator(const Tensor<T>& fake_scores) {
  NoGradGuard g;
  return losses::lsgan_generator(Var<T>(fake_scores)).item();
}

template <class T>
T cycle_loss(const Tensor<T>& x, const Tensor<T>& x_rec, const Tensor<T>& y, const Tensor<T>& y_rec) {
  NoGradGuard g;
  return losses::cycle(Var<T>(x), Var<T>(x_rec), Var<T>(y), Var<T>(y_rec)).item();
}

template <class T>
T pixel_consistency_loss(const Tensor<T>& fake_nir, const Tensor<T>& paired_nir, const Tensor<T>& fake_vis,
                         const Tensor<T>& paired_vis, std::span<const std::string> vis_keys = {},
                         std::span<const std::string> nir_keys = {}) {
  NoGradGuard g;
  return losses::pixel_consistency(Var<T>(fake_nir), Var<T>(paired_nir), Var<T>(fake_vis), Var<T>(paired_vis),
                                   vis_keys, nir_keys)
      .item();
}

/// Weighted objective from already-computed components.
inline double total_objective(double adv_g, double adv_f, double cyc, double pc, const LossWeights& w) {
  w.validate();
  for (double v : {adv_g, adv_f, cyc, pc})
    if (!std::isfinite(v)) throw NumericError("losses", "non-finite loss component");
  return adv_g + adv_f + w.lambda_cyc * cyc + w.gamma_pc * pc;
}

}  // namespace ffecg
