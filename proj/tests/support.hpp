#pragma once

// Shared test helpers: random tensors, central-difference gradient checks,
// scratch directories.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ffecg/autograd.hpp"
#include "ffecg/params.hpp"
#include "ffecg/rng.hpp"
#include "ffecg/tensor.hpp"

namespace testing_support {

using ffecg::Rng;
using ffecg::Shape;
using ffecg::Tensor;
using ffecg::Var;

template <class T = double>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// sum(x * r) for a fixed tensor r: a scalar whose gradient is r itself, used
// to reduce op outputs for gradient checks.
template <class T>
Var<T> project(const Var<T>& x, const Tensor<T>& r) {
  T s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s += x.value()[i] * r[i];
  return Var<T>::make(Tensor<T>(Shape{1}, s), {x}, [r](ffecg::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r.size(); ++i) g[i] += self.grad[0] * r[i];
  });
}

struct GradReport {
  double max_abs_diff = 0.0;
  double max_ref = 0.0;
  int checked = 0;
  // Floor keeps tiny gradients from turning round-off into a large ratio. An
  // input whose analytic gradient vanishes up to round-off (a bias feeding an
  // instance norm) gets a larger floor: the check then bounds the numeric
  // derivative by 1e-6 in absolute terms.
  double floor = 1e-6;
  double relative() const { return max_abs_diff / std::max(max_ref, floor); }
};

// Compares the analytic gradient of `loss()` with respect to every Var in
// `inputs` against central differences with step `h`. At most `per_input`
// coordinates of each input are probed (spread evenly). The error is
// reported relative to the largest numeric derivative of the input.
inline GradReport check_gradients(const std::function<Var<double>()>& loss, std::vector<Var<double>> inputs,
                                  double h = 1e-4, int per_input = 1 << 30) {
  for (auto& v : inputs) {
    v.set_requires_grad(true);
    v.zero_grad();
  }
  Var<double> out = loss();
  ffecg::backward(out);
  std::vector<Tensor<double>> analytic;
  for (auto& v : inputs) analytic.push_back(v.grad().empty() ? Tensor<double>(v.shape()) : v.grad());

  GradReport worst;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& data = inputs[k].mutable_value().vec();
    const int n = static_cast<int>(data.size());
    const int stride = std::max(1, n / std::min(n, per_input));
    GradReport rep;
    const auto& av = analytic[k].vec();
    if (std::all_of(av.begin(), av.end(), [](double v) { return std::abs(v) <= 1e-9; })) rep.floor = 1e-3;
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < n; i += stride) {
      const double saved = data[static_cast<std::size_t>(i)];
      double fp, fm;
      {
        ffecg::NoGradGuard g;
        data[static_cast<std::size_t>(i)] = saved + h;
        fp = loss().item();
        data[static_cast<std::size_t>(i)] = saved - h;
        fm = loss().item();
      }
      data[static_cast<std::size_t>(i)] = saved;
      const double numeric = (fp - fm) / (2 * h);
      pairs.emplace_back(analytic[k].vec()[static_cast<std::size_t>(i)], numeric);
      rep.max_ref = std::max(rep.max_ref, std::abs(numeric));
      ++rep.checked;
    }
    for (auto [a, num] : pairs) rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(a - num));
    if (rep.relative() > worst.relative() || worst.checked == 0) {
      const int total = worst.checked + rep.checked;
      worst = rep;
      worst.checked = total;
    } else {
      worst.checked += rep.checked;
    }
  }
  return worst;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ffecg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Byte-for-byte comparison of two directory trees.
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  };
  for (const auto& rel : fa)
    if (slurp(a / rel) != slurp(b / rel)) return false;
  return true;
}

}  // namespace testing_support
