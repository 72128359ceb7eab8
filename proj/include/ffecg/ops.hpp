#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ffecg/autograd.hpp"

namespace ffecg {

/// Differentiable tensor operations on Var. All image tensors are NCHW.
namespace ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;

// Sequential sum. Eigen's vectorised reductions peel to the first aligned
// element, so their rounding would depend on where the heap put the data.
template <class T>
T plain_sum(const T* p, int n, int stride) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += p[static_cast<std::ptrdiff_t>(i) * stride];
  return s;
}

struct ConvGeom {
  int channels, height, width, kernel, stride, pad, out_h, out_w;
};

// Output columns [lo, hi) whose input column for kernel offset kx is inside the image.
inline std::pair<int, int> valid_columns(const ConvGeom& g, int kx) {
  const int off = kx - g.pad;
  int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  int hi = g.width - 1 - off < 0 ? 0 : (g.width - 1 - off) / g.stride + 1;
  hi = std::min(hi, g.out_w);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// Unfold one (C, H, W) image into (C*k*k, out_h*out_w).
template <class T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const int k = g.kernel;
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        const T* src = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * g.width;
          const auto [lo, hi] = valid_columns(g, kx);
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(line + lo - g.pad + kx, line + hi - g.pad + kx, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = line[ox * g.stride - g.pad + kx];
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
}

// Adjoint of im2col: scatter-add columns back into the (C, H, W) image.
template <class T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const int k = g.kernel;
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        T* dst = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* line = dst + static_cast<std::size_t>(iy) * g.width;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          const auto [lo, hi] = valid_columns(g, kx);
          for (int ox = lo; ox < hi; ++ox) line[ox * g.stride - g.pad + kx] += src[ox];
        }
      }
}

inline int conv_out(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

inline void require(bool ok, const std::string& op, const std::string& msg) {
  if (!ok) throw ShapeError(op, msg);
}

template <class T>
void accumulate(const std::shared_ptr<Node<T>>& node, const Tensor<T>& g) {
  if (!node->requires_grad) return;
  node->grad_buffer() += g;
}

}  // namespace detail

/// 2-D convolution, weight (Cout, Cin, k, k), optional bias (Cout), zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int pad) {
  using namespace detail;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 4, "conv2d", "input must be rank 4, got " + shape_str(xs));
  require(ws.size() == 4 && ws[2] == ws[3], "conv2d", "weight must be (Cout, Cin, k, k), got " + shape_str(ws));
  require(xs[1] == ws[1], "conv2d",
          "channel axis mismatch: input has " + std::to_string(xs[1]) + ", weight expects " + std::to_string(ws[1]));
  const int k = ws[2];
  const ConvGeom g{xs[1], xs[2], xs[3], k, stride, pad, conv_out(xs[2], k, stride, pad), conv_out(xs[3], k, stride, pad)};
  require(g.out_h > 0 && g.out_w > 0, "conv2d", "spatial size " + shape_str(xs) + " too small for kernel");
  const int cout = ws[0];
  const int kdim = g.channels * k * k;
  const int hw = g.out_h * g.out_w;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out(Shape{xs[0], cout, g.out_h, g.out_w});
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * hw);
  CMapM<T> wm(w.value().data(), cout, kdim);
  for (int n = 0; n < xs[0]; ++n) {
    const T* img = x.value().data() + static_cast<std::size_t>(n) * g.channels * g.height * g.width;
    const T* colp = img;
    if (!pointwise) {
      im2col(img, g, col.data());
      colp = col.data();
    }
    MapM<T> om(out.data() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
    om.noalias() = wm * CMapM<T>(colp, kdim, hw);
    if (b)
      for (int c = 0; c < cout; ++c) om.row(c).array() += b->value()[static_cast<std::size_t>(c)];
  }

  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  const bool has_bias = b != nullptr;
  return Var<T>::make(std::move(out), std::move(parents), [g, cout, kdim, hw, pointwise, has_bias](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& wn = self.parents[1];
    const int batch = xn->value.shape()[0];
    const std::size_t in_sz = static_cast<std::size_t>(g.channels) * g.height * g.width;
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * hw);
    std::vector<T> dcol(static_cast<std::size_t>(kdim) * hw);
    CMapM<T> wm(wn->value.data(), cout, kdim);
    for (int n = 0; n < batch; ++n) {
      CMapM<T> gm(self.grad.data() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
      const T* img = xn->value.data() + n * in_sz;
      if (wn->requires_grad) {
        const T* colp = img;
        if (!pointwise) {
          im2col(img, g, col.data());
          colp = col.data();
        }
        MapM<T>(wn->grad_buffer().data(), cout, kdim).noalias() += gm * CMapM<T>(colp, kdim, hw).transpose();
      }
      if (xn->requires_grad) {
        T* dimg = xn->grad_buffer().data() + n * in_sz;
        if (pointwise) {
          MapM<T>(dimg, kdim, hw).noalias() += wm.transpose() * gm;
        } else {
          MapM<T>(dcol.data(), kdim, hw).noalias() = wm.transpose() * gm;
          col2im(dcol.data(), g, dimg);
        }
      }
      if (has_bias && self.parents[2]->requires_grad) {
        auto& bg = self.parents[2]->grad_buffer();
        for (int c = 0; c < cout; ++c) bg[static_cast<std::size_t>(c)] += plain_sum(gm.data() + static_cast<std::size_t>(c) * hw, hw, 1);
      }
    }
  });
}

/// Transposed convolution (fractional stride), weight (Cin, Cout, k, k).
/// Output size (H-1)*stride - 2*pad + k + output_pad.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int pad, int output_pad) {
  using namespace detail;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 4, "conv_transpose2d", "input must be rank 4, got " + shape_str(xs));
  require(ws.size() == 4 && ws[2] == ws[3], "conv_transpose2d", "weight must be (Cin, Cout, k, k)");
  require(xs[1] == ws[0], "conv_transpose2d", "channel axis mismatch: input has " + std::to_string(xs[1]) +
                                                  ", weight expects " + std::to_string(ws[0]));
  require(output_pad < stride, "conv_transpose2d", "output_pad must be < stride");
  const int k = ws[2];
  const int cin = ws[0], cout = ws[1];
  const int oh = (xs[2] - 1) * stride - 2 * pad + k + output_pad;
  const int ow = (xs[3] - 1) * stride - 2 * pad + k + output_pad;
  // Geometry of the forward conv that this op is the adjoint of.
  const ConvGeom g{cout, oh, ow, k, stride, pad, xs[2], xs[3]};
  const int kdim = cout * k * k;
  const int hw = xs[2] * xs[3];
  Tensor<T> out(Shape{xs[0], cout, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(kdim) * hw);
  CMapM<T> wm(w.value().data(), cin, kdim);
  for (int n = 0; n < xs[0]; ++n) {
    MapM<T>(col.data(), kdim, hw).noalias() =
        wm.transpose() * CMapM<T>(x.value().data() + static_cast<std::size_t>(n) * cin * hw, cin, hw);
    T* o = out.data() + static_cast<std::size_t>(n) * cout * oh * ow;
    col2im(col.data(), g, o);
    if (b)
      for (int c = 0; c < cout; ++c) {
        const T bv = b->value()[static_cast<std::size_t>(c)];
        for (int i = 0; i < oh * ow; ++i) o[static_cast<std::size_t>(c) * oh * ow + i] += bv;
      }
  }
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  const bool has_bias = b != nullptr;
  return Var<T>::make(std::move(out), std::move(parents), [g, cin, cout, kdim, hw, has_bias](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& wn = self.parents[1];
    const int batch = xn->value.shape()[0];
    const std::size_t out_sz = static_cast<std::size_t>(cout) * g.height * g.width;
    std::vector<T> col(static_cast<std::size_t>(kdim) * hw);
    CMapM<T> wm(wn->value.data(), cin, kdim);
    for (int n = 0; n < batch; ++n) {
      const T* go = self.grad.data() + n * out_sz;
      im2col(go, g, col.data());
      CMapM<T> cm(col.data(), kdim, hw);
      if (xn->requires_grad)
        MapM<T>(xn->grad_buffer().data() + static_cast<std::size_t>(n) * cin * hw, cin, hw).noalias() += wm * cm;
      if (wn->requires_grad)
        MapM<T>(wn->grad_buffer().data(), cin, kdim).noalias() +=
            CMapM<T>(xn->value.data() + static_cast<std::size_t>(n) * cin * hw, cin, hw) * cm.transpose();
      if (has_bias && self.parents[2]->requires_grad) {
        auto& bg = self.parents[2]->grad_buffer();
        const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
        for (int c = 0; c < cout; ++c) {
          T s = 0;
          for (std::size_t i = 0; i < plane; ++i) s += go[c * plane + i];
          bg[static_cast<std::size_t>(c)] += s;
        }
      }
    }
  });
}

/// Depthwise convolution, weight (C, 1, k, k): each channel filtered by its own kernel.
template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int pad) {
  using namespace detail;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 4, "depthwise_conv2d", "input must be rank 4, got " + shape_str(xs));
  require(ws.size() == 4 && ws[1] == 1 && ws[2] == ws[3], "depthwise_conv2d", "weight must be (C, 1, k, k)");
  require(ws[0] == xs[1], "depthwise_conv2d", "channel axis mismatch: input has " + std::to_string(xs[1]) +
                                                  ", weight expects " + std::to_string(ws[0]));
  const int k = ws[2];
  const ConvGeom g{xs[1], xs[2], xs[3], k, stride, pad, conv_out(xs[2], k, stride, pad), conv_out(xs[3], k, stride, pad)};
  require(g.out_h > 0 && g.out_w > 0, "depthwise_conv2d", "spatial size " + shape_str(xs) + " too small for kernel");
  Tensor<T> out(Shape{xs[0], xs[1], g.out_h, g.out_w});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (int n = 0; n < xs[0]; ++n)
    for (int c = 0; c < g.channels; ++c) {
      const T* wk = wv.data() + static_cast<std::size_t>(c) * k * k;
      const T bias = b ? b->value()[static_cast<std::size_t>(c)] : T(0);
      for (int oy = 0; oy < g.out_h; ++oy)
        for (int ox = 0; ox < g.out_w; ++ox) {
          T s = bias;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= g.width) continue;
              s += wk[ky * k + kx] * xv.at(n, c, iy, ix);
            }
          }
          out.at(n, c, oy, ox) = s;
        }
    }
  std::vector<Var<T>> parents{x, w};
  if (b) parents.push_back(*b);
  const bool has_bias = b != nullptr;
  return Var<T>::make(std::move(out), std::move(parents), [g, has_bias](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& wn = self.parents[1];
    const int k = g.kernel;
    const auto& xv = xn->value;
    const auto& wv = wn->value;
    const auto& go = self.grad;
    Tensor<T>* dx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
    Tensor<T>* dw = wn->requires_grad ? &wn->grad_buffer() : nullptr;
    Tensor<T>* db = has_bias && self.parents[2]->requires_grad ? &self.parents[2]->grad_buffer() : nullptr;
    for (int n = 0; n < xv.n(); ++n)
      for (int c = 0; c < g.channels; ++c)
        for (int oy = 0; oy < g.out_h; ++oy)
          for (int ox = 0; ox < g.out_w; ++ox) {
            const T gv = go.at(n, c, oy, ox);
            if (db) (*db)[static_cast<std::size_t>(c)] += gv;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.height) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.width) continue;
                const std::size_t wi = (static_cast<std::size_t>(c) * k + ky) * k + kx;
                if (dw) (*dw)[wi] += gv * xv.at(n, c, iy, ix);
                if (dx) dx->at(n, c, iy, ix) += gv * wv[wi];
              }
            }
          }
  });
}

/// Per-(sample, channel) normalization over the spatial axes, no affine.
template <class T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 4, "instance_norm", "input must be rank 4, got " + shape_str(xs));
  const std::size_t planes = static_cast<std::size_t>(xs[0]) * xs[1];
  const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
  Tensor<T> y(xs);
  std::vector<T> inv(planes);
  const T* xp = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xp + p * hw;
    T mean = 0;
    for (std::size_t i = 0; i < hw; ++i) mean += src[i];
    mean /= static_cast<T>(hw);
    T var = 0;
    for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(hw);
    inv[p] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < hw; ++i) y.data()[p * hw + i] = (src[i] - mean) * inv[p];
  }
  Tensor<T> normalized = y;
  return Var<T>::make(std::move(y), {x}, [normalized = std::move(normalized), inv = std::move(inv), hw](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    const T* g = self.grad.data();
    const T* yh = normalized.data();
    for (std::size_t p = 0; p < inv.size(); ++p) {
      T mg = 0, mgy = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        mg += g[p * hw + i];
        mgy += g[p * hw + i] * yh[p * hw + i];
      }
      mg /= static_cast<T>(hw);
      mgy /= static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i)
        dx.data()[p * hw + i] += inv[p] * (g[p * hw + i] - mg - yh[p * hw + i] * mgy);
    }
  });
}

/// Batch normalization with affine (gamma, beta). In training mode batch
/// statistics are used and the running estimates are updated in place;
/// otherwise the running estimates are used.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 4, "batch_norm", "input must be rank 4, got " + shape_str(xs));
  const int N = xs[0], C = xs[1];
  detail::require(gamma.value().size() == static_cast<std::size_t>(C), "batch_norm", "gamma size mismatch");
  const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
  const std::size_t count = hw * N;
  std::vector<T> mean(C), inv(C);
  const auto& xv = x.value();
  if (training) {
    detail::require(count > 1, "batch_norm", "training mode needs more than one value per channel");
    for (int c = 0; c < C; ++c) {
      T m = 0;
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < hw; ++i) m += xv.data()[(static_cast<std::size_t>(n) * C + c) * hw + i];
      m /= static_cast<T>(count);
      T v = 0;
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xv.data()[(static_cast<std::size_t>(n) * C + c) * hw + i] - m;
          v += d * d;
        }
      v /= static_cast<T>(count);
      mean[c] = m;
      inv[c] = T(1) / std::sqrt(v + eps);
      running_mean[c] = (1 - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (1 - momentum) * running_var[c] + momentum * v * static_cast<T>(count) / static_cast<T>(count - 1);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor<T> xhat(xs);
  Tensor<T> y(xs);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
      const T gm = gamma.value()[c], bt = beta.value()[c];
      for (std::size_t i = 0; i < hw; ++i) {
        const T h = (xv.data()[off + i] - mean[c]) * inv[c];
        xhat.data()[off + i] = h;
        y.data()[off + i] = gm * h + bt;
      }
    }
  return Var<T>::make(std::move(y), {x, gamma, beta},
                      [xhat = std::move(xhat), inv = std::move(inv), training, N, C, hw, count](Node<T>& self) {
                        auto& xn = self.parents[0];
                        auto& gn = self.parents[1];
                        auto& bn = self.parents[2];
                        const T* g = self.grad.data();
                        for (int c = 0; c < C; ++c) {
                          T sg = 0, sgx = 0;
                          for (int n = 0; n < N; ++n) {
                            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                            for (std::size_t i = 0; i < hw; ++i) {
                              sg += g[off + i];
                              sgx += g[off + i] * xhat.data()[off + i];
                            }
                          }
                          if (gn->requires_grad) gn->grad_buffer()[c] += sgx;
                          if (bn->requires_grad) bn->grad_buffer()[c] += sg;
                          if (!xn->requires_grad) continue;
                          const T gm = gn->value[c];
                          auto& dx = xn->grad_buffer();
                          const T mg = sg / static_cast<T>(count);
                          const T mgx = sgx / static_cast<T>(count);
                          for (int n = 0; n < N; ++n) {
                            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                            for (std::size_t i = 0; i < hw; ++i) {
                              if (training)
                                dx.data()[off + i] += gm * inv[c] * (g[off + i] - mg - xhat.data()[off + i] * mgx);
                              else
                                dx.data()[off + i] += gm * inv[c] * g[off + i];
                            }
                          }
                        }
                      });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = v > 0 ? v : T(0);
  return Var<T>::make(std::move(y), {x}, [](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xn->value[i] > 0) dx[i] += self.grad[i];
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = v > 0 ? v : slope * v;
  return Var<T>::make(std::move(y), {x}, [slope](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xn->value[i] > 0 ? self.grad[i] : slope * self.grad[i];
  });
}

/// Parametric ReLU with one learned negative slope per channel.
template <class T>
Var<T> prelu(const Var<T>& x, const Var<T>& alpha) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 4 && alpha.value().size() == static_cast<std::size_t>(xs[1]), "prelu",
                  "alpha must have one entry per channel");
  const std::size_t hw = static_cast<std::size_t>(xs[2]) * xs[3];
  const int C = xs[1];
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const int c = static_cast<int>((i / hw) % C);
    if (y[i] < 0) y[i] *= alpha.value()[c];
  }
  return Var<T>::make(std::move(y), {x, alpha}, [hw, C](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& an = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const int c = static_cast<int>((i / hw) % C);
      const T xv = xn->value[i];
      if (xn->requires_grad) xn->grad_buffer()[i] += xv > 0 ? self.grad[i] : an->value[c] * self.grad[i];
      if (an->requires_grad && xv < 0) an->grad_buffer()[c] += xv * self.grad[i];
    }
  });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v = std::tanh(v);
  Tensor<T> saved = y;
  return Var<T>::make(std::move(y), {x}, [saved = std::move(saved)](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * (T(1) - saved[i] * saved[i]);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return Var<T>::make(std::move(y), {a, b}, [](Node<T>& self) {
    detail::accumulate(self.parents[0], self.grad);
    detail::accumulate(self.parents[1], self.grad);
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> y = x.value().reshaped(std::move(s));
  return Var<T>::make(std::move(y), {x}, [](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
  });
}

/// Scalar combination sum_i coeff_i * term_i of one-element Vars.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& coeffs) {
  detail::require(terms.size() == coeffs.size(), "weighted_sum", "terms/coefficients length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += coeffs[i] * terms[i].item();
  return Var<T>::make(Tensor<T>::scalar(s), terms, [coeffs](Node<T>& self) {
    for (std::size_t i = 0; i < coeffs.size(); ++i)
      if (self.parents[i]->requires_grad) self.parents[i]->grad_buffer()[0] += coeffs[i] * self.grad[0];
  });
}

/// mean((x - target)^2) over all elements.
template <class T>
Var<T> mean_squared_to(const Var<T>& x, T target) {
  const auto& xv = x.value();
  detail::require(!xv.empty(), "mean_squared_to", "empty input");
  T s = 0;
  for (T v : xv.vec()) s += (v - target) * (v - target);
  const T n = static_cast<T>(xv.size());
  return Var<T>::make(Tensor<T>::scalar(s / n), {x}, [target, n](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& dx = xn->grad_buffer();
    const T g = self.grad[0] * T(2) / n;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * (xn->value[i] - target);
  });
}

/// mean(|a - b|) over all elements; subgradient 0 where a == b.
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "mean_abs_diff");
  detail::require(!a.value().empty(), "mean_abs_diff", "empty input");
  T s = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += std::abs(a.value()[i] - b.value()[i]);
  const T n = static_cast<T>(a.value().size());
  return Var<T>::make(Tensor<T>::scalar(s / n), {a, b}, [n](Node<T>& self) {
    auto& an = self.parents[0];
    auto& bn = self.parents[1];
    const T g = self.grad[0] / n;
    for (std::size_t i = 0; i < an->value.size(); ++i) {
      const T d = an->value[i] - bn->value[i];
      const T sg = d > 0 ? g : (d < 0 ? -g : T(0));
      if (an->requires_grad) an->grad_buffer()[i] += sg;
      if (bn->requires_grad) bn->grad_buffer()[i] -= sg;
    }
  });
}

/// Fully connected layer: x (N, D), w (K, D), b (K) -> (N, K).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  using namespace detail;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], "linear",
          "shape mismatch " + shape_str(xs) + " x " + shape_str(ws));
  const int N = xs[0], D = xs[1], K = ws[0];
  Tensor<T> y(Shape{N, K});
  MapM<T> ym(y.data(), N, K);
  ym.noalias() = CMapM<T>(x.value().data(), N, D) * CMapM<T>(w.value().data(), K, D).transpose();
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) ym(i, k) += b.value()[k];
  return Var<T>::make(std::move(y), {x, w, b}, [N, D, K](Node<T>& self) {
    auto& xn = self.parents[0];
    auto& wn = self.parents[1];
    auto& bn = self.parents[2];
    CMapM<T> gm(self.grad.data(), N, K);
    if (xn->requires_grad)
      MapM<T>(xn->grad_buffer().data(), N, D).noalias() += gm * CMapM<T>(wn->value.data(), K, D);
    if (wn->requires_grad)
      MapM<T>(wn->grad_buffer().data(), K, D).noalias() += gm.transpose() * CMapM<T>(xn->value.data(), N, D);
    if (bn->requires_grad)
      for (int k = 0; k < K; ++k) bn->grad_buffer()[k] += plain_sum(gm.data() + k, N, K);
  });
}

/// Row-wise L2 normalization of an (N, D) matrix. A zero row cannot be
/// normalized and raises DegenerateEmbeddingError.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  const auto& xs = x.shape();
  detail::require(xs.size() == 2, "l2_normalize_rows", "input must be (N, D), got " + shape_str(xs));
  const int N = xs[0], D = xs[1];
  Tensor<T> y(xs);
  std::vector<T> norms(N);
  for (int i = 0; i < N; ++i) {
    T s = 0;
    for (int j = 0; j < D; ++j) s += x.value()[i * D + j] * x.value()[i * D + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > std::numeric_limits<T>::min()))
      throw DegenerateEmbeddingError("backbone", "embedding row " + std::to_string(i) + " has zero norm");
    for (int j = 0; j < D; ++j) y[i * D + j] = x.value()[i * D + j] / norms[i];
  }
  Tensor<T> saved = y;
  return Var<T>::make(std::move(y), {x}, [saved = std::move(saved), norms = std::move(norms), N, D](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (int i = 0; i < N; ++i) {
      T dot = 0;
      for (int j = 0; j < D; ++j) dot += saved[i * D + j] * self.grad[i * D + j];
      for (int j = 0; j < D; ++j) dx[i * D + j] += (self.grad[i * D + j] - saved[i * D + j] * dot) / norms[i];
    }
  });
}

/// Mean softmax cross-entropy of logits (N, K) against integer labels.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  detail::require(s.size() == 2 && static_cast<std::size_t>(s[0]) == labels.size(), "softmax_cross_entropy",
                  "logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
  const int N = s[0], K = s[1];
  Tensor<T> probs(s);
  T loss = 0;
  for (int i = 0; i < N; ++i) {
    const T* row = logits.value().data() + static_cast<std::size_t>(i) * K;
    T mx = *std::max_element(row, row + K);
    T z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (int k = 0; k < K; ++k) probs[i * K + k] = std::exp(row[k] - mx) / z;
    if (labels[i] < 0 || labels[i] >= K) throw RangeError("softmax_cross_entropy", "label out of range");
    loss -= (row[labels[i]] - mx) - std::log(z);
  }
  return Var<T>::make(Tensor<T>::scalar(loss / N), {logits}, [probs = std::move(probs), labels, N, K](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    const T g = self.grad[0] / N;
    for (int i = 0; i < N; ++i)
      for (int k = 0; k < K; ++k) dx[i * K + k] += g * (probs[i * K + k] - (k == labels[i] ? T(1) : T(0)));
  });
}

}  // namespace ops
}  // namespace ffecg
