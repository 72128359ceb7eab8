#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ffecg/ops.hpp"
#include "ffecg/optim.hpp"
#include "ffecg/params.hpp"

namespace ffecg {

/// One MobileNetV2-style inverted-residual stage.
struct BottleneckSpec {
  int expansion = 2;
  int out_channels = 64;
  int repeats = 1;
  int stride = 1;
  friend bool operator==(const BottleneckSpec&, const BottleneckSpec&) = default;
};

/// Face feature extractor layout. The default is a shortened MobileFaceNet:
/// the stage pattern is kept but repeat counts and head width are reduced.
struct FFEConfig {
  int input_resolution = 112;
  int stem_channels = 64;
  std::vector<BottleneckSpec> bottlenecks{
      {2, 64, 2, 2}, {2, 128, 1, 1}, {4, 128, 1, 2}, {2, 128, 2, 1}, {4, 128, 1, 2}, {2, 128, 1, 1}};
  int embedding_dim = 128;
  int spatial_tap_stage = 1;
  int head_channels = 256;

  static constexpr int kTapChannels = 128;
  static constexpr int kTapStride = 4;

  int stride_through(int stage) const {
    int s = 2;  // stem
    for (int i = 0; i <= stage && i < static_cast<int>(bottlenecks.size()); ++i) s *= bottlenecks[i].stride;
    return s;
  }
  int total_stride() const { return stride_through(static_cast<int>(bottlenecks.size()) - 1); }

  void validate() const {
    if (bottlenecks.empty()) throw ConfigError("backbone", "bottleneck list is empty");
    for (const auto& b : bottlenecks) {
      if (b.stride != 1 && b.stride != 2) throw ConfigError("backbone", "bottleneck stride must be 1 or 2");
      if (b.expansion < 1 || b.out_channels < 1 || b.repeats < 1)
        throw ConfigError("backbone", "bottleneck expansion/channels/repeats must be >= 1");
    }
    if (spatial_tap_stage < 0 || spatial_tap_stage >= static_cast<int>(bottlenecks.size()))
      throw ConfigError("backbone", "spatial_tap_stage out of range");
    if (bottlenecks[spatial_tap_stage].out_channels != kTapChannels)
      throw ConfigError("backbone", "tap stage must output 128 channels");
    if (stride_through(spatial_tap_stage) != kTapStride)
      throw ConfigError("backbone", "tap stage must have stride 4 relative to the input");
    if (embedding_dim < 1 || stem_channels < 1 || head_channels < 1)
      throw ConfigError("backbone", "channel counts must be >= 1");
    if (input_resolution % total_stride() != 0)
      throw ConfigError("backbone", "input_resolution must be divisible by the total stride " +
                                        std::to_string(total_stride()));
  }
};

/// Initialize backbone parameters (embedding head and all) with N(0, 0.02) convolutions.
template <class T>
ParameterSet<T> init_ffe(const FFEConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet<T> ps;
  init::conv(ps, "stem.conv", cfg.stem_channels, 3, 3, false, rng);
  init::batch_norm(ps, "stem.bn", cfg.stem_channels, rng);
  init::prelu(ps, "stem.act", cfg.stem_channels);
  init::depthwise(ps, "stem.dw", cfg.stem_channels, 3, rng);
  init::batch_norm(ps, "stem.dw_bn", cfg.stem_channels, rng);
  init::prelu(ps, "stem.dw_act", cfg.stem_channels);
  int in = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.bottlenecks.size(); ++s) {
    const auto& b = cfg.bottlenecks[s];
    for (int r = 0; r < b.repeats; ++r) {
      const std::string p = "stage" + std::to_string(s) + "." + std::to_string(r);
      const int hidden = in * b.expansion;
      init::conv(ps, p + ".expand", hidden, in, 1, false, rng);
      init::batch_norm(ps, p + ".expand_bn", hidden, rng);
      init::prelu(ps, p + ".expand_act", hidden);
      init::depthwise(ps, p + ".dw", hidden, 3, rng);
      init::batch_norm(ps, p + ".dw_bn", hidden, rng);
      init::prelu(ps, p + ".dw_act", hidden);
      init::conv(ps, p + ".project", b.out_channels, hidden, 1, false, rng);
      init::batch_norm(ps, p + ".project_bn", b.out_channels, rng);
      in = b.out_channels;
    }
  }
  const int final_size = cfg.input_resolution / cfg.total_stride();
  init::conv(ps, "head.conv", cfg.head_channels, in, 1, false, rng);
  init::batch_norm(ps, "head.bn", cfg.head_channels, rng);
  init::prelu(ps, "head.act", cfg.head_channels);
  init::depthwise(ps, "head.gdconv", cfg.head_channels, final_size, rng);
  init::batch_norm(ps, "head.gdconv_bn", cfg.head_channels, rng);
  init::conv(ps, "head.linear", cfg.embedding_dim, cfg.head_channels, 1, false, rng);
  init::batch_norm(ps, "head.linear_bn", cfg.embedding_dim, rng);
  return ps;
}

namespace detail {

template <class T>
Var<T> bn(ParameterSet<T>& ps, const std::string& name, const Var<T>& x, bool training) {
  return ops::batch_norm(x, ps.at(name + ".gamma"), ps.at(name + ".beta"), ps.value(name + ".running_mean"),
                         ps.value(name + ".running_var"), training);
}

template <class T>
Var<T> bottleneck(ParameterSet<T>& ps, const std::string& p, const Var<T>& x, int stride, bool training) {
  Var<T> h = ops::conv2d(x, ps.at(p + ".expand.w"), static_cast<const Var<T>*>(nullptr), 1, 0);
  h = ops::prelu(bn(ps, p + ".expand_bn", h, training), ps.at(p + ".expand_act.alpha"));
  h = ops::depthwise_conv2d(h, ps.at(p + ".dw.w"), static_cast<const Var<T>*>(nullptr), stride, 1);
  h = ops::prelu(bn(ps, p + ".dw_bn", h, training), ps.at(p + ".dw_act.alpha"));
  h = ops::conv2d(h, ps.at(p + ".project.w"), static_cast<const Var<T>*>(nullptr), 1, 0);
  h = bn(ps, p + ".project_bn", h, training);
  if (stride == 1 && x.shape() == h.shape()) h = ops::add(h, x);
  return h;
}

template <class T>
Var<T> run_stages(const FFEConfig& cfg, ParameterSet<T>& ps, Var<T> x, int first, int last, bool training) {
  for (int s = first; s <= last; ++s) {
    const auto& b = cfg.bottlenecks[static_cast<std::size_t>(s)];
    for (int r = 0; r < b.repeats; ++r)
      x = bottleneck(ps, "stage" + std::to_string(s) + "." + std::to_string(r), x, r == 0 ? b.stride : 1, training);
  }
  return x;
}

inline void check_image_batch(const Shape& s, const char* module) {
  if (s.size() != 4) throw ShapeError(module, "expected rank-4 image batch, got " + shape_str(s));
  if (s[1] != 3) throw ShapeError(module, "channel axis must be 3, got " + std::to_string(s[1]));
}

}  // namespace detail

/// Encoder mode: stem and stages up to the tap, giving a (N, 128, H/4, W/4)
/// spatial feature map. `training` selects batch statistics in the norms.
template <class T>
Var<T> ffe_forward_spatial(const Var<T>& images, const FFEConfig& cfg, ParameterSet<T>& ps, bool training = false) {
  const auto& s = images.shape();
  detail::check_image_batch(s, "backbone");
  if (s[2] % FFEConfig::kTapStride != 0)
    throw ShapeError("backbone", "height axis " + std::to_string(s[2]) + " not divisible by 4");
  if (s[3] % FFEConfig::kTapStride != 0)
    throw ShapeError("backbone", "width axis " + std::to_string(s[3]) + " not divisible by 4");
  Var<T> h = ops::conv2d(images, ps.at("stem.conv.w"), static_cast<const Var<T>*>(nullptr), 2, 1);
  h = ops::prelu(detail::bn(ps, "stem.bn", h, training), ps.at("stem.act.alpha"));
  h = ops::depthwise_conv2d(h, ps.at("stem.dw.w"), static_cast<const Var<T>*>(nullptr), 1, 1);
  h = ops::prelu(detail::bn(ps, "stem.dw_bn", h, training), ps.at("stem.dw_act.alpha"));
  return detail::run_stages(cfg, ps, h, 0, cfg.spatial_tap_stage, training);
}

/// Pre-normalization embedding (N, embedding_dim): the stages after the tap,
/// a 1x1 head, global depthwise convolution and a linear 1x1 projection.
template <class T>
Var<T> ffe_forward_features(const Var<T>& images, const FFEConfig& cfg, ParameterSet<T>& ps, bool training = false) {
  const auto& s = images.shape();
  detail::check_image_batch(s, "backbone");
  if (s[2] != cfg.input_resolution || s[3] != cfg.input_resolution)
    throw ShapeError("backbone", "embedding input must be " + std::to_string(cfg.input_resolution) + "x" +
                                     std::to_string(cfg.input_resolution) + ", got " + shape_str(s));
  Var<T> h = ffe_forward_spatial(images, cfg, ps, training);
  h = detail::run_stages(cfg, ps, h, cfg.spatial_tap_stage + 1, static_cast<int>(cfg.bottlenecks.size()) - 1, training);
  h = ops::conv2d(h, ps.at("head.conv.w"), static_cast<const Var<T>*>(nullptr), 1, 0);
  h = ops::prelu(detail::bn(ps, "head.bn", h, training), ps.at("head.act.alpha"));
  h = ops::depthwise_conv2d(h, ps.at("head.gdconv.w"), static_cast<const Var<T>*>(nullptr), 1, 0);
  h = detail::bn(ps, "head.gdconv_bn", h, training);
  h = ops::conv2d(h, ps.at("head.linear.w"), static_cast<const Var<T>*>(nullptr), 1, 0);
  h = detail::bn(ps, "head.linear_bn", h, training);
  return ops::reshape(h, Shape{s[0], cfg.embedding_dim});
}

/// Unit-norm embeddings (N, embedding_dim).
template <class T>
Var<T> ffe_forward_embedding(const Var<T>& images, const FFEConfig& cfg, ParameterSet<T>& ps) {
  return ops::l2_normalize_rows(ffe_forward_features(images, cfg, ps, false));
}

/// Inference helper: resizes to the configured resolution and embeds without
/// recording a graph, `chunk` images at a time.
template <class T>
Tensor<T> embed_images(const Tensor<T>& images, const FFEConfig& cfg, ParameterSet<T>& ps, int chunk = 32) {
  NoGradGuard guard;
  std::vector<Tensor<T>> parts;
  for (int b = 0; b < images.n(); b += chunk) {
    Tensor<T> part = images.batch_slice(b, std::min(images.n(), b + chunk));
    part = resize_bilinear(part, cfg.input_resolution, cfg.input_resolution);
    parts.push_back(ffe_forward_embedding(Var<T>(part), cfg, ps).value());
  }
  const int d = cfg.embedding_dim;
  std::vector<T> all;
  for (const auto& p : parts) all.insert(all.end(), p.vec().begin(), p.vec().end());
  return Tensor<T>(Shape{images.n(), d}, std::move(all));
}

/// Identity-labelled face images for classification pretraining.
struct LabeledFaceSet {
  Tensor<float> images;  // (N, 3, R, R) in [-1, 1]
  std::vector<int> labels;
  int n_classes = 0;
};

struct PretrainOptions {
  int batch_size = 16;
  double learning_rate = 1e-3;
  // Probability of replacing a training image by its grey-level version, so
  // the extractor also sees single-band imagery.
  double gray_probability = 0.5;
};

struct PretrainResult {
  ParameterSet<float> params;  // backbone only; the classifier is dropped
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

namespace detail {

inline void validate_labeled_set(const LabeledFaceSet& ds) {
  if (ds.images.rank() != 4 || static_cast<std::size_t>(ds.images.n()) != ds.labels.size())
    throw ShapeError("backbone", "images and labels disagree in count");
  std::vector<int> counts(static_cast<std::size_t>(std::max(ds.n_classes, 0)), 0);
  for (int l : ds.labels) {
    if (l < 0 || l >= ds.n_classes) throw ProtocolError("backbone", "label out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; });
  if (present < 2) throw ProtocolError("backbone", "pretraining needs at least 2 identities, got " + std::to_string(present));
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] > 0 && counts[i] < 2)
      throw ProtocolError("backbone", "identity " + std::to_string(i) + " has fewer than 2 images");
}

inline void to_gray_inplace(Tensor<float>& img, int n) {
  const std::size_t plane = static_cast<std::size_t>(img.h()) * img.w();
  float* base = img.data() + static_cast<std::size_t>(n) * 3 * plane;
  for (std::size_t i = 0; i < plane; ++i) {
    const float g = 0.299f * base[i] + 0.587f * base[plane + i] + 0.114f * base[2 * plane + i];
    base[i] = base[plane + i] = base[2 * plane + i] = g;
  }
}

}  // namespace detail

/// Softmax-classification pretraining of the backbone on a VIS identity set.
inline PretrainResult pretrain_ffe(const LabeledFaceSet& dataset, const FFEConfig& config, int epochs,
                                   std::uint64_t seed, const PretrainOptions& opt = {}) {
  detail::validate_labeled_set(dataset);
  if (dataset.images.h() != config.input_resolution || dataset.images.w() != config.input_resolution)
    throw ShapeError("backbone", "pretraining images must match input_resolution");
  Rng rng(seed);
  PretrainResult result;
  result.params = init_ffe<float>(config, rng);
  ParameterSet<float> head;
  head.add("cls.w", init::normal<float>(Shape{dataset.n_classes, config.embedding_dim}, rng, 0.0, 0.02));
  head.add("cls.b", Tensor<float>(Shape{dataset.n_classes}));
  Adam<float> adam(0.9, 0.999);
  adam.track(result.params);
  adam.track(head);

  const int n = dataset.images.n();
  const int bs = std::max(2, std::min(opt.batch_size, n));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    int batches = 0;
    for (int b = 0; b + 1 < n; b += bs) {
      const int end = std::min(n, b + bs);
      if (end - b < 2) break;
      std::vector<Tensor<float>> imgs;
      std::vector<int> labels;
      for (int i = b; i < end; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        Tensor<float> one = dataset.images.batch_slice(idx, idx + 1);
        if (rng.bernoulli(opt.gray_probability)) detail::to_gray_inplace(one, 0);
        imgs.push_back(std::move(one));
        labels.push_back(dataset.labels[static_cast<std::size_t>(idx)]);
      }
      Var<float> x(concat_batch<float>(imgs));
      adam.zero_grad();
      Var<float> feats = ffe_forward_features(x, config, result.params, true);
      Var<float> logits = ops::linear(feats, head.at("cls.w"), head.at("cls.b"));
      Var<float> loss = ops::softmax_cross_entropy(logits, labels);
      backward(loss);
      adam.step(opt.learning_rate);
      loss_sum += loss.item();
      ++batches;
    }
    result.epoch_loss.push_back(batches ? loss_sum / batches : 0.0);
  }
  result.final_loss = result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back();

  // Accuracy with running statistics, the mode the backbone is used in afterwards.
  NoGradGuard guard;
  int correct = 0;
  for (int b = 0; b < n; b += 32) {
    const int end = std::min(n, b + 32);
    Var<float> x(dataset.images.batch_slice(b, end));
    auto logits = ops::linear(ffe_forward_features(x, config, result.params, false), head.at("cls.w"), head.at("cls.b"));
    const int k = dataset.n_classes;
    for (int i = 0; i < end - b; ++i) {
      const float* row = logits.value().data() + static_cast<std::size_t>(i) * k;
      const int arg = static_cast<int>(std::max_element(row, row + k) - row);
      if (arg == dataset.labels[static_cast<std::size_t>(b + i)]) ++correct;
    }
  }
  result.train_accuracy = static_cast<double>(correct) / n;
  return result;
}

}  // namespace ffecg
