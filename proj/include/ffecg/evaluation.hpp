#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffecg/backbone.hpp"
#include "ffecg/data.hpp"
#include "ffecg/generator.hpp"

namespace ffecg {

/// probes x gallery cosine similarities, row-major.
struct ScoreMatrix {
  int probes = 0;
  int gallery = 0;
  std::vector<double> scores;
  std::vector<std::string> probe_ids;
  std::vector<std::string> gallery_ids;

  double at(int p, int g) const { return scores[static_cast<std::size_t>(p) * gallery + g]; }
  bool genuine(int p, int g) const {
    return probe_ids[static_cast<std::size_t>(p)] == gallery_ids[static_cast<std::size_t>(g)];
  }

  void validate() const {
    if (probes < 1 || gallery < 1) throw ProtocolError("evaluation", "empty probe or gallery set");
    if (static_cast<int>(probe_ids.size()) != probes || static_cast<int>(gallery_ids.size()) != gallery ||
        scores.size() != static_cast<std::size_t>(probes) * gallery)
      throw ShapeError("evaluation", "score matrix dimensions disagree with identifier lists");
  }
};

/// Cosine similarity of every row of `a` with every row of `b`, clamped to [-1, 1].
template <class T>
std::vector<double> cosine_scores(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    throw ShapeError("evaluation", "embedding shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int n = a.shape()[0], m = b.shape()[0], d = a.shape()[1];
  auto norm = [d](const T* r) {
    double s = 0;
    for (int k = 0; k < d; ++k) s += static_cast<double>(r[k]) * r[k];
    return std::sqrt(s);
  };
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i) {
    const T* ra = a.data() + static_cast<std::size_t>(i) * d;
    const double na = norm(ra);
    for (int j = 0; j < m; ++j) {
      const T* rb = b.data() + static_cast<std::size_t>(j) * d;
      double dot = 0;
      for (int k = 0; k < d; ++k) dot += static_cast<double>(ra[k]) * rb[k];
      const double den = na * norm(rb);
      if (den == 0) throw DegenerateEmbeddingError("evaluation", "zero-norm embedding");
      out[static_cast<std::size_t>(i) * m + j] = std::clamp(dot / den, -1.0, 1.0);
    }
  }
  return out;
}

/// Translates `probes_vis` with `g` (VIS -> NIR) and scores the matcher
/// embeddings of the fakes against those of `gallery_nir`.
inline ScoreMatrix build_score_matrix(const Tensor<float>& probes_vis, const std::vector<std::string>& probe_ids,
                                      const Tensor<float>& gallery_nir, const std::vector<std::string>& gallery_ids,
                                      Generator<float>& g, const FFEConfig& matcher_cfg, ParameterSet<float>& matcher,
                                      int chunk = 16) {
  if (probes_vis.empty() || gallery_nir.empty() || probe_ids.empty() || gallery_ids.empty())
    throw ProtocolError("evaluation", "empty probe or gallery set");
  if (static_cast<int>(probe_ids.size()) != probes_vis.n() || static_cast<int>(gallery_ids.size()) != gallery_nir.n())
    throw ShapeError("evaluation", "identifier lists disagree with image counts");
  std::vector<Tensor<float>> fakes;
  {
    NoGradGuard guard;
    for (int b = 0; b < probes_vis.n(); b += chunk) {
      Var<float> x(probes_vis.batch_slice(b, std::min(probes_vis.n(), b + chunk)));
      fakes.push_back(generator_forward(x, g).value());
    }
  }
  const Tensor<float> e_probe = embed_images(concat_batch<float>(fakes), matcher_cfg, matcher);
  const Tensor<float> e_gallery = embed_images(gallery_nir, matcher_cfg, matcher);
  ScoreMatrix m{probes_vis.n(), gallery_nir.n(), cosine_scores(e_probe, e_gallery), probe_ids, gallery_ids};
  m.validate();
  return m;
}

namespace detail {

inline void require_gallery_coverage(const ScoreMatrix& m) {
  const std::set<std::string> gallery(m.gallery_ids.begin(), m.gallery_ids.end());
  for (const auto& p : m.probe_ids)
    if (!gallery.count(p)) throw ProtocolError("evaluation", "probe subject '" + p + "' has no gallery entry");
}

}  // namespace detail

/// Fraction of probes whose best gallery entry (lowest index on ties) has their subject.
inline double rank1(const ScoreMatrix& m) {
  m.validate();
  detail::require_gallery_coverage(m);
  int hits = 0;
  for (int p = 0; p < m.probes; ++p) {
    int best = 0;
    for (int g = 1; g < m.gallery; ++g)
      if (m.at(p, g) > m.at(p, best)) best = g;
    if (m.genuine(p, best)) ++hits;
  }
  return static_cast<double>(hits) / m.probes;
}

struct TarResult {
  double far = 0.0;           // requested level
  double tar = 0.0;
  double threshold = 0.0;     // accept iff score >= threshold
  double achieved_far = 0.0;
  bool resolvable = true;     // false when 1/n_impostor > far, i.e. the level is finer than the data can show
};

/// For each level f: among thresholds drawn from the distinct scores (plus
/// one above all of them), the one with the largest impostor acceptance
/// rate not exceeding f; TAR is the genuine fraction at or above it.
inline std::vector<TarResult> tar_at_far(const ScoreMatrix& m, const std::vector<double>& far_levels) {
  m.validate();
  std::vector<double> genuine, impostor;
  for (int p = 0; p < m.probes; ++p)
    for (int g = 0; g < m.gallery; ++g) (m.genuine(p, g) ? genuine : impostor).push_back(m.at(p, g));
  if (genuine.empty()) throw ProtocolError("evaluation", "no genuine pairs");
  if (impostor.empty()) throw ProtocolError("evaluation", "no impostor pairs");
  std::sort(genuine.begin(), genuine.end());
  std::sort(impostor.begin(), impostor.end());
  const auto ng = static_cast<double>(genuine.size()), ni = static_cast<double>(impostor.size());
  auto at_or_above = [](const std::vector<double>& v, double t) {
    return static_cast<double>(v.end() - std::lower_bound(v.begin(), v.end(), t));
  };
  // Candidate thresholds in decreasing order: acceptance rates grow along it.
  std::vector<double> cand{std::numeric_limits<double>::infinity()};
  std::vector<double> all(genuine);
  all.insert(all.end(), impostor.begin(), impostor.end());
  std::sort(all.begin(), all.end(), std::greater<>());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  cand.insert(cand.end(), all.begin(), all.end());

  std::vector<TarResult> out;
  for (double f : far_levels) {
    if (!(f >= 0 && f <= 1)) throw RangeError("evaluation", "FAR level must lie in [0, 1]");
    TarResult r;
    r.far = f;
    r.threshold = cand.front();
    for (double t : cand) {
      if (at_or_above(impostor, t) / ni > f) break;
      r.threshold = t;
    }
    r.achieved_far = at_or_above(impostor, r.threshold) / ni;
    r.tar = at_or_above(genuine, r.threshold) / ng;
    r.resolvable = f == 0 || ni * f >= 1.0;
    out.push_back(r);
  }
  return out;
}

struct EvalReport {
  std::string protocol;
  double rank1 = 0.0;
  double tar_far_0_01 = 0.0;
  double tar_far_0_001 = 0.0;
  long long n_genuine = 0;
  long long n_impostor = 0;
  long long checkpoint_step = 0;
  // Achieved impostor acceptance at the two thresholds (diagnostic, not in the report keys).
  double achieved_far_0_01 = 0.0;
  double achieved_far_0_001 = 0.0;
};

inline nlohmann::json report_to_json(const EvalReport& r) {
  return {{"protocol", r.protocol},          {"rank1", r.rank1},
          {"tar_far_0.01", r.tar_far_0_01},  {"tar_far_0.001", r.tar_far_0_001},
          {"n_genuine", r.n_genuine},        {"n_impostor", r.n_impostor},
          {"checkpoint_step", r.checkpoint_step}};
}

inline EvalReport report_from_matrix(const ScoreMatrix& m, const std::string& protocol, long long step) {
  EvalReport r;
  r.protocol = protocol;
  r.rank1 = rank1(m);
  const auto tars = tar_at_far(m, {0.01, 0.001});
  r.tar_far_0_01 = tars[0].tar;
  r.tar_far_0_001 = tars[1].tar;
  r.achieved_far_0_01 = tars[0].achieved_far;
  r.achieved_far_0_001 = tars[1].achieved_far;
  for (int p = 0; p < m.probes; ++p)
    for (int g = 0; g < m.gallery; ++g) ++(m.genuine(p, g) ? r.n_genuine : r.n_impostor);
  r.checkpoint_step = step;
  return r;
}

/// End-to-end report over the split's test pairs: every test VIS image is a
/// probe and every test NIR image is a gallery entry. `train_subjects` are
/// the subjects the generator was trained on (from its checkpoint).
inline EvalReport evaluate_protocol(const ProtocolSplit& split, Generator<float>& g,
                                    const std::vector<std::string>& train_subjects, const FFEConfig& matcher_cfg,
                                    ParameterSet<float>& matcher, int resolution, const std::string& protocol = "synthetic",
                                    long long checkpoint_step = 0) {
  const std::set<std::string> trained(train_subjects.begin(), train_subjects.end());
  for (const auto& s : split.test_subjects)
    if (trained.count(s)) throw ProtocolViolation("evaluation", "test subject '" + s + "' was used for training");
  for (const auto& s : split.test)
    if (trained.count(s.subject_id))
      throw ProtocolViolation("evaluation", "test subject '" + s.subject_id + "' was used for training");
  if (split.test.empty()) throw ProtocolError("evaluation", "split has no test pairs");
  std::vector<Tensor<float>> vis, nir;
  std::vector<std::string> ids;
  for (const auto& s : split.test) {
    vis.push_back(load_image(s.vis_path, resolution));
    nir.push_back(load_image(s.nir_path, resolution));
    ids.push_back(s.subject_id);
  }
  const ScoreMatrix m =
      build_score_matrix(concat_batch<float>(vis), ids, concat_batch<float>(nir), ids, g, matcher_cfg, matcher);
  return report_from_matrix(m, protocol, checkpoint_step);
}

}  // namespace ffecg
