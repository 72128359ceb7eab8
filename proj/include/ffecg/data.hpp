#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffecg/backbone.hpp"
#include "ffecg/image_io.hpp"
#include "ffecg/rng.hpp"

namespace ffecg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Samples and splits

enum class PoseTag { NeutralFrontal, TiltUp, TiltDown, LeftRotation, RightRotation, Blank, Smile };

inline constexpr std::array<PoseTag, 7> kAllPoses{PoseTag::NeutralFrontal, PoseTag::TiltUp,        PoseTag::TiltDown,
                                                  PoseTag::LeftRotation,   PoseTag::RightRotation, PoseTag::Blank,
                                                  PoseTag::Smile};

inline std::string to_string(PoseTag p) {
  switch (p) {
    case PoseTag::NeutralFrontal: return "neutral-frontal";
    case PoseTag::TiltUp: return "tilt-up";
    case PoseTag::TiltDown: return "tilt-down";
    case PoseTag::LeftRotation: return "left-rotation";
    case PoseTag::RightRotation: return "right-rotation";
    case PoseTag::Blank: return "blank";
    case PoseTag::Smile: return "smile";
  }
  return "?";
}

inline PoseTag pose_from_string(const std::string& s) {
  for (auto p : kAllPoses)
    if (to_string(p) == s) return p;
  throw ProtocolError("data", "unknown pose tag '" + s + "'");
}

/// One approximately paired VIS/NIR capture. Pairing is by identical
/// relative path under root/vis and root/nir.
struct PairedSample {
  std::string subject_id;
  PoseTag pose = PoseTag::NeutralFrontal;
  fs::path vis_path;
  fs::path nir_path;

  // "subject/stem", shared by both members of the pair.
  std::string key() const { return subject_id + "/" + vis_path.stem().string(); }
};

struct ProtocolSplit {
  std::vector<std::string> train_subjects;
  std::vector<std::string> test_subjects;
  int pairs_per_subject = 0;
  std::uint64_t seed = 0;
  std::vector<PairedSample> train;
  std::vector<PairedSample> test;
};

inline nlohmann::json sample_to_json(const PairedSample& s) {
  return {{"subject", s.subject_id}, {"pose", to_string(s.pose)}, {"vis", s.vis_path.string()}, {"nir", s.nir_path.string()}};
}

inline PairedSample sample_from_json(const nlohmann::json& j) {
  return {j.at("subject").get<std::string>(), pose_from_string(j.at("pose").get<std::string>()),
          fs::path(j.at("vis").get<std::string>()), fs::path(j.at("nir").get<std::string>())};
}

inline nlohmann::json split_to_json(const ProtocolSplit& s) {
  nlohmann::json j;
  j["train_subjects"] = s.train_subjects;
  j["test_subjects"] = s.test_subjects;
  j["pairs_per_subject"] = s.pairs_per_subject;
  j["seed"] = s.seed;
  j["train"] = nlohmann::json::array();
  j["test"] = nlohmann::json::array();
  for (const auto& x : s.train) j["train"].push_back(sample_to_json(x));
  for (const auto& x : s.test) j["test"].push_back(sample_to_json(x));
  return j;
}

inline ProtocolSplit split_from_json(const nlohmann::json& j) {
  ProtocolSplit s;
  s.train_subjects = j.at("train_subjects").get<std::vector<std::string>>();
  s.test_subjects = j.at("test_subjects").get<std::vector<std::string>>();
  s.pairs_per_subject = j.at("pairs_per_subject").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& x : j.at("train")) s.train.push_back(sample_from_json(x));
  for (const auto& x : j.at("test")) s.test.push_back(sample_from_json(x));
  return s;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("data", "cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("data", "write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("data", "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void save_split(const fs::path& path, const ProtocolSplit& s) { write_text_file(path, split_to_json(s).dump(2) + "\n"); }

inline ProtocolSplit load_split(const fs::path& path) {
  try {
    return split_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError("data", "malformed split manifest '" + path.string() + "': " + e.what());
  }
}

/// Subject-disjoint split. Subjects are shuffled with `seed`; the first
/// n_train become training subjects, the next n_test test subjects. Each
/// keeps `pairs_per_subject` pairs, chosen to cover as many poses as possible.
inline ProtocolSplit make_split(const std::vector<PairedSample>& samples, int n_train_subjects, int n_test_subjects,
                                int pairs_per_subject, std::uint64_t seed) {
  if (n_train_subjects < 1 || n_test_subjects < 1 || pairs_per_subject < 1)
    throw ProtocolError("data", "split counts must all be >= 1");
  std::map<std::string, std::vector<PairedSample>> by_subject;
  for (const auto& s : samples) by_subject[s.subject_id].push_back(s);
  const int need = n_train_subjects + n_test_subjects;
  if (static_cast<int>(by_subject.size()) < need)
    throw ProtocolError("data", "split needs " + std::to_string(need) + " subjects, dataset has " +
                                    std::to_string(by_subject.size()));
  std::vector<std::string> subjects;
  for (const auto& [id, _] : by_subject) subjects.push_back(id);
  Rng rng(seed);
  rng.shuffle(subjects.begin(), subjects.end());

  ProtocolSplit split;
  split.pairs_per_subject = pairs_per_subject;
  split.seed = seed;
  auto pick = [&](const std::string& id, std::vector<PairedSample>& out) {
    auto pool = by_subject[id];
    if (static_cast<int>(pool.size()) < pairs_per_subject)
      throw ProtocolError("data", "subject '" + id + "' has " + std::to_string(pool.size()) + " pairs, need " +
                                      std::to_string(pairs_per_subject));
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
    rng.shuffle(pool.begin(), pool.end());
    // Interleave poses: rank each sample by how many of its pose came before it.
    std::map<PoseTag, int> seen;
    std::vector<std::pair<int, std::size_t>> rank;
    for (std::size_t i = 0; i < pool.size(); ++i) rank.emplace_back(seen[pool[i].pose]++, i);
    std::stable_sort(rank.begin(), rank.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<PairedSample> chosen;
    for (int i = 0; i < pairs_per_subject; ++i) chosen.push_back(pool[rank[static_cast<std::size_t>(i)].second]);
    std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
    out.insert(out.end(), chosen.begin(), chosen.end());
  };
  for (int i = 0; i < n_train_subjects; ++i) split.train_subjects.push_back(subjects[static_cast<std::size_t>(i)]);
  for (int i = n_train_subjects; i < need; ++i) split.test_subjects.push_back(subjects[static_cast<std::size_t>(i)]);
  std::sort(split.train_subjects.begin(), split.train_subjects.end());
  std::sort(split.test_subjects.begin(), split.test_subjects.end());
  for (const auto& id : split.train_subjects) pick(id, split.train);
  for (const auto& id : split.test_subjects) pick(id, split.test);
  return split;
}

inline bool subjects_disjoint(const ProtocolSplit& s) {
  std::set<std::string> train(s.train_subjects.begin(), s.train_subjects.end());
  for (const auto& t : s.test_subjects)
    if (train.count(t)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Synthetic VIS/NIR proxy data

struct SyntheticSpec {
  int n_subjects = 8;
  int images_per_subject = 16;
  int resolution = 64;
  int jitter_px = 3;
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_subjects < 1 || images_per_subject < 1 || resolution < 8)
      throw ConfigError("data", "synthetic counts must be >= 1 and resolution >= 8");
    if (jitter_px < 0) throw ConfigError("data", "jitter_px must be >= 0");
    if (!(noise_sigma >= 0)) throw ConfigError("data", "noise_sigma must be >= 0");
  }
};

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
  return {{"n_subjects", s.n_subjects}, {"images_per_subject", s.images_per_subject}, {"resolution", s.resolution},
          {"jitter_px", s.jitter_px},   {"noise_sigma", s.noise_sigma},               {"seed", s.seed}};
}

/// Pixel-wise VIS -> NIR intensity: clip((0.6 r + 0.3 g + 0.1 b)^0.8, 0, 1).
inline double spectral_proxy_transform(double r, double g, double b) {
  for (double v : {r, g, b})
    if (!(v >= 0.0 && v <= 1.0)) throw RangeError("data", "proxy transform input outside [0, 1]");
  return std::clamp(std::pow(0.6 * r + 0.3 * g + 0.1 * b, 0.8), 0.0, 1.0);
}

/// Radial fall-off 1 - 0.3 (d / d_max)^2 measured from the image centre.
inline double vignette_factor(int x, int y, int width, int height) {
  const double cx = width / 2.0, cy = height / 2.0;
  const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
  const double d2 = dx * dx + dy * dy;
  const double dmax2 = cx * cx + cy * cy;
  return 1.0 - 0.3 * d2 / dmax2;
}

/// Image-level proxy: pixel transform, vignette, additive noise, then an
/// integer translation by (shift_x, shift_y) with edge replication.
inline Image8 nir_from_vis(const Image8& vis, double noise_sigma, int shift_x, int shift_y, Rng& rng) {
  if (vis.channels != 3) throw ShapeError("data", "VIS image must have 3 channels");
  const int w = vis.width, h = vis.height;
  std::vector<std::uint8_t> plain(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * w + x) * 3;
      double n = spectral_proxy_transform(vis.pixels[o] / 255.0, vis.pixels[o + 1] / 255.0, vis.pixels[o + 2] / 255.0);
      n *= vignette_factor(x, y, w, h);
      if (noise_sigma > 0) n += rng.normal(0.0, noise_sigma);
      plain[static_cast<std::size_t>(y) * w + x] = to_byte(n);
    }
  Image8 out{w, h, 1, std::vector<std::uint8_t>(plain.size())};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x - shift_x, 0, w - 1);
      const int sy = std::clamp(y - shift_y, 0, h - 1);
      out.pixels[static_cast<std::size_t>(y) * w + x] = plain[static_cast<std::size_t>(sy) * w + sx];
    }
  return out;
}

/// Fixed per-subject face parameterization.
struct FaceIdentity {
  std::array<double, 3> skin, hair, iris, lips, background;
  double face_w, face_h, face_cy;
  double eye_sep, eye_y, eye_r;
  double brow_gap, brow_thick, brow_tilt;
  double nose_len, nose_w;
  double mouth_y, mouth_w, mouth_h;
  double hairline;
  bool glasses, beard;
  double mole_x, mole_y;  // mole_x < 0: none
};

inline FaceIdentity make_identity(std::uint64_t seed, int subject) {
  Rng r(Rng::derive(seed, 0x1D, static_cast<std::uint64_t>(subject)));
  FaceIdentity f{};
  const double tone = r.uniform(0.35, 0.95);
  f.skin = {tone, tone * r.uniform(0.62, 0.82), tone * r.uniform(0.45, 0.7)};
  const double hv = r.uniform(0.05, 0.7);
  f.hair = {hv, hv * r.uniform(0.6, 0.9), hv * r.uniform(0.3, 0.8)};
  f.iris = {r.uniform(0.05, 0.5), r.uniform(0.1, 0.5), r.uniform(0.05, 0.6)};
  f.lips = {r.uniform(0.5, 0.85), r.uniform(0.2, 0.4), r.uniform(0.25, 0.45)};
  f.background = {r.uniform(0.2, 0.9), r.uniform(0.2, 0.9), r.uniform(0.2, 0.9)};
  f.face_w = r.uniform(0.26, 0.36);
  f.face_h = r.uniform(0.34, 0.44);
  f.face_cy = r.uniform(0.5, 0.56);
  f.eye_sep = r.uniform(0.13, 0.22);
  f.eye_y = r.uniform(0.38, 0.47);
  f.eye_r = r.uniform(0.03, 0.055);
  f.brow_gap = r.uniform(0.05, 0.09);
  f.brow_thick = r.uniform(0.012, 0.03);
  f.brow_tilt = r.uniform(-0.03, 0.03);
  f.nose_len = r.uniform(0.07, 0.15);
  f.nose_w = r.uniform(0.025, 0.05);
  f.mouth_y = r.uniform(0.66, 0.75);
  f.mouth_w = r.uniform(0.08, 0.16);
  f.mouth_h = r.uniform(0.015, 0.035);
  f.hairline = r.uniform(0.08, 0.22);
  f.glasses = r.bernoulli(0.3);
  f.beard = r.bernoulli(0.25);
  if (r.bernoulli(0.5)) {
    f.mole_x = r.uniform(0.35, 0.65);
    f.mole_y = r.uniform(0.5, 0.7);
  } else {
    f.mole_x = f.mole_y = -1;
  }
  return f;
}

namespace detail {

// Soft coverage of an axis-aligned ellipse; `px` = one pixel in normalized units.
inline double ellipse_cover(double u, double v, double cx, double cy, double rx, double ry, double px) {
  const double q = std::sqrt(((u - cx) / rx) * ((u - cx) / rx) + ((v - cy) / ry) * ((v - cy) / ry));
  const double dist = (q - 1.0) * std::min(rx, ry);
  return std::clamp(0.5 - dist / px, 0.0, 1.0);
}

inline void blend(std::array<double, 3>& dst, const std::array<double, 3>& src, double a) {
  for (int c = 0; c < 3; ++c) dst[c] = dst[c] * (1 - a) + src[c] * a;
}

}  // namespace detail

/// Renders one pre-aligned RGB face. Pose moves and squashes the features;
/// `image_rng` supplies the per-capture variation (small shift, lighting).
inline Image8 render_vis_face(const FaceIdentity& id, PoseTag pose, int resolution, Rng& image_rng) {
  double fdx = 0, fdy = 0, squash = 1.0, smile = 0.0, eye_open = 1.0, mouth_scale = 1.0;
  switch (pose) {
    case PoseTag::NeutralFrontal: break;
    case PoseTag::TiltUp: fdy = -0.035; squash = 0.97; break;
    case PoseTag::TiltDown: fdy = 0.035; squash = 0.97; break;
    case PoseTag::LeftRotation: fdx = -0.05; squash = 0.92; break;
    case PoseTag::RightRotation: fdx = 0.05; squash = 0.92; break;
    case PoseTag::Blank: eye_open = 0.55; mouth_scale = 0.8; break;
    case PoseTag::Smile: smile = 1.0; mouth_scale = 1.25; break;
  }
  const double gx = image_rng.uniform(-0.015, 0.015);
  const double gy = image_rng.uniform(-0.015, 0.015);
  const double scale = image_rng.uniform(0.97, 1.03);
  const double light_x = image_rng.uniform(-0.25, 0.25);
  const double light_y = image_rng.uniform(-0.2, 0.2);
  const double light = image_rng.uniform(0.9, 1.1);
  const double px = 1.0 / resolution;

  const double cx = 0.5 + gx, cy = id.face_cy + gy;
  const double fw = id.face_w * squash * scale, fh = id.face_h * scale;
  auto fu = [&](double off) { return cx + fdx + off * squash * scale; };
  auto fv = [&](double y) { return cy + fdy + (y - id.face_cy) * scale; };

  Image8 img{resolution, resolution, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(resolution) * resolution * 3)};
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      const double u = (x + 0.5) * px, v = (y + 0.5) * px;
      std::array<double, 3> col = id.background;
      // Neck and shoulders.
      detail::blend(col, {id.skin[0] * 0.8, id.skin[1] * 0.8, id.skin[2] * 0.8},
                    detail::ellipse_cover(u, v, cx, cy + fh * 1.05, fw * 0.55, fh * 0.6, px));
      // Hair mass behind the head.
      detail::blend(col, id.hair, detail::ellipse_cover(u, v, cx, cy - fh * 0.12, fw * 1.12, fh * 0.98, px));
      // Face with radial shading.
      const double fa = detail::ellipse_cover(u, v, cx + fdx * 0.4, cy, fw, fh, px);
      if (fa > 0) {
        const double ru = (u - cx) / fw, rv = (v - cy) / fh;
        const double shade = 1.0 - 0.18 * (ru * ru + rv * rv);
        std::array<double, 3> skin{id.skin[0] * shade, id.skin[1] * shade, id.skin[2] * shade};
        detail::blend(col, skin, fa);
      }
      // Fringe above the hairline.
      const double top = cy - fh;
      if (v < top + id.hairline * fh * 2.0)
        detail::blend(col, id.hair, fa * std::clamp((top + id.hairline * fh * 2.0 - v) / (2 * px), 0.0, 1.0));
      if (id.beard)
        detail::blend(col, {id.hair[0] * 0.7, id.hair[1] * 0.7, id.hair[2] * 0.7},
                      0.75 * fa * detail::ellipse_cover(u, v, fu(0), fv(id.mouth_y + 0.04), fw * 0.6, fh * 0.3, px) *
                          (v > fv(id.mouth_y - 0.02) ? 1.0 : 0.0));
      for (int side : {-1, 1}) {
        const double ex = fu(side * id.eye_sep);
        const double ey = fv(id.eye_y);
        detail::blend(col, {0.95, 0.95, 0.93}, detail::ellipse_cover(u, v, ex, ey, id.eye_r * 1.3, id.eye_r * 0.75 * eye_open, px));
        detail::blend(col, id.iris, detail::ellipse_cover(u, v, ex, ey, id.eye_r * 0.6, id.eye_r * 0.6 * eye_open, px));
        detail::blend(col, {0.02, 0.02, 0.02}, detail::ellipse_cover(u, v, ex, ey, id.eye_r * 0.25, id.eye_r * 0.25 * eye_open, px));
        const double by = fv(id.eye_y - id.brow_gap) + side * id.brow_tilt * 0.5;
        detail::blend(col, {id.hair[0] * 0.6, id.hair[1] * 0.6, id.hair[2] * 0.6},
                      detail::ellipse_cover(u, v, ex, by, id.eye_r * 1.6, id.brow_thick, px));
        if (id.glasses) {
          const double outer = detail::ellipse_cover(u, v, ex, ey, id.eye_r * 2.1, id.eye_r * 1.7, px);
          const double inner = detail::ellipse_cover(u, v, ex, ey, id.eye_r * 1.8, id.eye_r * 1.4, px);
          detail::blend(col, {0.08, 0.08, 0.1}, std::max(0.0, outer - inner));
        }
      }
      // Nose shadow.
      detail::blend(col, {id.skin[0] * 0.7, id.skin[1] * 0.65, id.skin[2] * 0.6},
                    0.7 * detail::ellipse_cover(u, v, fu(0.01), fv(id.eye_y + id.brow_gap * 0.4 + id.nose_len * 0.7),
                                                id.nose_w, id.nose_len * 0.55, px));
      // Mouth; a smile bends the corners upwards.
      {
        const double mw = id.mouth_w * mouth_scale * squash;
        const double t = (u - fu(0)) / std::max(mw, 1e-6);
        const double bend = smile * 0.03 * t * t;
        detail::blend(col, id.lips, detail::ellipse_cover(u, v + bend, fu(0), fv(id.mouth_y), mw, id.mouth_h, px));
      }
      if (id.mole_x >= 0)
        detail::blend(col, {0.15, 0.1, 0.08}, detail::ellipse_cover(u, v, fu(id.mole_x - 0.5), fv(id.mole_y), 0.012, 0.012, px));
      // Directional illumination.
      const double lit = light * (1.0 + light_x * (u - 0.5) + light_y * (v - 0.5));
      const std::size_t o = (static_cast<std::size_t>(y) * resolution + x) * 3;
      for (int c = 0; c < 3; ++c) img.pixels[o + static_cast<std::size_t>(c)] = to_byte(col[static_cast<std::size_t>(c)] * lit);
    }
  return img;
}

inline std::string subject_name(int s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%03d", s);
  return buf;
}

inline std::string image_stem(PoseTag pose, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%03d", index);
  return to_string(pose) + buf;
}

/// Capture `index` of `subject`: the VIS render and its NIR partner.
struct SyntheticPair {
  Image8 vis, nir;
  PoseTag pose;
};

inline SyntheticPair synthesize_pair(const SyntheticSpec& spec, const FaceIdentity& id, int subject, int index) {
  const PoseTag pose = kAllPoses[static_cast<std::size_t>(index) % kAllPoses.size()];
  Rng rng(Rng::derive(spec.seed, static_cast<std::uint64_t>(subject) + 1, static_cast<std::uint64_t>(index) + 1));
  Image8 vis = render_vis_face(id, pose, spec.resolution, rng);
  const int j = spec.jitter_px;
  const int sx = j > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * j + 1))) - j : 0;
  const int sy = j > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * j + 1))) - j : 0;
  Image8 nir = nir_from_vis(vis, spec.noise_sigma, sx, sy, rng);
  return {std::move(vis), std::move(nir), pose};
}

/// Writes root/{vis|nir}/{subject}/{pose}_{index}.png plus manifest.json and
/// synthetic_spec.json. Output is byte-identical for a fixed spec.
inline std::vector<PairedSample> generate_synthetic_dataset(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("data", "cannot create '" + out_dir.string() + "'");
  std::vector<PairedSample> samples;
  for (int s = 0; s < spec.n_subjects; ++s) {
    const std::string sid = subject_name(s);
    fs::create_directories(out_dir / "vis" / sid, ec);
    fs::create_directories(out_dir / "nir" / sid, ec);
    if (ec) throw IoError("data", "cannot create subject directories under '" + out_dir.string() + "'");
    const FaceIdentity id = make_identity(spec.seed, s);
    for (int i = 0; i < spec.images_per_subject; ++i) {
      SyntheticPair p = synthesize_pair(spec, id, s, i);
      const std::string file = image_stem(p.pose, i) + ".png";
      PairedSample ps{sid, p.pose, out_dir / "vis" / sid / file, out_dir / "nir" / sid / file};
      write_png(ps.vis_path, p.vis);
      write_png(ps.nir_path, p.nir);
      samples.push_back(ps);
    }
  }
  nlohmann::json manifest;
  manifest["synthetic_spec"] = synthetic_spec_to_json(spec);
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : samples)
    manifest["samples"].push_back({{"subject", s.subject_id},
                                   {"pose", to_string(s.pose)},
                                   {"vis", fs::relative(s.vis_path, out_dir).string()},
                                   {"nir", fs::relative(s.nir_path, out_dir).string()}});
  write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  write_text_file(out_dir / "synthetic_spec.json", synthetic_spec_to_json(spec).dump(2) + "\n");
  return samples;
}

/// Scans root/vis/*/*.png and pairs each with root/nir/<same relative path>.
inline std::vector<PairedSample> scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root / "vis") || !fs::is_directory(root / "nir"))
    throw IoError("data", "'" + root.string() + "' has no vis/ and nir/ directories");
  std::vector<PairedSample> out;
  for (const auto& subj : fs::directory_iterator(root / "vis")) {
    if (!subj.is_directory()) continue;
    const std::string sid = subj.path().filename().string();
    for (const auto& f : fs::directory_iterator(subj.path())) {
      if (f.path().extension() != ".png") continue;
      const fs::path nir = root / "nir" / sid / f.path().filename();
      if (!fs::exists(nir)) throw ProtocolError("data", "no NIR partner for '" + f.path().string() + "'");
      const std::string stem = f.path().stem().string();
      const auto cut = stem.rfind('_');
      out.push_back({sid, pose_from_string(stem.substr(0, cut)), f.path(), nir});
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
  return out;
}

// ---------------------------------------------------------------------------
// Loading

enum class Domain { Vis, Nir, Paired };

/// Index-aligned VIS/NIR batch; keys identify the pair of every element.
struct PairedBatch {
  Tensor<float> vis;
  Tensor<float> nir;
  std::vector<std::string> vis_keys;
  std::vector<std::string> nir_keys;
};

/// Decodes a PNG to (1, 3, R, R) in [-1, 1], resizing when needed.
inline Tensor<float> load_image(const fs::path& path, int resolution) {
  Tensor<float> t = image_to_tensor(read_png(path));
  if (t.h() != resolution || t.w() != resolution) t = resize_bilinear(t, resolution, resolution);
  return t;
}

/// Serves batches over a fixed list of samples. Epoch order is a pure
/// function of (seed, epoch), so any batch can be regenerated on resume.
class PairedLoader {
 public:
  PairedLoader(std::vector<PairedSample> samples, int resolution, std::uint64_t seed)
      : samples_(std::move(samples)), resolution_(resolution), seed_(seed), cache_(samples_.size()) {
    if (samples_.empty()) throw ProtocolError("data", "cannot load batches from an empty sample list");
  }

  int size() const { return static_cast<int>(samples_.size()); }
  int resolution() const { return resolution_; }
  const std::vector<PairedSample>& samples() const { return samples_; }

  std::vector<int> epoch_order(int epoch) const {
    std::vector<int> order(samples_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(seed_, 0xE90C, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    return order;
  }

  int batches_per_epoch(int batch_size) const { return (size() + batch_size - 1) / batch_size; }

  /// The `index`-th batch of `epoch`; the last batch of an epoch may be short.
  PairedBatch batch(int epoch, int index, int batch_size, Domain domain = Domain::Paired) {
    const auto order = epoch_order(epoch);
    const int begin = (index % batches_per_epoch(batch_size)) * batch_size;
    const int end = std::min(size(), begin + batch_size);
    std::vector<int> ids(order.begin() + begin, order.begin() + end);
    return gather(ids, domain);
  }

  PairedBatch gather(const std::vector<int>& ids, Domain domain = Domain::Paired) {
    std::vector<Tensor<float>> vis, nir;
    PairedBatch b;
    for (int i : ids) {
      auto& entry = cached(i);
      const auto& s = samples_[static_cast<std::size_t>(i)];
      if (domain != Domain::Nir) {
        vis.push_back(entry.first);
        b.vis_keys.push_back(s.key());
      }
      if (domain != Domain::Vis) {
        nir.push_back(entry.second);
        b.nir_keys.push_back(s.subject_id + "/" + s.nir_path.stem().string());
      }
    }
    if (!vis.empty()) b.vis = concat_batch<float>(vis);
    if (!nir.empty()) b.nir = concat_batch<float>(nir);
    return b;
  }

 private:
  std::pair<Tensor<float>, Tensor<float>>& cached(int i) {
    auto& slot = cache_[static_cast<std::size_t>(i)];
    if (!slot) {
      const auto& s = samples_[static_cast<std::size_t>(i)];
      slot = std::make_pair(load_image(s.vis_path, resolution_), load_image(s.nir_path, resolution_));
    }
    return *slot;
  }

  std::vector<PairedSample> samples_;
  int resolution_;
  std::uint64_t seed_;
  std::vector<std::optional<std::pair<Tensor<float>, Tensor<float>>>> cache_;
};

/// First batch of the seeded order over the training partition.
inline PairedBatch load_batch(const ProtocolSplit& split, Domain domain, int batch_size, std::uint64_t seed,
                              int resolution = 64) {
  if (split.train.empty()) throw ProtocolError("data", "split has no training samples");
  PairedLoader loader(split.train, resolution, seed);
  return loader.batch(0, 0, batch_size, domain);
}

/// All VIS images of `samples` with integer labels per subject, for backbone pretraining.
inline LabeledFaceSet labeled_set_from_samples(const std::vector<PairedSample>& samples, int resolution) {
  LabeledFaceSet ds;
  std::map<std::string, int> label_of;
  for (const auto& s : samples) label_of.emplace(s.subject_id, 0);
  int next = 0;
  for (auto& [_, l] : label_of) l = next++;
  std::vector<Tensor<float>> imgs;
  for (const auto& s : samples) {
    imgs.push_back(load_image(s.vis_path, resolution));
    ds.labels.push_back(label_of[s.subject_id]);
  }
  if (!imgs.empty()) ds.images = concat_batch<float>(imgs);
  ds.n_classes = next;
  return ds;
}

/// In-memory identity set rendered directly (no files): subjects x images VIS faces.
inline LabeledFaceSet render_labeled_set(int subjects, int images_per_subject, int resolution, std::uint64_t seed) {
  LabeledFaceSet ds;
  std::vector<Tensor<float>> imgs;
  for (int s = 0; s < subjects; ++s) {
    const FaceIdentity id = make_identity(seed, s);
    for (int i = 0; i < images_per_subject; ++i) {
      Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(s) + 1, static_cast<std::uint64_t>(i) + 1));
      imgs.push_back(image_to_tensor(render_vis_face(id, kAllPoses[static_cast<std::size_t>(i) % 7], resolution, rng)));
      ds.labels.push_back(s);
    }
  }
  if (!imgs.empty()) ds.images = concat_batch<float>(imgs);
  ds.n_classes = subjects;
  return ds;
}

}  // namespace ffecg
