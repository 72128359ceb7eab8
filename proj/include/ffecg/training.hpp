#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffecg/checkpoint.hpp"
#include "ffecg/data.hpp"
#include "ffecg/discriminator.hpp"
#include "ffecg/generator.hpp"
#include "ffecg/losses.hpp"
#include "ffecg/optim.hpp"
#include "ffecg/serialize.hpp"

namespace ffecg {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 1;
  double learning_rate = 2e-4;
  double decay_start_fraction = 0.5;
  LossWeights loss_weights;
  int image_pool_size = 50;
  std::uint64_t seed = 0;
  int resolution = 64;
  int freeze_ffe_epochs = 0;
  int steps_per_epoch = 0;   // 0: one pass over the training pairs
  int checkpoint_every = 0;  // steps; 0: at the end of every epoch
  double beta1 = 0.5;
  double beta2 = 0.999;

  void validate() const {
    if (epochs < 1) throw ConfigError("training", "epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("training", "batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("training", "learning_rate must be > 0");
    if (!(decay_start_fraction >= 0 && decay_start_fraction <= 1))
      throw ConfigError("training", "decay_start_fraction must lie in [0, 1]");
    if (image_pool_size < 0) throw ConfigError("training", "image_pool_size must be >= 0");
    if (resolution < 4 || resolution % 4 != 0) throw ConfigError("training", "resolution must be a positive multiple of 4");
    if (freeze_ffe_epochs < 0 || steps_per_epoch < 0 || checkpoint_every < 0)
      throw ConfigError("training", "freeze_ffe_epochs, steps_per_epoch and checkpoint_every must be >= 0");
    loss_weights.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, learning_rate, decay_start_fraction,
                                                loss_weights, image_pool_size, seed, resolution, freeze_ffe_epochs,
                                                steps_per_epoch, checkpoint_every, beta1, beta2)

/// Learning rate after `progress` epochs: constant until
/// decay_start_fraction * epochs, then linear down to 0 at `epochs`.
inline double learning_rate_at(const TrainConfig& c, double progress) {
  const double start = c.decay_start_fraction * c.epochs;
  if (progress <= start || c.epochs <= start) return c.learning_rate;
  return c.learning_rate * std::max(0.0, (c.epochs - progress) / (c.epochs - start));
}

/// History of generated images shown to the discriminators.
class ImagePool {
 public:
  explicit ImagePool(int capacity = 0) : capacity_(capacity) {}

  /// Per image: while filling, store and return the fresh image; once full,
  /// with probability 1/2 return a stored image and keep the fresh one in its
  /// place, otherwise return the fresh image.
  Tensor<float> query(const Tensor<float>& fresh, Rng& rng) {
    if (capacity_ == 0) return fresh;
    std::vector<Tensor<float>> out;
    for (int i = 0; i < fresh.n(); ++i) {
      Tensor<float> img = fresh.batch_slice(i, i + 1);
      if (static_cast<int>(images_.size()) < capacity_) {
        images_.push_back(img);
        out.push_back(std::move(img));
      } else if (rng.uniform() < 0.5) {
        const auto j = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(capacity_)));
        out.push_back(images_[j]);
        images_[j] = std::move(img);
      } else {
        out.push_back(std::move(img));
      }
    }
    return concat_batch<float>(out);
  }

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(images_.size()); }
  std::vector<Tensor<float>>& images() { return images_; }
  const std::vector<Tensor<float>>& images() const { return images_; }

 private:
  int capacity_;
  std::vector<Tensor<float>> images_;
};

/// The two mappings and their discriminators.
struct CycleModel {
  Generator<float> g;  // VIS -> NIR
  Generator<float> f;  // NIR -> VIS
  DiscriminatorConfig d_config;
  ParameterSet<float> d_v;
  ParameterSet<float> d_n;
};

struct TrainState {
  TrainConfig config;
  CycleModel model;
  Adam<float> gen_opt;
  Adam<float> disc_opt;
  ImagePool pool_nir;
  ImagePool pool_vis;
  Rng rng;
  long long step = 0;  // completed steps
  double current_lr = 0.0;
  bool encoder_frozen = false;
  std::vector<std::string> train_subjects;
};

/// Fresh state. G and F each get their own copy of `pretrained_ffe` when
/// the generator uses the FFE encoder.
inline TrainState make_train_state(const TrainConfig& tc, const GeneratorConfig& gc, const FFEConfig& fc,
                                   const DiscriminatorConfig& dc, const ParameterSet<float>* pretrained_ffe = nullptr) {
  tc.validate();
  gc.validate();
  dc.validate();
  if (gc.encoder == EncoderKind::Ffe) fc.validate();
  TrainState s{tc, {}, Adam<float>(tc.beta1, tc.beta2), Adam<float>(tc.beta1, tc.beta2),
               ImagePool(tc.image_pool_size), ImagePool(tc.image_pool_size), Rng(tc.seed), 0, tc.learning_rate, false, {}};
  Rng init_rng(Rng::derive(tc.seed, 0x1417));
  s.model.g = init_generator<float>(gc, fc, init_rng, pretrained_ffe);
  s.model.f = init_generator<float>(gc, fc, init_rng, pretrained_ffe);
  s.model.d_config = dc;
  s.model.d_v = init_discriminator<float>(dc, init_rng);
  s.model.d_n = init_discriminator<float>(dc, init_rng);
  s.gen_opt.track(s.model.g.encoder, "G/enc/");
  s.gen_opt.track(s.model.g.body, "G/body/");
  s.gen_opt.track(s.model.f.encoder, "F/enc/");
  s.gen_opt.track(s.model.f.body, "F/body/");
  s.disc_opt.track(s.model.d_v, "DV/");
  s.disc_opt.track(s.model.d_n, "DN/");
  return s;
}

namespace detail {

inline void require_finite(const Var<float>& v, const char* term) {
  const double x = v.item();
  if (!std::isfinite(x)) throw DivergenceError(term, "value " + std::to_string(x));
}

// Runs one loss term; a non-finite input reported by the loss becomes a
// divergence of that term.
template <class Fn>
Var<float> term(const char* name, Fn&& fn) {
  try {
    Var<float> v = fn();
    require_finite(v, name);
    return v;
  } catch (const NumericError& e) {
    throw DivergenceError(name, e.what());
  }
}

inline void check_paired(const PairedBatch& b) {
  if (b.vis.empty() || b.nir.empty()) throw ProtocolError("training", "training batch must hold both domains");
  if (b.vis.shape() != b.nir.shape())
    throw ShapeError("training", "VIS batch " + shape_str(b.vis.shape()) + " vs NIR batch " + shape_str(b.nir.shape()));
  if (b.vis_keys.size() != b.nir_keys.size() || static_cast<int>(b.vis_keys.size()) != b.vis.n())
    throw ProtocolError("training", "batch is not index-paired");
  for (std::size_t i = 0; i < b.vis_keys.size(); ++i)
    if (b.vis_keys[i] != b.nir_keys[i])
      throw ProtocolError("training", "batch element " + std::to_string(i) + " is unpaired");
}

}  // namespace detail

/// One generator update (G, F and their encoders against the weighted
/// objective) followed by one update of both discriminators on pooled fakes.
inline LossRecord train_step(const PairedBatch& batch, TrainState& s) {
  detail::check_paired(batch);
  auto& m = s.model;
  const double lr = s.current_lr;

  m.d_v.set_requires_grad(false);
  m.d_n.set_requires_grad(false);
  set_trainable(m.g, true, !s.encoder_frozen);
  set_trainable(m.f, true, !s.encoder_frozen);

  Var<float> vis(batch.vis), nir(batch.nir);
  LossRecord rec;
  Tensor<float> fake_nir_value, fake_vis_value;
  {
    Var<float> fake_nir = generator_forward(vis, m.g);
    Var<float> rec_vis = generator_forward(fake_nir, m.f);
    Var<float> fake_vis = generator_forward(nir, m.f);
    Var<float> rec_nir = generator_forward(fake_vis, m.g);
    Var<float> adv_g =
        detail::term("adv_g", [&] { return losses::lsgan_generator(discriminator_forward(fake_nir, m.d_config, m.d_n)); });
    Var<float> adv_f =
        detail::term("adv_f", [&] { return losses::lsgan_generator(discriminator_forward(fake_vis, m.d_config, m.d_v)); });
    Var<float> cyc = detail::term("cyc", [&] { return losses::cycle(vis, rec_vis, nir, rec_nir); });
    Var<float> pc = detail::term("pc", [&] {
      return losses::pixel_consistency(fake_nir, nir, fake_vis, vis, std::span<const std::string>(batch.vis_keys),
                                       std::span<const std::string>(batch.nir_keys));
    });
    Var<float> total = detail::term("total", [&] { return losses::total(adv_g, adv_f, cyc, pc, s.config.loss_weights); });
    s.gen_opt.zero_grad();
    backward(total);
    s.gen_opt.step(lr);
    rec.adv_g = adv_g.item();
    rec.adv_f = adv_f.item();
    rec.cyc = cyc.item();
    rec.pc = pc.item();
    rec.total = total.item();
    fake_nir_value = fake_nir.value();
    fake_vis_value = fake_vis.value();
  }

  set_trainable(m.g, false, false);
  set_trainable(m.f, false, false);
  m.d_v.set_requires_grad(true);
  m.d_n.set_requires_grad(true);
  {
    Var<float> pooled_nir(s.pool_nir.query(fake_nir_value, s.rng));
    Var<float> pooled_vis(s.pool_vis.query(fake_vis_value, s.rng));
    Var<float> d_n = detail::term("d_n", [&] {
      return losses::lsgan_discriminator(discriminator_forward(nir, m.d_config, m.d_n),
                                         discriminator_forward(pooled_nir, m.d_config, m.d_n));
    });
    Var<float> d_v = detail::term("d_v", [&] {
      return losses::lsgan_discriminator(discriminator_forward(vis, m.d_config, m.d_v),
                                         discriminator_forward(pooled_vis, m.d_config, m.d_v));
    });
    s.disc_opt.zero_grad();
    backward(ops::weighted_sum<float>({d_n, d_v}, {1.0f, 1.0f}));
    s.disc_opt.step(lr);
    rec.d_n = d_n.item();
    rec.d_v = d_v.item();
  }
  ++s.step;
  return rec;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline nlohmann::json loss_record_to_json(const LossRecord& r) {
  return {{"adv_g", r.adv_g}, {"adv_f", r.adv_f}, {"d_v", r.d_v}, {"d_n", r.d_n},
          {"cyc", r.cyc},     {"pc", r.pc},       {"total", r.total}};
}

inline void save_train_state(const std::filesystem::path& path, const TrainState& s) {
  CheckpointWriter w;
  auto& meta = w.meta();
  meta["kind"] = "cycle_model";
  meta["step"] = s.step;
  meta["train_config"] = s.config;
  meta["generator_config"] = s.model.g.config;
  meta["ffe_config"] = s.model.g.ffe_config;
  meta["discriminator_config"] = s.model.d_config;
  meta["train_subjects"] = s.train_subjects;
  meta["rng_state"] = s.rng.state();
  meta["gen_opt_steps"] = s.gen_opt.steps();
  meta["disc_opt_steps"] = s.disc_opt.steps();
  meta["pool_nir_size"] = s.pool_nir.size();
  meta["pool_vis_size"] = s.pool_vis.size();
  w.add_parameters("G/enc/", s.model.g.encoder);
  w.add_parameters("G/body/", s.model.g.body);
  w.add_parameters("F/enc/", s.model.f.encoder);
  w.add_parameters("F/body/", s.model.f.body);
  w.add_parameters("DV/", s.model.d_v);
  w.add_parameters("DN/", s.model.d_n);
  for (const auto* opt : {&s.gen_opt, &s.disc_opt}) {
    const std::string p = opt == &s.gen_opt ? "adam/gen/" : "adam/disc/";
    for (const auto& slot : opt->slots()) {
      w.add(p + "m/" + slot.name, slot.m);
      w.add(p + "v/" + slot.name, slot.v);
    }
  }
  for (std::size_t i = 0; i < s.pool_nir.images().size(); ++i) w.add("pool/nir/" + std::to_string(i), s.pool_nir.images()[i]);
  for (std::size_t i = 0; i < s.pool_vis.images().size(); ++i) w.add("pool/vis/" + std::to_string(i), s.pool_vis.images()[i]);
  w.write(path);
}

/// Rebuilds a TrainState saved by save_train_state, bit-identical.
inline TrainState load_train_state(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::read(path);
  const auto& meta = ck.meta();
  if (meta.value("kind", "") != "cycle_model") throw IoError("checkpoint", "'" + path.string() + "' is not a model checkpoint");
  TrainState s;
  try {
    s = make_train_state(meta.at("train_config").get<TrainConfig>(), meta.at("generator_config").get<GeneratorConfig>(),
                         meta.at("ffe_config").get<FFEConfig>(), meta.at("discriminator_config").get<DiscriminatorConfig>());
    s.step = meta.at("step").get<long long>();
    s.train_subjects = meta.at("train_subjects").get<std::vector<std::string>>();
    s.rng.set_state(meta.at("rng_state").get<std::string>());
    s.gen_opt.set_steps(meta.at("gen_opt_steps").get<long long>());
    s.disc_opt.set_steps(meta.at("disc_opt_steps").get<long long>());
    ck.load_parameters("G/enc/", s.model.g.encoder);
    ck.load_parameters("G/body/", s.model.g.body);
    ck.load_parameters("F/enc/", s.model.f.encoder);
    ck.load_parameters("F/body/", s.model.f.body);
    ck.load_parameters("DV/", s.model.d_v);
    ck.load_parameters("DN/", s.model.d_n);
    for (auto* opt : {&s.gen_opt, &s.disc_opt}) {
      const std::string p = opt == &s.gen_opt ? "adam/gen/" : "adam/disc/";
      for (auto& slot : opt->slots()) {
        slot.m = ck.tensor<float>(p + "m/" + slot.name);
        slot.v = ck.tensor<float>(p + "v/" + slot.name);
      }
    }
    for (int i = 0; i < meta.at("pool_nir_size").get<int>(); ++i)
      s.pool_nir.images().push_back(ck.tensor<float>("pool/nir/" + std::to_string(i)));
    for (int i = 0; i < meta.at("pool_vis_size").get<int>(); ++i)
      s.pool_vis.images().push_back(ck.tensor<float>("pool/vis/" + std::to_string(i)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint", "incomplete metadata in '" + path.string() + "': " + e.what());
  }
  return s;
}

/// Stand-alone backbone checkpoint (pretraining output).
inline void save_ffe_checkpoint(const std::filesystem::path& path, const FFEConfig& cfg, const ParameterSet<float>& ps,
                                const nlohmann::json& extra = nlohmann::json::object()) {
  CheckpointWriter w;
  w.meta() = extra;
  w.meta()["kind"] = "ffe";
  w.meta()["ffe_config"] = cfg;
  w.add_parameters("ffe/", ps);
  w.write(path);
}

inline std::pair<FFEConfig, ParameterSet<float>> load_ffe_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::read(path);
  if (ck.meta().value("kind", "") != "ffe") throw IoError("checkpoint", "'" + path.string() + "' is not a backbone checkpoint");
  FFEConfig cfg;
  try {
    cfg = ck.meta().at("ffe_config").get<FFEConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint", "bad backbone metadata in '" + path.string() + "': " + e.what());
  }
  Rng rng(0);
  ParameterSet<float> ps = init_ffe<float>(cfg, rng);
  ck.load_parameters("ffe/", ps);
  return {cfg, std::move(ps)};
}

// ---------------------------------------------------------------------------
// Loop

struct TrainLoopOptions {
  std::filesystem::path out_dir;
  // Called after every step with (1-based step, record).
  std::function<void(long long, const LossRecord&)> on_step;
  // Stop after this many total steps (0: run the full schedule). Used to
  // interrupt a run, e.g. to test resumption.
  long long stop_after = 0;
};

struct TrainLoopResult {
  std::filesystem::path final_checkpoint;
  long long steps = 0;
  std::vector<LossRecord> records;  // this invocation only
};

inline int steps_per_epoch(const TrainConfig& c, int n_train_pairs) {
  return c.steps_per_epoch > 0 ? c.steps_per_epoch : (n_train_pairs + c.batch_size - 1) / c.batch_size;
}

namespace detail {

// Keeps only log lines with step <= `last_step` (used when resuming).
inline void truncate_log(const std::filesystem::path& log, long long last_step) {
  if (!std::filesystem::exists(log)) return;
  std::ifstream is(log);
  std::string line, kept;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.value("step", 0LL) <= last_step) kept += line + "\n";
  }
  is.close();
  write_text_file(log, kept);
}

}  // namespace detail

/// Runs (or continues) the schedule for `state` over the split's training
/// pairs. Writes <out_dir>/checkpoint_latest.ckpt periodically,
/// <out_dir>/checkpoint_final.ckpt at the end and appends one JSON record
/// per step to <out_dir>/train_log.jsonl. On divergence the exception
/// propagates and the latest checkpoint on disk is the last good one.
inline TrainLoopResult train_loop(const ProtocolSplit& split, TrainState& state, const TrainLoopOptions& opt) {
  const auto& cfg = state.config;
  if (split.train.empty()) throw ProtocolError("training", "split has no training pairs");
  if (!subjects_disjoint(split)) throw ProtocolError("training", "split is not subject-disjoint");
  state.train_subjects = split.train_subjects;
  std::filesystem::create_directories(opt.out_dir);
  const auto latest = opt.out_dir / "checkpoint_latest.ckpt";
  const auto log_path = opt.out_dir / "train_log.jsonl";
  detail::truncate_log(log_path, state.step);

  PairedLoader loader(split.train, cfg.resolution, cfg.seed);
  const int spe = steps_per_epoch(cfg, loader.size());
  const long long total_steps = static_cast<long long>(spe) * cfg.epochs;
  const long long end = opt.stop_after > 0 ? std::min(total_steps, opt.stop_after) : total_steps;
  const long long every = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : spe;

  if (state.step == 0) save_train_state(latest, state);
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("training", "cannot open '" + log_path.string() + "'");
  const auto t0 = std::chrono::steady_clock::now();
  TrainLoopResult result;
  while (state.step < end) {
    const long long t = state.step;
    const int epoch = static_cast<int>(t / spe);
    const int index = static_cast<int>(t % spe);
    const double progress = static_cast<double>(t) / spe;
    state.current_lr = learning_rate_at(cfg, progress);
    state.encoder_frozen = progress < cfg.freeze_ffe_epochs;
    const PairedBatch batch = loader.batch(epoch, index, cfg.batch_size);
    const LossRecord rec = train_step(batch, state);
    nlohmann::json line = loss_record_to_json(rec);
    line["step"] = state.step;
    line["epoch"] = epoch;
    line["lr"] = state.current_lr;
    line["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << line.dump() << '\n';
    log.flush();
    result.records.push_back(rec);
    if (opt.on_step) opt.on_step(state.step, rec);
    if (state.step % every == 0 || state.step == end) save_train_state(latest, state);
  }
  result.steps = state.step;
  result.final_checkpoint = latest;
  if (state.step == total_steps) {
    result.final_checkpoint = opt.out_dir / "checkpoint_final.ckpt";
    save_train_state(result.final_checkpoint, state);
  }
  return result;
}

}  // namespace ffecg
