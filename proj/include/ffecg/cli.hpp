#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ffecg/config.hpp"
#include "ffecg/evaluation.hpp"
#include "ffecg/training.hpp"

namespace ffecg::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kDivergence = 4, kProtocolViolation = 5 };

// A command-line flag and the configuration key it sets.
struct FlagSpec {
  std::string flag;
  std::string key;
  std::string help;
  bool is_switch = false;
};

inline const std::map<std::string, std::vector<FlagSpec>>& verb_flags() {
  static const std::map<std::string, std::vector<FlagSpec>> table{
      {"synth-data",
       {{"--out", "data.root", "output dataset directory"},
        {"--seed", "data.seed", "generator seed"},
        {"--subjects", "data.n_subjects", "number of identities"},
        {"--images-per-subject", "data.images_per_subject", "captures per identity"},
        {"--resolution", "data.resolution", "image side in pixels"},
        {"--jitter", "data.jitter_px", "max VIS/NIR misalignment in pixels"},
        {"--noise", "data.noise_sigma", "NIR noise standard deviation"},
        {"--train-subjects", "data.n_train_subjects", "subjects in the training partition"},
        {"--test-subjects", "data.n_test_subjects", "subjects in the test partition"},
        {"--pairs-per-subject", "data.pairs_per_subject", "pairs kept per subject"},
        {"--split-seed", "data.split_seed", "split seed"}}},
      {"pretrain-ffe",
       {{"--out", "run.out", "output checkpoint file"},
        {"--data", "data.root", "pretrain on the VIS training images of this dataset instead of rendered faces"},
        {"--epochs", "ffe.pretrain_epochs", "pretraining epochs"},
        {"--seed", "ffe.pretrain_seed", "seed (also selects rendered identities)"},
        {"--resolution", "ffe.input_resolution", "backbone input resolution"}}},
      {"train",
       {{"--data", "data.root", "dataset directory"},
        {"--split", "data.split_file", "split file (default <data>/split.json)"},
        {"--out", "run.out", "run directory"},
        {"--ffe", "ffe.pretrained_checkpoint", "pretrained backbone checkpoint"},
        {"--ablation", "run.ablation", "basic | basic-pc | ffe-pc"},
        {"--epochs", "train.epochs", "training epochs"},
        {"--seed", "train.seed", "training seed"},
        {"--resolution", "train.resolution", "training resolution"},
        {"--resume", "run.resume", "continue from <out>/checkpoint_latest.ckpt", true}}},
      {"translate",
       {{"--checkpoint", "run.checkpoint", "model checkpoint"},
        {"--input", "run.input", "directory of VIS images"},
        {"--out", "run.out", "output directory for fake NIR images"},
        {"--grid", "run.grid", "also write side-by-side VIS | fake NIR images", true}}},
      {"evaluate",
       {{"--checkpoint", "run.checkpoint", "model checkpoint"},
        {"--ffe", "ffe.pretrained_checkpoint", "backbone checkpoint used as matcher"},
        {"--data", "data.root", "dataset directory"},
        {"--split", "data.split_file", "split file (default <data>/split.json)"},
        {"--report", "run.report", "report file (default <checkpoint dir>/eval_report.json)"},
        {"--protocol", "run.protocol", "protocol name recorded in the report"}}},
  };
  return table;
}

inline std::string documented_keys() {
  return "Configuration keys (INI sections, shown with defaults):\n\n" + to_ini(to_document(AppConfig{}));
}

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("cli", what);
}

inline std::vector<PairedSample> samples_for(const AppConfig& c) { return scan_dataset(c.data.root); }

inline fs::path split_path(const AppConfig& c) {
  return c.data.split_file.empty() ? fs::path(c.data.root) / "split.json" : fs::path(c.data.split_file);
}

// Split file paths are stored as given when the data was synthesized;
// re-anchor them under the current dataset root when it moved.
inline ProtocolSplit load_split_for(const AppConfig& c) {
  require(!c.data.root.empty() || !c.data.split_file.empty(), "data.root (--data) is required");
  ProtocolSplit s = load_split(split_path(c));
  if (!c.data.root.empty()) {
    const fs::path root(c.data.root);
    for (auto* part : {&s.train, &s.test})
      for (auto& p : *part) {
        const auto file = p.vis_path.filename();
        p.vis_path = root / "vis" / p.subject_id / file;
        p.nir_path = root / "nir" / p.subject_id / file;
      }
  }
  return s;
}

inline int cmd_synth(const AppConfig& c, std::ostream& out) {
  require(!c.data.root.empty(), "data.root (--out) is required");
  const auto samples = generate_synthetic_dataset(c.data.synthetic, c.data.root);
  out << "data: wrote " << samples.size() << " pairs to " << c.data.root << "\n";
  if (c.data.n_train_subjects + c.data.n_test_subjects > 0) {
    const ProtocolSplit split = make_split(samples, c.data.n_train_subjects, c.data.n_test_subjects,
                                           c.data.pairs_per_subject, c.data.split_seed);
    save_split(split_path(c), split);
    out << "data: split " << split.train_subjects.size() << "/" << split.test_subjects.size() << " subjects, "
        << split.train.size() << " train pairs, " << split.test.size() << " test pairs -> " << split_path(c).string()
        << "\n";
  }
  return kOk;
}

inline int cmd_pretrain(const AppConfig& c, std::ostream& out) {
  require(!c.run.out.empty(), "run.out (--out) is required");
  LabeledFaceSet ds;
  if (!c.data.root.empty())
    ds = labeled_set_from_samples(load_split_for(c).train, c.ffe.input_resolution);
  else
    ds = render_labeled_set(c.pretrain.pretrain_subjects, c.pretrain.pretrain_images_per_subject, c.ffe.input_resolution,
                            c.pretrain.pretrain_seed);
  PretrainOptions opt{c.pretrain.pretrain_batch_size, c.pretrain.pretrain_learning_rate, c.pretrain.gray_probability};
  const PretrainResult r = pretrain_ffe(ds, c.ffe, c.pretrain.pretrain_epochs, c.pretrain.pretrain_seed, opt);
  if (!std::isfinite(r.final_loss)) throw DivergenceError("classification", "pretraining diverged");
  fs::path path(c.run.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_ffe_checkpoint(path, c.ffe, r.params,
                      {{"train_accuracy", r.train_accuracy}, {"epoch_loss", r.epoch_loss}, {"identities", ds.n_classes}});
  out << "backbone: " << ds.n_classes << " identities, final loss " << r.final_loss << ", train accuracy "
      << r.train_accuracy << " -> " << path.string() << "\n";
  return kOk;
}

inline int cmd_train(const AppConfig& c, std::ostream& out) {
  require(!c.run.out.empty(), "run.out (--out) is required");
  const ProtocolSplit split = load_split_for(c);
  const fs::path run_dir(c.run.out);
  const fs::path latest = run_dir / "checkpoint_latest.ckpt";
  TrainState state;
  if (c.run.resume && fs::exists(latest)) {
    state = load_train_state(latest);
    out << "training: resuming at step " << state.step << "\n";
  } else {
    FFEConfig ffe_cfg = c.ffe;
    ParameterSet<float> pretrained;
    const ParameterSet<float>* init = nullptr;
    if (c.generator.encoder == EncoderKind::Ffe) {
      require(!c.pretrain.pretrained_checkpoint.empty(),
              "the ffe encoder needs ffe.pretrained_checkpoint (--ffe); use --ablation basic-pc for a plain encoder");
      std::tie(ffe_cfg, pretrained) = load_ffe_checkpoint(c.pretrain.pretrained_checkpoint);
      init = &pretrained;
    }
    state = make_train_state(c.train, c.generator, ffe_cfg, c.discriminator, init);
  }
  fs::create_directories(run_dir);
  write_text_file(run_dir / "config.ini", to_ini(to_document(c)));
  TrainLoopOptions opt;
  opt.out_dir = run_dir;
  const int spe = steps_per_epoch(state.config, static_cast<int>(split.train.size()));
  opt.on_step = [&out, spe](long long step, const LossRecord& r) {
    if (step % spe == 0)
      out << "training: epoch " << step / spe << " step " << step << " total " << r.total << " cyc " << r.cyc
          << " pc " << r.pc << "\n";
  };
  const TrainLoopResult res = train_loop(split, state, opt);
  out << "training: " << res.steps << " steps -> " << res.final_checkpoint.string() << "\n";
  return kOk;
}

inline std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline int cmd_translate(const AppConfig& c, std::ostream& out) {
  require(!c.run.checkpoint.empty(), "run.checkpoint (--checkpoint) is required");
  require(!c.run.input.empty(), "run.input (--input) is required");
  require(!c.run.out.empty(), "run.out (--out) is required");
  if (!fs::is_directory(c.run.input)) throw IoError("data", "'" + c.run.input + "' is not a directory");
  TrainState state = load_train_state(c.run.checkpoint);
  const int res = state.config.resolution;
  const fs::path in_root(c.run.input), out_root(c.run.out);
  int n = 0;
  for (const auto& file : png_files(in_root)) {
    const Image8 src = read_png(file, 3);
    Tensor<float> x = image_to_tensor(src);
    if (x.h() != res || x.w() != res) x = resize_bilinear(x, res, res);
    Tensor<float> fake;
    {
      NoGradGuard guard;
      fake = generator_forward(Var<float>(x), state.model.g).value();
    }
    const fs::path rel = fs::relative(file, in_root);
    fs::create_directories((out_root / rel).parent_path());
    write_png(out_root / rel, tensor_to_image(fake, 0, true));
    if (c.run.grid) {
      const Image8 left = tensor_to_image(x, 0, false);
      const Image8 right = tensor_to_image(fake, 0, false);
      Image8 grid{2 * res, res, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(2 * res) * res * 3)};
      for (int y = 0; y < res; ++y)
        for (int xx = 0; xx < res; ++xx)
          for (int ch = 0; ch < 3; ++ch) {
            const std::size_t s = (static_cast<std::size_t>(y) * res + xx) * 3 + ch;
            grid.pixels[(static_cast<std::size_t>(y) * 2 * res + xx) * 3 + ch] = left.pixels[s];
            grid.pixels[(static_cast<std::size_t>(y) * 2 * res + res + xx) * 3 + ch] = right.pixels[s];
          }
      auto grid_path = out_root / "grid" / rel;
      fs::create_directories(grid_path.parent_path());
      write_png(grid_path, grid);
    }
    ++n;
  }
  out << "translate: " << n << " images -> " << out_root.string() << "\n";
  return kOk;
}

inline int cmd_evaluate(const AppConfig& c, std::ostream& out) {
  require(!c.run.checkpoint.empty(), "run.checkpoint (--checkpoint) is required");
  require(!c.pretrain.pretrained_checkpoint.empty(), "ffe.pretrained_checkpoint (--ffe) is required as matcher");
  const ProtocolSplit split = load_split_for(c);
  TrainState state = load_train_state(c.run.checkpoint);
  auto [matcher_cfg, matcher] = load_ffe_checkpoint(c.pretrain.pretrained_checkpoint);
  const EvalReport r = evaluate_protocol(split, state.model.g, state.train_subjects, matcher_cfg, matcher,
                                         state.config.resolution, c.run.protocol, state.step);
  const fs::path report = c.run.report.empty() ? fs::path(c.run.checkpoint).parent_path() / "eval_report.json"
                                               : fs::path(c.run.report);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  const std::string text = report_to_json(r).dump(2);
  write_text_file(report, text + "\n");
  out << text << "\n";
  return kOk;
}

}  // namespace detail

/// Runs one command; `args` excludes the program name. Returns the exit status.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cross-spectral face translation: VIS to NIR CycleGAN with an embedded face feature extractor", "ffecg"};
  app.require_subcommand(1);
  app.footer(documented_keys());
  std::string config_path;
  std::vector<std::string> overrides;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  std::map<std::string, CLI::App*> verbs;
  static const std::map<std::string, std::string> descriptions{
      {"synth-data", "generate a synthetic paired VIS/NIR dataset and its protocol split"},
      {"pretrain-ffe", "pretrain the face feature extractor on an identity set"},
      {"train", "train the VIS<->NIR translation model"},
      {"translate", "translate a directory of VIS images to fake NIR"},
      {"evaluate", "verification report (Rank-1, TAR@FAR) on the test partition"}};
  for (const auto& [verb, flags] : verb_flags()) {
    CLI::App* sub = app.add_subcommand(verb, descriptions.at(verb));
    sub->add_option("-c,--config", config_path, "INI configuration file");
    sub->add_option("--set", overrides, "override a key: section.key=value (repeatable)");
    for (const auto& f : flags) {
      const std::string id = verb + f.flag;
      if (f.is_switch)
        sub->add_flag(f.flag, switches[id], f.help + " [" + f.key + "]");
      else
        sub->add_option(f.flag, values[id], f.help + " [" + f.key + "]");
    }
    verbs[verb] = sub;
  }

  std::vector<std::string> argv_store{"ffecg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  std::string verb;
  for (const auto& [name, sub] : verbs)
    if (sub->parsed()) verb = name;

  try {
    nlohmann::json doc = to_document(AppConfig{});
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) {
        err << "cli: configuration file '" << config_path << "' not found\n";
        return kUsage;
      }
      apply_ini(doc, config_path);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    for (const auto& f : verb_flags().at(verb)) {
      const std::string id = verb + f.flag;
      if (f.is_switch) {
        if (switches[id]) set_key(doc, f.key, "true");
      } else if (verbs[verb]->count(f.flag)) {
        set_key(doc, f.key, values[id]);
      }
    }
    AppConfig cfg = from_document(doc);
    apply_ablation(cfg, cfg.run.ablation);
    if (verb == "synth-data") return detail::cmd_synth(cfg, out);
    if (verb == "pretrain-ffe") return detail::cmd_pretrain(cfg, out);
    if (verb == "train") return detail::cmd_train(cfg, out);
    if (verb == "translate") return detail::cmd_translate(cfg, out);
    return detail::cmd_evaluate(cfg, out);
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    err << e.what() << "\n";
    return kDivergence;
  } catch (const ProtocolViolation& e) {
    err << e.what() << "\n";
    return kProtocolViolation;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << verb << ": " << e.what() << "\n";
    return kData;
  }
}

}  // namespace ffecg::cli
