#pragma once

// INI configuration. Every section maps onto a JSON object whose keys and
// value types come from the defaults below; the INI text is converted to
// that shape and then decoded with the regular JSON mappings.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffecg/serialize.hpp"
#include "ffecg/training.hpp"

namespace ffecg {

/// Backbone pretraining settings; they live in the [ffe] section.
struct PretrainSettings {
  int pretrain_epochs = 20;
  int pretrain_batch_size = 16;
  double pretrain_learning_rate = 1e-3;
  double gray_probability = 0.5;
  int pretrain_subjects = 64;
  int pretrain_images_per_subject = 14;
  std::uint64_t pretrain_seed = 1000;
  std::string pretrained_checkpoint;  // used as generator encoder init and as evaluation matcher
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainSettings, pretrain_epochs, pretrain_batch_size,
                                                pretrain_learning_rate, gray_probability, pretrain_subjects,
                                                pretrain_images_per_subject, pretrain_seed, pretrained_checkpoint)

/// Dataset location and protocol split parameters ([data]).
struct DataSettings {
  SyntheticSpec synthetic{24, 14, 64, 3, 0.02, 7};  // flattened into the section
  std::string root;
  std::string split_file;  // default: <root>/split.json
  int n_train_subjects = 16;
  int n_test_subjects = 8;
  int pairs_per_subject = 14;
  std::uint64_t split_seed = 0;
};

/// Per-command paths and switches ([run]).
struct RunSettings {
  std::string out;
  std::string checkpoint;
  std::string input;
  std::string report;
  std::string protocol = "synthetic";
  std::string ablation;  // "", basic, basic-pc, ffe-pc
  bool grid = false;
  bool resume = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunSettings, out, checkpoint, input, report, protocol, ablation, grid,
                                                resume)

struct AppConfig {
  FFEConfig ffe{64};
  PretrainSettings pretrain;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  LossWeights loss;
  TrainConfig train;
  DataSettings data;
  RunSettings run;
};

inline nlohmann::json merge_objects(nlohmann::json a, const nlohmann::json& b) {
  for (auto it = b.begin(); it != b.end(); ++it) a[it.key()] = it.value();
  return a;
}

inline nlohmann::json to_document(const AppConfig& c) {
  nlohmann::json doc;
  doc["ffe"] = merge_objects(nlohmann::json(c.ffe), nlohmann::json(c.pretrain));
  doc["generator"] = c.generator;
  doc["discriminator"] = c.discriminator;
  doc["loss"] = c.loss;
  nlohmann::json train = c.train;
  train.erase("loss_weights");
  doc["train"] = train;
  nlohmann::json data = c.data.synthetic;
  data["root"] = c.data.root;
  data["split_file"] = c.data.split_file;
  data["n_train_subjects"] = c.data.n_train_subjects;
  data["n_test_subjects"] = c.data.n_test_subjects;
  data["pairs_per_subject"] = c.data.pairs_per_subject;
  data["split_seed"] = c.data.split_seed;
  doc["data"] = data;
  doc["run"] = c.run;
  return doc;
}

inline AppConfig from_document(const nlohmann::json& doc) {
  AppConfig c;
  try {
    c.ffe = doc.at("ffe").get<FFEConfig>();
    c.pretrain = doc.at("ffe").get<PretrainSettings>();
    c.generator = doc.at("generator").get<GeneratorConfig>();
    c.discriminator = doc.at("discriminator").get<DiscriminatorConfig>();
    c.loss = doc.at("loss").get<LossWeights>();
    c.train = doc.at("train").get<TrainConfig>();
    c.train.loss_weights = c.loss;
    const auto& d = doc.at("data");
    c.data.synthetic = d.get<SyntheticSpec>();
    c.data.root = d.at("root").get<std::string>();
    c.data.split_file = d.at("split_file").get<std::string>();
    c.data.n_train_subjects = d.at("n_train_subjects").get<int>();
    c.data.n_test_subjects = d.at("n_test_subjects").get<int>();
    c.data.pairs_per_subject = d.at("pairs_per_subject").get<int>();
    c.data.split_seed = d.at("split_seed").get<std::uint64_t>();
    c.run = doc.at("run").get<RunSettings>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config", e.what());
  }
  return c;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

// Parses `text` into a value shaped like `like`.
inline nlohmann::json parse_like(const nlohmann::json& like, const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  auto bad = [&](const std::string& what) { return ConfigError("config", "key '" + key + "': " + what + ", got '" + t + "'"); };
  try {
    std::size_t used = 0;
    switch (like.type()) {
      case nlohmann::json::value_t::boolean:
        if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
        if (t == "false" || t == "0" || t == "no" || t == "off") return false;
        throw bad("expected a boolean");
      case nlohmann::json::value_t::number_unsigned: {
        if (!t.empty() && t[0] == '-') throw bad("expected a non-negative integer");
        const auto v = std::stoull(t, &used);
        if (used != t.size()) throw bad("expected an integer");
        return v;
      }
      case nlohmann::json::value_t::number_integer: {
        const auto v = std::stoll(t, &used);
        if (used != t.size()) throw bad("expected an integer");
        return v;
      }
      case nlohmann::json::value_t::number_float: {
        const double v = std::stod(t, &used);
        if (used != t.size()) throw bad("expected a number");
        return v;
      }
      case nlohmann::json::value_t::string:
        return t;
      case nlohmann::json::value_t::array: {
        nlohmann::json out = nlohmann::json::array();
        if (key == "bottlenecks" || key.ends_with(".bottlenecks")) {
          // "t,c,n,s; t,c,n,s; ..."
          for (const auto& spec : split_list(t, ';')) {
            const auto f = split_list(spec, ',');
            if (f.size() != 4) throw bad("expected 'expansion,channels,repeats,stride' groups separated by ';'");
            out.push_back({{"expansion", std::stoi(f[0])}, {"out_channels", std::stoi(f[1])},
                           {"repeats", std::stoi(f[2])}, {"stride", std::stoi(f[3])}});
          }
          return out;
        }
        const nlohmann::json elem = like.empty() ? nlohmann::json(0) : like.front();
        for (const auto& part : split_list(t, ',')) out.push_back(parse_like(elem, part, key));
        return out;
      }
      default:
        throw bad("unsupported value");
    }
  } catch (const std::invalid_argument&) {
    throw bad("malformed value");
  } catch (const std::out_of_range&) {
    throw bad("value out of range");
  }
}

inline std::string format_value(const nlohmann::json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    const bool groups = key == "bottlenecks";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += groups ? "; " : ",";
      if (groups)
        s += std::to_string(v[i].at("expansion").get<int>()) + "," + std::to_string(v[i].at("out_channels").get<int>()) +
             "," + std::to_string(v[i].at("repeats").get<int>()) + "," + std::to_string(v[i].at("stride").get<int>());
      else
        s += format_value(v[i], key);
    }
    return s;
  }
  return v.dump();
}

}  // namespace detail

/// Sets `section.key` in the document from its text form.
inline void set_key(nlohmann::json& doc, const std::string& dotted, const std::string& text) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ConfigError("config", "override '" + dotted + "' must be section.key");
  const std::string section = dotted.substr(0, dot), key = dotted.substr(dot + 1);
  if (!doc.contains(section)) throw ConfigError("config", "unknown section [" + section + "]");
  auto& sec = doc[section];
  if (!sec.contains(key)) throw ConfigError("config", "unknown key '" + key + "' in section [" + section + "]");
  sec[key] = detail::parse_like(sec[key], text, key);
}

/// Applies an INI file on top of `doc`.
inline void apply_ini(nlohmann::json& doc, const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", "cannot read '" + path.string() + "': " + e.message() + " (line " +
                                    std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config", "key '" + section + "' appears outside any section");
    if (!doc.contains(section)) throw ConfigError("config", "unknown section [" + section + "]");
    for (const auto& [key, value] : body) set_key(doc, section + "." + key, value.data());
  }
}

/// "section.key=value"
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config", "override '" + assignment + "' must be section.key=value");
  set_key(doc, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Writes the document as INI text (all keys, resolved values).
inline std::string to_ini(const nlohmann::json& doc) {
  std::string out;
  for (auto sec = doc.begin(); sec != doc.end(); ++sec) {
    out += "[" + sec.key() + "]\n";
    for (auto kv = sec.value().begin(); kv != sec.value().end(); ++kv)
      out += kv.key() + " = " + detail::format_value(kv.value(), kv.key()) + "\n";
    out += "\n";
  }
  return out;
}

/// Ablation arms: basic = plain encoder, no pixel term; basic-pc = plain
/// encoder with the pixel term; ffe-pc = pretrained-backbone encoder with it.
inline void apply_ablation(AppConfig& c, const std::string& arm) {
  if (arm.empty()) return;
  const double gamma = LossWeights{}.gamma_pc;
  if (arm == "basic") {
    c.generator.encoder = EncoderKind::Basic;
    c.loss.gamma_pc = 0.0;
  } else if (arm == "basic-pc") {
    c.generator.encoder = EncoderKind::Basic;
    c.loss.gamma_pc = gamma;
  } else if (arm == "ffe-pc") {
    c.generator.encoder = EncoderKind::Ffe;
    c.loss.gamma_pc = gamma;
  } else {
    throw ConfigError("config", "unknown ablation arm '" + arm + "' (expected basic, basic-pc or ffe-pc)");
  }
  c.train.loss_weights = c.loss;
}

}  // namespace ffecg
