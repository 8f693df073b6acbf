#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gabornet/errors.hpp"

namespace gabornet {

// Experiment config grammar (one item per line, '#' starts a comment):
//
//   key = value              global setting, keys from config_defaults()
//   [leg NAME]               starts a leg; NAME is a token without spaces
//   label = TEXT             optional display label of the current leg
//   STAGE arg=value ...      appends a stage to the current leg
//
// Stages: pretrain, expand-first-layer, alter-head, fit, retrain,
// gabor-learn, prune, eval. Layer numbers are 1-based conv ordinals.

/// Known global keys and their defaults, in output order.
inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"experiment.name", "experiment"},
      {"model.family", "toy"},  // toy | vgg | resnet
      {"model.c1", "8"},
      {"model.c2", "8"},
      {"model.k1", "7"},
      {"model.k2", "5"},
      {"model.width", "16"},       // resnet stage-1 width
      {"model.width_mult", "1"},   // vgg channel multiplier
      {"model.blocks", "3"},  // resnet blocks per stage
      {"data.source", "textures"},  // textures | cifar10
      {"data.dir", "data/cifar-10-batches-bin"},
      {"data.seed", "1000"},
      {"data.num_classes", "4"},
      {"data.train_per_class", "250"},
      {"data.test_per_class", "250"},
      {"data.image_size", "16"},
      {"data.channels", "3"},
      {"data.noise", "0.5"},
      {"data.wavelength", "4"},
      {"data.wavelength_jitter", "0.15"},
      {"data.augment", "auto"},  // auto: on for cifar10, off for textures
      {"train.epochs", "10"},
      {"train.lr", "0.1"},
      {"train.momentum", "0.9"},
      {"train.weight_decay", "0.0005"},
      {"train.batch_size", "32"},
      {"train.milestones", "0.5,0.75"},
      {"train.lr_gamma", "0.1"},
      {"eval.batch_size", "128"},
      {"prune.tolerance", "0.2"},
      {"prune.mode", "stop"},
      {"fit.workers", "1"},
      {"run.seeds", "1"},
      {"run.out", "runs/experiment"},
      {"run.jobs", "1"},
      {"run.resume", "false"},
      {"run.checkpoints", "true"},
  };
  return d;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline std::vector<std::string> tokens(std::string_view s) {
  std::istringstream is{std::string(s)};
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

}  // namespace detail

inline double parse_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
  return x;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + v + "'");
}

struct StageSpec {
  std::string name;
  std::map<std::string, std::string> args;

  /// Name followed by the arguments in key order.
  std::string canonical() const {
    std::string s = name;
    for (const auto& [k, v] : args) s += " " + k + "=" + v;
    return s;
  }
  bool has(const std::string& k) const { return args.count(k) != 0; }
  std::string arg(const std::string& k, const std::string& fallback) const {
    auto it = args.find(k);
    return it == args.end() ? fallback : it->second;
  }
  std::string required(const std::string& k) const {
    auto it = args.find(k);
    if (it == args.end()) throw ConfigError("stage '" + name + "' needs " + k + "=");
    return it->second;
  }
};

struct LegSpec {
  std::string name;
  std::string label;
  std::vector<StageSpec> stages;

  const std::string& display() const { return label.empty() ? name : label; }
};

struct ExperimentConfig {
  std::map<std::string, std::string> values;
  std::vector<LegSpec> legs;

  const std::string& str(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  double num(const std::string& key) const { return parse_double(key, str(key)); }
  std::uint64_t uint(const std::string& key) const { return parse_uint(key, str(key)); }
  bool flag(const std::string& key) const { return parse_bool(key, str(key)); }
  std::vector<std::uint64_t> uint_list(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& t : detail::split(str(key), ',')) out.push_back(parse_uint(key, t));
    return out;
  }
  std::vector<double> num_list(const std::string& key) const {
    std::vector<double> out;
    const std::string& v = str(key);
    if (detail::trim(v).empty()) return out;
    for (const auto& t : detail::split(v, ',')) out.push_back(parse_double(key, t));
    return out;
  }

  /// Applies "key=value". Unknown keys are errors.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = detail::trim(assignment.substr(0, eq));
    const std::string value = detail::trim(assignment.substr(eq + 1));
    if (values.count(key) == 0) throw ConfigError("unknown config key '" + key + "'");
    values[key] = value;
  }

  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, def] : config_defaults()) os << k << " = " << values.at(k) << "\n";
    for (const auto& leg : legs) {
      os << "\n[leg " << leg.name << "]\n";
      if (!leg.label.empty()) os << "label = " << leg.label << "\n";
      for (const auto& s : leg.stages) os << s.canonical() << "\n";
    }
    return os.str();
  }
};

inline const std::map<std::string, std::set<std::string>>& stage_arguments() {
  static const std::map<std::string, std::set<std::string>> a = {
      {"pretrain", {"epochs", "lr"}},
      {"expand-first-layer", {"k", "init", "drop_block"}},
      {"alter-head", {"k1", "k2"}},
      {"fit", {"layer", "scale"}},
      {"retrain", {"epochs", "lr"}},
      {"gabor-learn", {"layers", "epochs", "lr"}},
      {"prune", {"layer", "granularity", "tolerance", "mode", "apply"}},
      {"eval", {}},
  };
  return a;
}

inline StageSpec parse_stage(const std::string& line) {
  const auto toks = detail::tokens(line);
  if (toks.empty()) throw ConfigError("empty stage line");
  StageSpec s;
  s.name = toks[0];
  const auto& known = stage_arguments();
  auto it = known.find(s.name);
  if (it == known.end()) throw ConfigError("unknown stage '" + s.name + "'");
  for (std::size_t j = 1; j < toks.size(); ++j) {
    const auto eq = toks[j].find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("stage '" + s.name + "': bad argument '" + toks[j] + "'");
    const std::string k = toks[j].substr(0, eq);
    if (it->second.count(k) == 0) throw ConfigError("stage '" + s.name + "': unknown argument '" + k + "'");
    if (!s.args.emplace(k, toks[j].substr(eq + 1)).second) {
      throw ConfigError("stage '" + s.name + "': duplicate argument '" + k + "'");
    }
  }
  return s;
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : config_defaults()) cfg.values[k] = v;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  LegSpec* leg = nullptr;
  auto fail = [&](const std::string& msg) { throw ConfigError("line " + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      const auto toks = detail::tokens(line.substr(1, line.size() - 2));
      if (toks.size() != 2 || toks[0] != "leg") fail("expected [leg NAME]");
      for (const auto& l : cfg.legs) {
        if (l.name == toks[1]) fail("duplicate leg '" + toks[1] + "'");
      }
      cfg.legs.push_back(LegSpec{toks[1], {}, {}});
      leg = &cfg.legs.back();
      continue;
    }
    const auto toks = detail::tokens(line);
    const bool assignment = toks.size() >= 2 && toks[1] == "=";
    const bool compact_assign = toks.size() == 1 && toks[0].find('=') != std::string::npos && leg == nullptr;
    if (leg != nullptr) {
      if (assignment) {
        if (toks[0] != "label") fail("unknown leg setting '" + toks[0] + "'");
        leg->label = detail::trim(line.substr(line.find('=') + 1));
      } else {
        try {
          leg->stages.push_back(parse_stage(line));
        } catch (const ConfigError& e) {
          fail(e.what());
        }
      }
      continue;
    }
    if (!assignment && !compact_assign) fail("expected key = value");
    const auto eq = line.find('=');
    const std::string key = detail::trim(line.substr(0, eq));
    if (cfg.values.count(key) == 0) fail("unknown config key '" + key + "'");
    if (!seen.insert(key).second) fail("duplicate key '" + key + "'");
    cfg.values[key] = detail::trim(line.substr(eq + 1));
  }
  return cfg;
}

}  // namespace gabornet
