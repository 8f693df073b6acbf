#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "gabornet/checkpoint.hpp"
#include "gabornet/config.hpp"
#include "gabornet/data.hpp"
#include "gabornet/errors.hpp"
#include "gabornet/fitting.hpp"
#include "gabornet/model.hpp"
#include "gabornet/pruning.hpp"
#include "gabornet/train.hpp"
#include "gabornet/transforms.hpp"

namespace gabornet {

namespace fs = std::filesystem;

enum class LogLevel { Info, Debug };
using LogSink = std::function<void(LogLevel, const std::string&)>;

// ---------------------------------------------------------------------------
// Datasets and models from config

inline std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& cfg) {
  const std::string& source = cfg.str("data.source");
  std::pair<Dataset, Dataset> out;
  if (source == "textures") {
    TextureSpec s;
    s.seed = cfg.uint("data.seed");
    s.num_classes = static_cast<int>(cfg.uint("data.num_classes"));
    s.image_size = cfg.uint("data.image_size");
    s.channels = cfg.uint("data.channels");
    s.noise = cfg.num("data.noise");
    s.wavelength = cfg.num("data.wavelength");
    s.wavelength_jitter = cfg.num("data.wavelength_jitter");
    s.n_per_class = cfg.uint("data.train_per_class");
    s.split = Split::Train;
    try {
      out.first = synth_textures(s);
      s.n_per_class = cfg.uint("data.test_per_class");
      s.split = Split::Test;
      out.second = synth_textures(s);
    } catch (const InvalidArgumentError& e) {
      throw ConfigError(e.what());
    }
  } else if (source == "cifar10") {
    out = load_cifar10(cfg.str("data.dir"));
  } else {
    throw ConfigError("data.source must be textures or cifar10, got '" + source + "'");
  }
  const std::string& aug = cfg.str("data.augment");
  if (aug != "auto") out.first.augment = parse_bool("data.augment", aug);
  out.second.augment = false;
  return out;
}

template <class T>
Model<T> build_model(const ExperimentConfig& cfg, const Dataset& train, Rng& rng) {
  const std::string& family = cfg.str("model.family");
  const std::size_t in_c = train.images.c();
  const std::size_t side = train.images.h();
  const auto classes = static_cast<std::size_t>(train.num_classes);
  Model<T> m;
  if (family == "toy") {
    ToySpec s{in_c, side, classes, cfg.uint("model.c1"), cfg.uint("model.c2"), cfg.uint("model.k1"),
              cfg.uint("model.k2")};
    m = make_toy<T>(s, rng);
  } else if (family == "vgg") {
    VggSpec s;
    s.width = cfg.num("model.width_mult");
    s.image_size = side;
    s.in_channels = in_c;
    s.classes = classes;
    m = make_vgg<T>(s, rng);
  } else if (family == "resnet") {
    ResNetSpec s;
    s.blocks_per_stage = cfg.uint("model.blocks");
    s.width = cfg.uint("model.width");
    s.image_size = side;
    s.in_channels = in_c;
    s.classes = classes;
    m = make_resnet<T>(s, rng);
  } else {
    throw ConfigError("model.family must be toy, vgg or resnet, got '" + family + "'");
  }
  for (const auto& [k, v] : cfg.values) {
    if (k.rfind("data.", 0) == 0) m.meta[k] = v;
  }
  std::ostringstream norm;
  for (std::size_t c = 0; c < train.norm_mean.size(); ++c) {
    norm << (c ? "," : "") << train.norm_mean[c] << "/" << train.norm_std[c];
  }
  m.meta["data.normalization"] = norm.str();
  return m;
}

// ---------------------------------------------------------------------------
// Stage DAG validation

inline std::vector<std::size_t> parse_layer_list(const std::string& stage, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& t : detail::split(v, ',')) {
    const auto x = parse_uint(stage + " layers", t);
    if (x == 0) throw ConfigError(stage + ": layer numbers start at 1");
    out.push_back(static_cast<std::size_t>(x));
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) throw ConfigError(stage + ": repeated layer");
  return out;
}

inline std::size_t initial_conv_count(const ExperimentConfig& cfg) {
  const std::string& family = cfg.str("model.family");
  if (family == "toy") return 2;
  if (family == "vgg") return 13;
  if (family == "resnet") return 1 + 6 * cfg.uint("model.blocks");
  throw ConfigError("model.family must be toy, vgg or resnet, got '" + family + "'");
}

/// Rejects leg sequences that are not paths through the experiment graph:
/// transforms only before any fit, training before fit/prune/eval, Gabor
/// learning only on fitted layers, compaction only for channel pruning.
inline void validate_leg(const ExperimentConfig& cfg, const LegSpec& leg) {
  auto fail = [&](std::size_t i, const std::string& msg) {
    throw ConfigError("leg '" + leg.name + "' stage " + std::to_string(i + 1) + ": " + msg);
  };
  if (leg.stages.empty()) throw ConfigError("leg '" + leg.name + "' has no stages");
  std::size_t nconv = initial_conv_count(cfg);
  const bool resnet = cfg.str("model.family") == "resnet";
  bool trained = false, fitted_any = false, head_altered = false, block_dropped = false;
  std::set<std::size_t> gabor;
  auto check_layer = [&](std::size_t i, std::size_t layer) {
    if (layer == 0 || layer > nconv) {
      fail(i, "layer " + std::to_string(layer) + " out of range 1.." + std::to_string(nconv));
    }
  };
  auto check_training_args = [&](std::size_t i, const StageSpec& s) {
    if (s.has("epochs") && parse_uint("epochs", s.args.at("epochs")) == 0) fail(i, "epochs must be >= 1");
    if (s.has("lr") && !(parse_double("lr", s.args.at("lr")) >= 0.0)) fail(i, "lr must be >= 0");
  };
  for (std::size_t i = 0; i < leg.stages.size(); ++i) {
    const StageSpec& s = leg.stages[i];
    if (s.name == "pretrain") {
      if (fitted_any) fail(i, "pretrain after fit");
      check_training_args(i, s);
      trained = true;
    } else if (s.name == "expand-first-layer") {
      if (fitted_any) fail(i, "architecture transform after fit");
      const auto k = parse_uint("k", s.required("k"));
      if (k == 0) fail(i, "k must be >= 1");
      const std::string init = s.arg("init", "fresh");
      if (init != "fresh" && init != "embed") fail(i, "init must be fresh or embed");
      if (parse_bool("drop_block", s.arg("drop_block", "false"))) {
        if (!resnet) fail(i, "drop_block requires a resnet model");
        if (block_dropped || head_altered) fail(i, "head already reduced");
        block_dropped = true;
        nconv -= 2;
      }
      trained = false;
    } else if (s.name == "alter-head") {
      if (!resnet) fail(i, "alter-head requires a resnet model");
      if (fitted_any) fail(i, "architecture transform after fit");
      if (head_altered || block_dropped) fail(i, "head already reduced");
      for (const char* key : {"k1", "k2"}) {
        const auto k = parse_uint(key, s.required(key));
        if (k % 2 == 0) fail(i, std::string(key) + " must be odd");
      }
      head_altered = true;
      nconv -= 3;
      trained = false;
    } else if (s.name == "fit") {
      if (!trained) fail(i, "fit needs a trained model");
      check_layer(i, parse_uint("layer", s.required("layer")));
      const std::string scale = s.arg("scale", "unit");
      if (scale != "unit" && scale != "maxabs") fail(i, "scale must be unit or maxabs");
      gabor.insert(parse_uint("layer", s.args.at("layer")));
      fitted_any = true;
    } else if (s.name == "retrain") {
      if (!trained) fail(i, "retrain needs a trained model");
      check_training_args(i, s);
      gabor.clear();
    } else if (s.name == "gabor-learn") {
      if (!trained) fail(i, "gabor-learn needs a trained model");
      check_training_args(i, s);
      const auto layers = parse_layer_list("gabor-learn", s.required("layers"));
      std::set<std::size_t> keep;
      for (auto l : layers) {
        check_layer(i, l);
        if (gabor.count(l) == 0) fail(i, "gabor-learn on layer " + std::to_string(l) + " without a preceding fit");
        keep.insert(l);
      }
      gabor = keep;
    } else if (s.name == "prune") {
      if (!trained) fail(i, "prune needs a trained model");
      check_layer(i, parse_uint("layer", s.required("layer")));
      const auto g = parse_granularity(s.required("granularity"));
      if (s.has("tolerance") && !(parse_double("tolerance", s.args.at("tolerance")) >= 0.0)) {
        fail(i, "tolerance must be >= 0");
      }
      const std::string mode = s.arg("mode", "stop");
      if (mode != "stop" && mode != "skip") fail(i, "mode must be stop or skip");
      const std::string apply = s.arg("apply", "none");
      if (apply != "none" && apply != "compact") fail(i, "apply must be none or compact");
      if (apply == "compact" && g != Granularity::Channel) fail(i, "apply=compact needs channel granularity");
    } else if (s.name == "eval") {
      if (!trained) fail(i, "eval needs a trained model");
    } else {
      fail(i, "unknown stage '" + s.name + "'");
    }
  }
}

inline void validate_config(const ExperimentConfig& cfg) {
  if (cfg.legs.empty()) throw ConfigError("config defines no legs");
  const auto seeds = cfg.uint_list("run.seeds");
  if (seeds.empty()) throw ConfigError("run.seeds is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("run.seeds has duplicates");
  }
  std::set<std::string> labels;
  for (const auto& leg : cfg.legs) {
    if (!labels.insert(leg.display()).second) throw ConfigError("duplicate leg label '" + leg.display() + "'");
    if (leg.display().find_first_of(",\"\n") != std::string::npos) {
      throw ConfigError("leg label '" + leg.display() + "' contains a comma or quote");
    }
    validate_leg(cfg, leg);
  }
  if (cfg.uint("run.jobs") == 0) throw ConfigError("run.jobs must be >= 1");
  if (cfg.uint("eval.batch_size") == 0) throw ConfigError("eval.batch_size must be >= 1");
  if (cfg.uint("train.batch_size") == 0) throw ConfigError("train.batch_size must be >= 1");
  if (cfg.uint("train.epochs") == 0) throw ConfigError("train.epochs must be >= 1");
  if (!(cfg.num("prune.tolerance") >= 0.0)) throw ConfigError("prune.tolerance must be >= 0");
  const std::string& mode = cfg.str("prune.mode");
  if (mode != "stop" && mode != "skip") throw ConfigError("prune.mode must be stop or skip");
  for (double f : cfg.num_list("train.milestones")) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("train.milestones are fractions in (0, 1)");
  }
  const std::string& source = cfg.str("data.source");
  if (source != "textures" && source != "cifar10") throw ConfigError("data.source must be textures or cifar10");
  const std::string& aug = cfg.str("data.augment");
  if (aug != "auto") parse_bool("data.augment", aug);
  cfg.flag("run.resume");
  cfg.flag("run.checkpoints");
  cfg.uint("fit.workers");
}

// ---------------------------------------------------------------------------
// Records

struct MetricRow {
  std::uint64_t seed = 0;
  std::string leg;  // display label
  std::size_t stage_index = 0;  // 1-based within the leg
  std::string stage;
  std::string metric;
  double value = 0.0;
};

struct StageFailure {
  std::uint64_t seed = 0;
  std::string leg;
  std::size_t stage_index = 0;
  std::string stage;
  std::string kind;
  std::string message;
};

struct TimingRow {
  std::uint64_t seed = 0;
  std::string leg;
  std::size_t stage_index = 0;
  std::string stage;
  double seconds = 0.0;
  bool reused = false;
};

struct RunResult {
  fs::path out;
  std::vector<MetricRow> rows;
  std::vector<StageFailure> failures;
  std::vector<TimingRow> timings;
};

inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Seed execution

namespace detail {

using Metrics = std::vector<std::pair<std::string, double>>;

inline void write_metrics(const fs::path& path, const std::string& prefix, const Metrics& m) {
  std::ostringstream os;
  os << "# " << prefix << "\n";
  for (const auto& [k, v] : m) os << k << "," << format_value(v) << "\n";
  write_file_atomic(path, os.str());
}

inline Metrics read_metrics(const fs::path& path) {
  std::istringstream in(read_file_bytes(path));
  Metrics m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("bad metrics line in '" + path.string() + "'");
    m.emplace_back(line.substr(0, comma), parse_double("metric", line.substr(comma + 1)));
  }
  return m;
}

class SeedRunner {
 public:
  SeedRunner(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train, const Dataset& test,
             fs::path dir, LogSink log)
      : cfg_(cfg), seed_(seed), train_(train), test_(test), dir_(std::move(dir)), log_(std::move(log)) {}

  std::vector<MetricRow> rows;
  std::vector<TimingRow> timings;

  void run_leg(const LegSpec& leg) {
    std::string prefix = "seed=" + std::to_string(seed_);
    const Model<float>* current = &root_model();
    for (std::size_t i = 0; i < leg.stages.size(); ++i) {
      const StageSpec& s = leg.stages[i];
      prefix += " | " + s.canonical();
      const auto t0 = std::chrono::steady_clock::now();
      bool reused = true;
      auto it = memo_.find(prefix);
      if (it == memo_.end()) {
        reused = false;
        it = memo_.emplace(prefix, compute_or_load(*current, s, prefix, leg, i)).first;
      }
      current = &it->second.model;
      for (const auto& [k, v] : it->second.metrics) rows.push_back({seed_, leg.display(), i + 1, s.canonical(), k, v});
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timings.push_back({seed_, leg.display(), i + 1, s.canonical(), dt, reused});
    }
  }

  std::string context;  // "leg/stage" of the stage in flight, for error records

 private:
  struct Entry {
    Model<float> model;
    Metrics metrics;
  };

  const Model<float>& root_model() {
    if (!root_) {
      Rng rng(derive_seed(seed_, "init"));
      root_ = build_model<float>(cfg_, train_, rng);
    }
    return *root_;
  }

  void log(LogLevel lvl, const std::string& msg) const {
    if (log_) log_(lvl, "[seed " + std::to_string(seed_) + "] " + msg);
  }

  fs::path stage_path(const std::string& prefix, const char* ext) const {
    return dir_ / "stages" / (hex64(fnv1a64(prefix)) + ext);
  }

  Entry compute_or_load(const Model<float>& input, const StageSpec& s, const std::string& prefix,
                        const LegSpec& leg, std::size_t index) {
    const fs::path ckpt = stage_path(prefix, ".ckpt");
    const fs::path met = stage_path(prefix, ".metrics");
    if (cfg_.flag("run.resume") && fs::exists(ckpt) && fs::exists(met)) {
      log(LogLevel::Info, "[" + leg.display() + "] stage " + std::to_string(index + 1) + " " + s.canonical() +
                              ": reusing " + ckpt.filename().string());
      return Entry{load_checkpoint<float>(ckpt).model, read_metrics(met)};
    }
    log(LogLevel::Info, "[" + leg.display() + "] stage " + std::to_string(index + 1) + " " + s.canonical());
    Rng rng(derive_seed(seed_, prefix));
    Entry e{input, {}};
    run_stage(e.model, e.metrics, s, rng, prefix, leg);
    if (cfg_.flag("run.checkpoints")) {
      save_checkpoint(ckpt, e.model, rng_state(rng));
      write_metrics(met, prefix, e.metrics);
    }
    return e;
  }

  OptimizerConfig optimizer_for(const StageSpec& s) const {
    OptimizerConfig o;
    o.epochs = s.has("epochs") ? parse_uint("epochs", s.args.at("epochs")) : cfg_.uint("train.epochs");
    o.lr = s.has("lr") ? parse_double("lr", s.args.at("lr")) : cfg_.num("train.lr");
    o.momentum = cfg_.num("train.momentum");
    o.weight_decay = cfg_.num("train.weight_decay");
    o.batch_size = cfg_.uint("train.batch_size");
    o.lr_gamma = cfg_.num("train.lr_gamma");
    o.milestones = milestones_at(o.epochs, cfg_.num_list("train.milestones"));
    return o;
  }

  double accuracy(Model<float>& m) const { return evaluate(m, test_, cfg_.uint("eval.batch_size")).percent(); }

  void train_stage(Model<float>& m, Metrics& out, const StageSpec& s, Rng& rng, const LegSpec& leg) {
    TrainOptions opts;
    opts.eval_every = 0;
    opts.on_epoch = [&](const EpochStats& st) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[%s] %s epoch %zu lr %.5g loss %.5f train_acc %.2f", leg.display().c_str(),
                    s.name.c_str(), st.epoch + 1, st.lr, st.train_loss, 100.0 * st.train_accuracy);
      log(LogLevel::Debug, buf);
    };
    const TrainHistory h = train(m, train_, nullptr, optimizer_for(s), rng, opts);
    out.emplace_back("train_loss", h.epochs.back().train_loss);
    out.emplace_back("accuracy", accuracy(m));
  }

  void run_stage(Model<float>& m, Metrics& out, const StageSpec& s, Rng& rng, const std::string& prefix,
                 const LegSpec& leg) {
    const auto convs = m.convs().size();
    auto ordinal = [&](const std::string& v) {
      const auto l = parse_uint("layer", v);
      if (l == 0 || l > convs) throw StructureError("layer " + v + " does not exist");
      return static_cast<std::size_t>(l - 1);
    };
    if (s.name == "pretrain") {
      train_stage(m, out, s, rng, leg);
    } else if (s.name == "expand-first-layer") {
      ExpandOptions o;
      o.init = s.arg("init", "fresh") == "embed" ? ExpandInit::EmbedOld : ExpandInit::Fresh;
      o.drop_following_block = parse_bool("drop_block", s.arg("drop_block", "false"));
      expand_first_layer(m, parse_uint("k", s.required("k")), rng, o);
      out.emplace_back("conv_layers", static_cast<double>(m.convs().size()));
    } else if (s.name == "alter-head") {
      const auto k1 = parse_uint("k1", s.required("k1"));
      const auto k2 = parse_uint("k2", s.required("k2"));
      alter_resnet_head(m, k1, k2, rng);
      out.emplace_back("conv_layers", static_cast<double>(m.convs().size()));
      out.emplace_back("head_receptive_field", static_cast<double>(receptive_field({{k1, 1}, {k2, 1}})));
    } else if (s.name == "fit") {
      const std::size_t layer = ordinal(s.required("layer"));
      const auto scale =
          s.arg("scale", "unit") == "maxabs" ? AmplitudeScale::PerKernelMaxAbs : AmplitudeScale::Unit;
      const LayerFit fit = fit_model_layer(m, layer, scale, static_cast<unsigned>(cfg_.uint("fit.workers")));
      convert_layer_to_gabor(m, layer, fit);
      double sum = 0.0;
      std::size_t zero_amp = 0;
      for (const auto& r : fit.results) {
        sum += r.l2_distance;
        zero_amp += r.params.a == 0.0;
      }
      out.emplace_back("fit_mean_l2", sum / static_cast<double>(fit.results.size()));
      out.emplace_back("fit_zero_amplitude", static_cast<double>(zero_amp));
      out.emplace_back("accuracy", accuracy(m));
      if (cfg_.flag("run.checkpoints")) write_fit_csv(stage_path(prefix, ".fit.csv"), fit);
    } else if (s.name == "retrain") {
      for (auto* c : m.convs()) c->make_standard();
      train_stage(m, out, s, rng, leg);
    } else if (s.name == "gabor-learn") {
      const auto layers = parse_layer_list("gabor-learn", s.required("layers"));
      auto cs = m.convs();
      for (std::size_t j = 0; j < cs.size(); ++j) {
        const bool listed = std::find(layers.begin(), layers.end(), j + 1) != layers.end();
        if (listed && cs[j]->mode() != ConvMode::GaborParameterized) {
          throw StructureError("gabor-learn: layer " + std::to_string(j + 1) + " is not Gabor-parameterized");
        }
        if (!listed) cs[j]->make_standard();
      }
      train_stage(m, out, s, rng, leg);
    } else if (s.name == "prune") {
      PruneSpec ps;
      ps.layer = ordinal(s.required("layer"));
      ps.granularity = parse_granularity(s.required("granularity"));
      ps.tolerance = s.has("tolerance") ? parse_double("tolerance", s.args.at("tolerance"))
                                        : cfg_.num("prune.tolerance");
      ps.mode = s.arg("mode", cfg_.str("prune.mode")) == "skip" ? PruneMode::SkipAndContinue
                                                               : PruneMode::StopAtFirstFailure;
      ps.eval_batch = cfg_.uint("eval.batch_size");
      Model<float> work = m;
      const PruneReport r = prune_greedy(work, ps, test_);
      out.emplace_back("baseline", r.baseline);
      out.emplace_back("accuracy", r.final_accuracy());
      out.emplace_back("steps", static_cast<double>(r.pruned()));
      out.emplace_back("pruned_pct", 100.0 * pruned_fraction(work, ps.layer, ps.granularity));
      if (ps.granularity == Granularity::Channel && ps.layer + 1 < convs) {
        out.emplace_back("next_layer_kernel_pruned_pct", 100.0 * kernel_pruned_fraction(work, ps.layer + 1));
      }
      if (cfg_.flag("run.checkpoints")) {
        std::ostringstream os;
        write_prune_csv(os, r);
        write_file_atomic(stage_path(prefix, ".prune.csv"), os.str());
      }
      if (s.arg("apply", "none") == "compact") m = compact(std::move(work));
    } else if (s.name == "eval") {
      out.emplace_back("accuracy", accuracy(m));
    } else {
      throw ConfigError("unknown stage '" + s.name + "'");
    }
  }

  static void write_fit_csv(const fs::path& path, const LayerFit& fit) {
    std::ostringstream os;
    os << "out,in,l2_distance,candidate_index";
    for (const char* n : GaborParams::kNames) os << "," << n;
    os << "\n";
    for (std::size_t o = 0; o < fit.n_out; ++o) {
      for (std::size_t i = 0; i < fit.n_in; ++i) {
        const FitResult& r = fit.at(o, i);
        os << o << "," << i << "," << format_value(r.l2_distance) << "," << r.candidate_index;
        for (double v : r.params.to_array()) os << "," << format_value(v);
        os << "\n";
      }
    }
    write_file_atomic(path, os.str());
  }

  const ExperimentConfig& cfg_;
  std::uint64_t seed_;
  const Dataset& train_;
  const Dataset& test_;
  fs::path dir_;
  LogSink log_;
  std::optional<Model<float>> root_;
  std::map<std::string, Entry> memo_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Aggregation

struct SummaryRow {
  std::string leg;
  std::size_t stage_index = 0;
  std::string stage;
  std::string metric;
  std::size_t n = 0;
  double mean = 0.0;
  double sd = std::nan("");  // sample sd, NaN for n < 2
};

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return std::nan("");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Groups rows by (leg, stage_index, stage, metric) across seeds, keeping
/// the order in which groups first appear.
inline std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows) {
  std::vector<SummaryRow> out;
  std::vector<std::vector<double>> values;
  std::map<std::tuple<std::string, std::size_t, std::string, std::string>, std::size_t> index;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.leg, r.stage_index, r.stage, r.metric);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({r.leg, r.stage_index, r.stage, r.metric});
      values.emplace_back();
    }
    values[it->second].push_back(r.value);
  }
  for (std::size_t j = 0; j < out.size(); ++j) {
    const auto& v = values[j];
    out[j].n = v.size();
    double s = 0.0;
    for (double x : v) s += x;
    out[j].mean = s / static_cast<double>(v.size());
    out[j].sd = sample_sd(v);
  }
  return out;
}

inline std::string csv_num(double v, int prec = 4) {
  if (std::isnan(v)) return "";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string runs_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "seed,leg,stage_index,stage,metric,value\n";
  for (const auto& r : rows) {
    os << r.seed << "," << r.leg << "," << r.stage_index << "," << r.stage << "," << r.metric << ","
       << format_value(r.value) << "\n";
  }
  return os.str();
}

inline std::vector<MetricRow> parse_runs_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "seed,leg,stage_index,stage,metric,value") {
    throw FormatError("runs.csv: unexpected header");
  }
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 6) throw FormatError("runs.csv line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      rows.push_back({parse_uint("seed", f[0]), f[1], static_cast<std::size_t>(parse_uint("stage_index", f[2])), f[3],
                      f[4], parse_double("value", f[5])});
    } catch (const ConfigError& e) {
      throw FormatError("runs.csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

/// summary.csv plus the two table-shaped views: accuracies of training and
/// eval stages, and pruned percentages per prune stage.
inline std::map<std::string, std::string> report_files(const std::vector<MetricRow>& rows) {
  const auto summary = summarize(rows);
  std::ostringstream all, acc, pr;
  all << "leg,stage_index,stage,metric,n,mean,sd\n";
  for (const auto& s : summary) {
    all << s.leg << "," << s.stage_index << "," << s.stage << "," << s.metric << "," << s.n << ","
        << csv_num(s.mean, 6) << "," << csv_num(s.sd, 6) << "\n";
  }
  acc << "leg,stage_index,stage,n,accuracy_mean,accuracy_sd\n";
  pr << "leg,stage_index,layer,granularity,n,pruned_pct_mean,pruned_pct_sd,accuracy_mean,accuracy_sd\n";
  auto find = [&](const SummaryRow& s, const std::string& metric) -> const SummaryRow* {
    for (const auto& t : summary) {
      if (t.leg == s.leg && t.stage_index == s.stage_index && t.metric == metric) return &t;
    }
    return nullptr;
  };
  for (const auto& s : summary) {
    const bool prune = s.stage.rfind("prune", 0) == 0;
    if (s.metric == "accuracy" && !prune) {
      acc << s.leg << "," << s.stage_index << "," << s.stage << "," << s.n << "," << csv_num(s.mean, 2) << ","
          << csv_num(s.sd, 2) << "\n";
    }
    if (prune && s.metric == "pruned_pct") {
      StageSpec st = parse_stage(s.stage);
      const SummaryRow* a = find(s, "accuracy");
      pr << s.leg << "," << s.stage_index << "," << st.arg("layer", "") << "," << st.arg("granularity", "") << ","
         << s.n << "," << csv_num(s.mean, 2) << "," << csv_num(s.sd, 2) << ","
         << (a ? csv_num(a->mean, 2) : "") << "," << (a ? csv_num(a->sd, 2) : "") << "\n";
    }
  }
  return {{"summary.csv", all.str()}, {"table_accuracy.csv", acc.str()}, {"table_pruning.csv", pr.str()}};
}

/// Re-aggregates a finished run directory from its runs.csv.
inline std::vector<MetricRow> write_report(const fs::path& run_dir) {
  const auto rows = parse_runs_csv(read_file_bytes(run_dir / "runs.csv"));
  for (const auto& [name, text] : report_files(rows)) write_file_atomic(run_dir / name, text);
  return rows;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct RunOptions {
  LogSink log;
};

inline fs::path resolve_output_dir(const ExperimentConfig& cfg) {
  fs::path out = cfg.str("run.out");
  if (out.is_relative()) {
    if (const char* root = std::getenv("GABORNET_OUTPUT_ROOT"); root != nullptr && *root != '\0') out = fs::path(root) / out;
  }
  return out;
}

/// Runs every leg for every seed. Per seed, legs share identical stage
/// prefixes so common work runs once. A failing stage aborts that seed and is
/// recorded; other seeds continue.
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  validate_config(cfg);
  RunResult res;
  res.out = resolve_output_dir(cfg);
  fs::create_directories(res.out);
  write_file_atomic(res.out / "config.resolved", cfg.to_text());
  const auto [train_set, test_set] = load_datasets(cfg);
  const auto seeds = cfg.uint_list("run.seeds");

  struct SeedOut {
    std::vector<MetricRow> rows;
    std::vector<TimingRow> timings;
    std::optional<StageFailure> failure;
  };
  std::vector<SeedOut> per_seed(seeds.size());
  std::mutex log_mu;
  LogSink sink = [&](LogLevel lvl, const std::string& msg) {
    if (!opts.log) return;
    std::lock_guard lock(log_mu);
    opts.log(lvl, msg);
  };
  auto run_seed = [&](std::size_t j) {
    const std::uint64_t seed = seeds[j];
    const fs::path dir = res.out / ("seed-" + std::to_string(seed));
    detail::SeedRunner runner(cfg, seed, train_set, test_set, dir, sink);
    SeedOut& so = per_seed[j];
    for (const auto& leg : cfg.legs) {
      const std::size_t before = runner.timings.size();
      try {
        runner.run_leg(leg);
      } catch (const std::exception& e) {
        const std::size_t idx = runner.timings.size() - before + 1;
        const std::string stage = idx <= leg.stages.size() ? leg.stages[idx - 1].canonical() : "";
        const auto* ge = dynamic_cast<const Error*>(&e);
        so.failure = StageFailure{seed, leg.display(), idx, stage, ge ? to_string(ge->kind()) : "internal", e.what()};
        sink(LogLevel::Info, "[seed " + std::to_string(seed) + "] [" + leg.display() + "] stage " +
                                 std::to_string(idx) + " failed: " + e.what());
        break;
      }
    }
    so.rows = runner.rows;
    so.timings = runner.timings;
    std::ostringstream rec;
    rec << runs_csv(so.rows);
    write_file_atomic(dir / "record.csv", rec.str());
  };
  const std::size_t jobs = std::min<std::size_t>(cfg.uint("run.jobs"), seeds.size());
  if (jobs <= 1) {
    for (std::size_t j = 0; j < seeds.size(); ++j) run_seed(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(jobs);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t j = next++; j < seeds.size(); j = next++) run_seed(j);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (auto& so : per_seed) {
    res.rows.insert(res.rows.end(), so.rows.begin(), so.rows.end());
    res.timings.insert(res.timings.end(), so.timings.begin(), so.timings.end());
    if (so.failure) res.failures.push_back(*so.failure);
  }
  write_file_atomic(res.out / "runs.csv", runs_csv(res.rows));
  for (const auto& [name, text] : report_files(res.rows)) write_file_atomic(res.out / name, text);
  std::ostringstream fail;
  fail << "seed,leg,stage_index,stage,kind,message\n";
  for (const auto& f : res.failures) {
    std::string msg = f.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    fail << f.seed << "," << f.leg << "," << f.stage_index << "," << f.stage << "," << f.kind << "," << msg << "\n";
  }
  write_file_atomic(res.out / "failures.csv", fail.str());
  std::ostringstream tim;
  tim << "seed,leg,stage_index,stage,seconds,reused\n";
  for (const auto& t : res.timings) {
    tim << t.seed << "," << t.leg << "," << t.stage_index << "," << t.stage << "," << csv_num(t.seconds, 3) << ","
        << (t.reused ? 1 : 0) << "\n";
  }
  write_file_atomic(res.out / "timing.csv", tim.str());
  return res;
}

}  // namespace gabornet
