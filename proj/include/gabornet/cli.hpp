#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gabornet/checkpoint.hpp"
#include "gabornet/config.hpp"
#include "gabornet/errors.hpp"
#include "gabornet/pipeline.hpp"
#include "gabornet/pruning.hpp"
#include "gabornet/train.hpp"
#include "gabornet/transforms.hpp"

namespace gabornet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitIo = 4;

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::Io:
    case ErrorKind::Format:
    case ErrorKind::Integrity: return kExitIo;
    default: return kExitRuntime;
  }
}

namespace detail {

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  bool verbose = false;
};

inline void add_common(CLI::App* app, CommonFlags& f, bool needs_config) {
  auto* c = app->add_option("--config", f.config, "experiment config file");
  if (needs_config) c->required();
  app->add_option("--set", f.overrides, "override a config key (key=value, repeatable)");
  app->add_option("--seed", f.seed, "seed (replaces run.seeds)");
  app->add_option("--out", f.out, "output path");
  app->add_flag("--quiet", f.quiet, "suppress progress lines");
  app->add_flag("--verbose", f.verbose, "per-epoch progress lines");
}

/// Config from defaults, then checkpoint data keys, then the file, then --set.
template <class T>
ExperimentConfig resolve_config(const CommonFlags& f, const Model<T>* model) {
  ExperimentConfig cfg = f.config.empty() ? parse_config("") : parse_config(read_file_bytes(f.config));
  if (model != nullptr && f.config.empty()) {
    for (const auto& [k, v] : model->meta) {
      if (cfg.values.count(k) != 0) cfg.values[k] = v;
    }
  }
  for (const auto& o : f.overrides) cfg.set(o);
  if (f.seed) cfg.values["run.seeds"] = std::to_string(*f.seed);
  if (!f.out.empty()) cfg.values["run.out"] = f.out;
  return cfg;
}

inline LogSink make_sink(const CommonFlags& f, std::ostream& err) {
  if (f.quiet) return {};
  const bool verbose = f.verbose;
  return [verbose, &err](LogLevel lvl, const std::string& msg) {
    if (lvl == LogLevel::Debug && !verbose) return;
    err << msg << "\n";
  };
}

inline std::string percent2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out.replace_filename(p.stem().string() + suffix);
  return out;
}

inline std::size_t layer_ordinal(std::size_t layer_1based) {
  if (layer_1based == 0) throw InvalidArgumentError("layer numbers start at 1");
  return layer_1based - 1;
}

}  // namespace detail

/// Entry point of the command-line tool. Returns the process exit code.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Gabor-parameterized CNN training, fitting and pruning"};
  app.require_subcommand(1);

  detail::CommonFlags tf, ff, gf, pf, ef;

  auto* train_cmd = app.add_subcommand("train", "run the legs of an experiment config");
  detail::add_common(train_cmd, tf, true);

  auto* fit_cmd = app.add_subcommand("fit", "fit a conv layer of a checkpoint to Gabor filters");
  std::string fit_ckpt, fit_scale = "unit", fit_residuals;
  std::size_t fit_layer = 0;
  unsigned fit_workers = 1;
  fit_cmd->add_option("checkpoint", fit_ckpt)->required();
  fit_cmd->add_option("layer", fit_layer, "1-based conv layer")->required();
  fit_cmd->add_option("--scale", fit_scale, "amplitude grid: unit or maxabs")->check(CLI::IsMember({"unit", "maxabs"}));
  fit_cmd->add_option("--residuals", fit_residuals, "per-kernel residual CSV path");
  fit_cmd->add_option("--workers", fit_workers, "fitting threads");
  fit_cmd->add_option("--out", ff.out, "fitted checkpoint path");
  fit_cmd->add_flag("--quiet", ff.quiet);
  fit_cmd->add_flag("--verbose", ff.verbose);

  auto* gt_cmd = app.add_subcommand("gabor-train", "train a checkpoint with Gabor learning in the given layers");
  std::string gt_ckpt, gt_layers;
  gt_cmd->add_option("checkpoint", gt_ckpt)->required();
  gt_cmd->add_option("--layers", gt_layers, "comma-separated 1-based Gabor layers")->required();
  detail::add_common(gt_cmd, gf, false);

  auto* prune_cmd = app.add_subcommand("prune", "greedy L1 pruning of one layer, then compaction");
  std::string pr_ckpt, pr_gran = "kernel", pr_mode, pr_report;
  std::size_t pr_layer = 1;
  std::optional<double> pr_tol;
  prune_cmd->add_option("checkpoint", pr_ckpt)->required();
  prune_cmd->add_option("--layer", pr_layer, "1-based conv layer");
  prune_cmd->add_option("--granularity", pr_gran)->check(CLI::IsMember({"kernel", "channel"}));
  prune_cmd->add_option("--tolerance", pr_tol, "allowed accuracy drop, percentage points");
  prune_cmd->add_option("--mode", pr_mode)->check(CLI::IsMember({"stop", "skip"}));
  prune_cmd->add_option("--report", pr_report, "prune report CSV path");
  detail::add_common(prune_cmd, pf, false);

  auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on the test split");
  std::string ev_ckpt;
  eval_cmd->add_option("checkpoint", ev_ckpt)->required();
  detail::add_common(eval_cmd, ef, false);

  auto* report_cmd = app.add_subcommand("report", "aggregate a run directory into summary tables");
  std::string rep_dir;
  report_cmd->add_option("run_dir", rep_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "gabornet: usage error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*train_cmd) {
      ExperimentConfig cfg = detail::resolve_config<float>(tf, nullptr);
      RunOptions ro;
      ro.log = detail::make_sink(tf, err);
      const RunResult r = run_experiment(cfg, ro);
      out << "wrote " << r.out.string() << " (" << r.rows.size() << " records)\n";
      for (const auto& f : r.failures) {
        err << "gabornet: " << f.kind << " error: seed " << f.seed << " leg " << f.leg << " stage " << f.stage_index
            << ": " << f.message << "\n";
      }
      return r.failures.empty() ? kExitOk : kExitRuntime;
    }
    if (*fit_cmd) {
      Checkpoint<float> ck = load_checkpoint<float>(fit_ckpt);
      const std::size_t layer = detail::layer_ordinal(fit_layer);
      const auto scale = fit_scale == "maxabs" ? AmplitudeScale::PerKernelMaxAbs : AmplitudeScale::Unit;
      const LayerFit fit = fit_model_layer(ck.model, layer, scale, std::max(1u, fit_workers));
      convert_layer_to_gabor(ck.model, layer, fit);
      const fs::path dst = ff.out.empty() ? detail::sibling(fit_ckpt, ".fit" + std::to_string(fit_layer) + ".ckpt")
                                          : fs::path(ff.out);
      const fs::path csv = fit_residuals.empty() ? detail::sibling(dst, ".residuals.csv") : fs::path(fit_residuals);
      std::ostringstream os;
      os << "out,in,l2_distance,candidate_index";
      for (const char* n : GaborParams::kNames) os << "," << n;
      os << "\n";
      double sum = 0.0;
      for (std::size_t o = 0; o < fit.n_out; ++o) {
        for (std::size_t i = 0; i < fit.n_in; ++i) {
          const FitResult& r = fit.at(o, i);
          sum += r.l2_distance;
          os << o << "," << i << "," << format_value(r.l2_distance) << "," << r.candidate_index;
          for (double v : r.params.to_array()) os << "," << format_value(v);
          os << "\n";
        }
      }
      write_file_atomic(csv, os.str());
      save_checkpoint(dst, ck.model, ck.rng_state);
      if (!ff.quiet) {
        err << "fitted layer " << fit_layer << ": " << fit.results.size() << " kernels, mean L2 "
            << sum / static_cast<double>(fit.results.size()) << "\n";
      }
      out << dst.string() << "\n" << csv.string() << "\n";
      return kExitOk;
    }
    if (*gt_cmd) {
      Checkpoint<float> ck = load_checkpoint<float>(gt_ckpt);
      ExperimentConfig cfg = detail::resolve_config(gf, &ck.model);
      const auto layers = parse_layer_list("gabor-train", gt_layers);
      auto convs = ck.model.convs();
      for (std::size_t j = 0; j < convs.size(); ++j) {
        const bool listed = std::find(layers.begin(), layers.end(), j + 1) != layers.end();
        if (listed && convs[j]->mode() != ConvMode::GaborParameterized) {
          throw StructureError("layer " + std::to_string(j + 1) + " is not Gabor-parameterized; run fit first");
        }
        if (!listed) convs[j]->make_standard();
      }
      for (auto l : layers) {
        if (l > convs.size()) throw StructureError("layer " + std::to_string(l) + " does not exist");
      }
      const auto [train_set, test_set] = load_datasets(cfg);
      OptimizerConfig oc;
      oc.epochs = cfg.uint("train.epochs");
      oc.lr = cfg.num("train.lr");
      oc.momentum = cfg.num("train.momentum");
      oc.weight_decay = cfg.num("train.weight_decay");
      oc.batch_size = cfg.uint("train.batch_size");
      oc.lr_gamma = cfg.num("train.lr_gamma");
      oc.milestones = milestones_at(oc.epochs, cfg.num_list("train.milestones"));
      Rng rng(derive_seed(cfg.uint_list("run.seeds").front(), "gabor-train"));
      const LogSink sink = detail::make_sink(gf, err);
      TrainOptions to;
      to.eval_every = 0;
      to.on_epoch = [&](const EpochStats& st) {
        if (sink) {
          sink(LogLevel::Debug, "epoch " + std::to_string(st.epoch + 1) + " loss " + std::to_string(st.train_loss));
        }
      };
      train(ck.model, train_set, nullptr, oc, rng, to);
      const fs::path dst = gf.out.empty() ? detail::sibling(gt_ckpt, ".gl.ckpt") : fs::path(gf.out);
      save_checkpoint(dst, ck.model, rng_state(rng));
      out << detail::percent2(evaluate(ck.model, test_set, cfg.uint("eval.batch_size")).percent()) << "\n";
      return kExitOk;
    }
    if (*prune_cmd) {
      Checkpoint<float> ck = load_checkpoint<float>(pr_ckpt);
      ExperimentConfig cfg = detail::resolve_config(pf, &ck.model);
      const auto [train_set, test_set] = load_datasets(cfg);
      PruneSpec ps;
      ps.layer = detail::layer_ordinal(pr_layer);
      ps.granularity = parse_granularity(pr_gran);
      ps.tolerance = pr_tol ? *pr_tol : cfg.num("prune.tolerance");
      const std::string mode = pr_mode.empty() ? cfg.str("prune.mode") : pr_mode;
      ps.mode = mode == "skip" ? PruneMode::SkipAndContinue : PruneMode::StopAtFirstFailure;
      ps.eval_batch = cfg.uint("eval.batch_size");
      const PruneReport r = prune_greedy(ck.model, ps, test_set);
      const Model<float> small = compact(ck.model);
      const fs::path dst = pf.out.empty() ? detail::sibling(pr_ckpt, ".pruned.ckpt") : fs::path(pf.out);
      const fs::path csv = pr_report.empty() ? detail::sibling(dst, ".prune.csv") : fs::path(pr_report);
      std::ostringstream os;
      write_prune_csv(os, r);
      write_file_atomic(csv, os.str());
      save_checkpoint(dst, small, ck.rng_state);
      out << "baseline " << detail::percent2(r.baseline) << " final " << detail::percent2(r.final_accuracy())
          << " pruned " << r.pruned() << "/" << r.candidates << " " << to_string(ps.granularity) << "s ("
          << detail::percent2(100.0 * pruned_fraction(ck.model, ps.layer, ps.granularity)) << "% of layer "
          << pr_layer << ")\n";
      return kExitOk;
    }
    if (*eval_cmd) {
      Checkpoint<float> ck = load_checkpoint<float>(ev_ckpt);
      ExperimentConfig cfg = detail::resolve_config(ef, &ck.model);
      const auto [train_set, test_set] = load_datasets(cfg);
      out << detail::percent2(evaluate(ck.model, test_set, cfg.uint("eval.batch_size")).percent()) << "\n";
      return kExitOk;
    }
    if (*report_cmd) {
      const auto rows = write_report(rep_dir);
      out << "aggregated " << rows.size() << " records into " << rep_dir << "\n";
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "gabornet: " << to_string(e.kind()) << " error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "gabornet: io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "gabornet: internal error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace gabornet
