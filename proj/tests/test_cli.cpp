#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "gabornet/cli.hpp"
#include "gabornet/pipeline.hpp"

using namespace gabornet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path work_dir() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "gabornet_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

/// Runs the installed binary as a child process.
Outcome run(const std::string& args) {
  const fs::path o = work_dir() / "stdout.txt", e = work_dir() / "stderr.txt";
  const std::string cmd = quote(GABORNET_CLI) + " " + args + " >" + quote(o.string()) + " 2>" + quote(e.string());
  const int status = std::system(cmd.c_str());
  Outcome r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file_bytes(o);
  r.err = read_file_bytes(e);
  return r;
}

const char* kConfig = R"(model.c1 = 4
model.c2 = 4
data.train_per_class = 10
data.test_per_class = 10
data.noise = 0.3
train.epochs = 1
train.batch_size = 8
)";

ExperimentConfig small_config() { return parse_config(kConfig); }

/// An untrained toy checkpoint whose metadata names its texture dataset.
fs::path make_checkpoint(const std::string& name, bool zero_first_layer = false) {
  const auto cfg = small_config();
  const auto [train_set, test_set] = load_datasets(cfg);
  Rng rng(42);
  auto m = build_model<float>(cfg, train_set, rng);
  if (zero_first_layer) {
    for (auto& v : m.conv(0).weights().storage()) v = 0.0f;
  }
  const fs::path p = work_dir() / name;
  save_checkpoint(p, m, rng_state(rng));
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::istringstream in(read_file_bytes(p));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) rows.push_back(detail::split(line, ','));
  }
  return rows;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
  EXPECT_NE(r.out.find("prune"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train").code, 2);  // --config is required
  const auto ck = make_checkpoint("usage.ckpt");
  EXPECT_EQ(run("prune " + quote(ck.string()) + " --granularity filter").code, 2);
  const auto r = run("eval " + quote(ck.string()) + " --set data.bogus=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("config error"), std::string::npos) << r.err;
}

TEST(Cli, EvalPrintsTwoDecimals) {
  const auto ck = make_checkpoint("eval.ckpt");
  const auto r = run("eval " + quote(ck.string()));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::regex_match(r.out, std::regex(R"(\d{1,3}\.\d{2}\n)"))) << r.out;

  auto loaded = load_checkpoint<float>(ck);
  const auto [train_set, test_set] = load_datasets(small_config());
  char expect[32];
  std::snprintf(expect, sizeof expect, "%.2f\n", evaluate(loaded.model, test_set).percent());
  EXPECT_EQ(r.out, expect);
}

TEST(Cli, IoAndFormatErrorsExitFour) {
  EXPECT_EQ(run("eval " + quote((work_dir() / "missing.ckpt").string())).code, 4);
  const auto ck = make_checkpoint("corrupt.ckpt");
  std::string bytes = read_file_bytes(ck);
  bytes[bytes.size() / 2] ^= 0x20;
  write_file_atomic(ck, bytes);
  const auto r = run("eval " + quote(ck.string()));
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("integrity error"), std::string::npos) << r.err;
  EXPECT_EQ(run("report " + quote((work_dir() / "no_run").string())).code, 4);
}

TEST(Cli, RuntimeErrorsExitThree) {
  const auto ck = make_checkpoint("runtime.ckpt");
  const auto r = run("gabor-train " + quote(ck.string()) + " --layers 1");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("structure error"), std::string::npos) << r.err;
  EXPECT_EQ(run("fit " + quote(ck.string()) + " 9").code, 3);
  EXPECT_EQ(run("fit " + quote(ck.string()) + " 0").code, 3);
}

TEST(Cli, FitOnZeroLayerHasZeroResiduals) {
  const auto ck = make_checkpoint("zero.ckpt", true);
  const fs::path dst = work_dir() / "zero_fit.ckpt";
  const fs::path csv = work_dir() / "zero_fit.csv";
  const auto r = run("fit " + quote(ck.string()) + " 1 --out " + quote(dst.string()) + " --residuals " +
                     quote(csv.string()) + " --quiet");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, dst.string() + "\n" + csv.string() + "\n");
  const auto rows = read_csv(csv);
  ASSERT_EQ(rows.size(), 1u + 4u * 3u);
  EXPECT_EQ(rows[0][0], "out");
  EXPECT_EQ(rows[0][2], "l2_distance");
  for (std::size_t j = 1; j < rows.size(); ++j) {
    EXPECT_EQ(std::stod(rows[j][2]), 0.0) << j;
    EXPECT_EQ(std::stod(rows[j][4 + static_cast<std::size_t>(GaborField::a)]), 0.0) << j;
  }
  const auto fitted = load_checkpoint<float>(dst);
  EXPECT_TRUE(fitted.model.conv(0).is_gabor());
}

TEST(Cli, FitThenGaborTrainThenPrune) {
  const auto ck = make_checkpoint("chain.ckpt");
  const fs::path fitted = work_dir() / "chain.fit.ckpt";
  ASSERT_EQ(run("fit " + quote(ck.string()) + " 1 --scale maxabs --out " + quote(fitted.string()) + " --quiet").code,
            0);
  const fs::path gl = work_dir() / "chain.gl.ckpt";
  const auto g = run("gabor-train " + quote(fitted.string()) + " --layers 1 --set train.epochs=1 --out " +
                     quote(gl.string()) + " --quiet");
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_TRUE(std::regex_match(g.out, std::regex(R"(\d{1,3}\.\d{2}\n)"))) << g.out;
  EXPECT_TRUE(load_checkpoint<float>(gl).model.conv(0).is_gabor());

  const fs::path pruned = work_dir() / "chain.pruned.ckpt";
  const fs::path report = work_dir() / "chain.prune.csv";
  const auto p = run("prune " + quote(gl.string()) + " --layer 1 --granularity channel --tolerance 100 --out " +
                     quote(pruned.string()) + " --report " + quote(report.string()));
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("pruned "), std::string::npos) << p.out;
  EXPECT_TRUE(fs::exists(report));
  const auto small = load_checkpoint<float>(pruned);
  EXPECT_LT(small.model.conv(0).n_out(), 4u);
}

TEST(Cli, TrainAndReport) {
  const fs::path cfg = work_dir() / "exp.cfg";
  const fs::path out = work_dir() / "run";
  {
    std::ofstream f(cfg);
    f << kConfig << "run.seeds = 1,2\n[leg a]\npretrain\nfit layer=1\neval\n";
  }
  const auto r = run("train --config " + quote(cfg.string()) + " --out " + quote(out.string()) + " --quiet");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.err, "");
  EXPECT_NE(r.out.find("wrote"), std::string::npos);
  const std::string summary = read_file_bytes(out / "summary.csv");
  fs::remove(out / "summary.csv");
  const auto rep = run("report " + quote(out.string()));
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(read_file_bytes(out / "summary.csv"), summary);

  const auto seeded = run("train --config " + quote(cfg.string()) + " --seed 9 --out " +
                          quote((work_dir() / "run9").string()) + " --quiet");
  ASSERT_EQ(seeded.code, 0) << seeded.err;
  EXPECT_TRUE(fs::exists(work_dir() / "run9" / "seed-9"));
  EXPECT_FALSE(fs::exists(work_dir() / "run9" / "seed-1"));
}

TEST(Cli, TrainStageFailureExitsThree) {
  const fs::path cfg = work_dir() / "boom.cfg";
  {
    std::ofstream f(cfg);
    f << kConfig << "[leg a]\npretrain lr=1e30\n";
  }
  const auto r = run("train --config " + quote(cfg.string()) + " --out " + quote((work_dir() / "boom").string()) +
                     " --quiet");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("divergence error"), std::string::npos) << r.err;
}

TEST(Cli, InvalidConfigExitsTwo) {
  const fs::path cfg = work_dir() / "bad.cfg";
  {
    std::ofstream f(cfg);
    f << kConfig << "[leg a]\nfit layer=1\n";
  }
  EXPECT_EQ(run("train --config " + quote(cfg.string())).code, 2);
  EXPECT_EQ(run("train --config " + quote((work_dir() / "absent.cfg").string())).code, 4);
}

TEST(Cli, InProcessExitCodeMapping) {
  EXPECT_EQ(exit_code_for(ErrorKind::Config), 2);
  EXPECT_EQ(exit_code_for(ErrorKind::Io), 4);
  EXPECT_EQ(exit_code_for(ErrorKind::Format), 4);
  EXPECT_EQ(exit_code_for(ErrorKind::Integrity), 4);
  EXPECT_EQ(exit_code_for(ErrorKind::Divergence), 3);
  EXPECT_EQ(exit_code_for(ErrorKind::Structure), 3);
  std::ostringstream out, err;
  const char* argv[] = {"gabornet", "eval"};
  EXPECT_EQ(run_cli(2, const_cast<char**>(argv), out, err), 2);
}
