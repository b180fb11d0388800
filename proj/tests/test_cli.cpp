// Runs the boxprior executable as a subprocess.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "boxprior/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace boxprior;

namespace {

struct Exec {
  int status = -1;
  std::string output;
};

Exec run(const std::string& args) {
  const std::string cmd = std::string(BOXPRIOR_CLI) + " " + args + " 2>&1";
  Exec r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), pipe) != nullptr) r.output += buf;
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("boxprior_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

/// Small, fast training config over a generated 24^3 volume.
fs::path small_setup(const fs::path& dir) {
  const fs::path cfg = dir / "run.cfg";
  write(cfg, "seed = 3\nout = \"" + (dir / "out").string() + "\"\n[data]\nkind = \"hollow_sphere\"\ndims = 24,24,24\n" +
                 "dir = \"" + (dir / "data").string() + "\"\n[loss]\nsteps = 15\nregister_every = 5\n" +
                 "[pretrain]\ncoarse_steps = 20\nrefine_steps = 20\nk = 32\n");
  const Exec g = run("generate --config " + cfg.string());
  EXPECT_EQ(g.status, 0) << g.output;
  return cfg;
}

}  // namespace

TEST(Cli, GenerateWritesFilesAndManifest) {
  const fs::path dir = scratch("generate");
  const fs::path cfg = dir / "g.cfg";
  write(cfg, "[data]\nkind = \"sphere\"\ndims = 32,32,32\n");
  const Exec r = run("generate --config " + cfg.string() + " --seed 7 --out " + (dir / "a").string());
  ASSERT_EQ(r.status, 0) << r.output;
  const json manifest = json::parse(r.output);
  for (const char* f : {"image.json", "image.raw", "gt.json", "gt.raw", "box.json", "template.csv"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    bool listed = false;
    for (const auto& entry : manifest["files"]) listed |= entry.get<std::string>() == (dir / "a" / f).string();
    EXPECT_TRUE(listed) << f;
  }
  EXPECT_EQ(manifest["kind"], "sphere");
  EXPECT_TRUE(manifest.contains("template_pose"));

  const Exec again = run("generate --config " + cfg.string() + " --seed 7 --out " + (dir / "b").string());
  ASSERT_EQ(again.status, 0) << again.output;
  for (const char* f : {"image.raw", "gt.raw", "template.csv", "box.json"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
}

TEST(Cli, InvalidKindNamesKey) {
  const fs::path dir = scratch("badkind");
  write(dir / "bad.cfg", "[data]\nkind = \"cube\"\n");
  const Exec r = run("generate --config " + (dir / "bad.cfg").string() + " --out " + dir.string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("data.kind"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("InvalidConfig"), std::string::npos) << r.output;
}

TEST(Cli, UnknownKeyRejected) {
  const fs::path dir = scratch("unknown");
  write(dir / "bad.cfg", "loss.sttps = 3\n");
  const Exec r = run("check --config " + (dir / "bad.cfg").string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("loss.sttps"), std::string::npos) << r.output;
}

TEST(Cli, TrainBoxOnlyWeightsZeroOtherColumns) {
  const fs::path dir = scratch("train_weights");
  const fs::path cfg = small_setup(dir);
  const Exec r = run("train --config " + cfg.string() + " --weights 1,0,0");
  ASSERT_EQ(r.status, 0) << r.output;
  std::ifstream in(dir / "out" / "trace.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("step,loss,", 0), 0u) << line;
  int rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream s(line);
    for (std::string c; std::getline(s, c, ',');) cols.push_back(c);
    ASSERT_EQ(cols.size(), 7u);
    EXPECT_EQ(std::stod(cols[3]), 0.0) << line;
    EXPECT_EQ(std::stod(cols[4]), 0.0) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 15);
  const json report = read_json(dir / "out" / "report.json");
  EXPECT_TRUE(report["measured"]["metrics"].contains("dice"));
  EXPECT_TRUE(report["measured"]["metrics"].contains("hd95"));
  EXPECT_TRUE(report.contains("reference"));
  EXPECT_EQ(report["config"]["loss.weights"], "1,0,0");
}

TEST(Cli, TrainMissingTemplateNamesPath) {
  const fs::path dir = scratch("missing_template");
  const fs::path cfg = small_setup(dir);
  fs::remove(dir / "data" / "template.csv");
  const Exec r = run("train --config " + cfg.string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find((dir / "data" / "template.csv").string()), std::string::npos) << r.output;
}

TEST(Cli, PretrainEvalRegisterChamfer) {
  const fs::path dir = scratch("pipeline");
  const fs::path cfg = small_setup(dir);
  const Exec p = run("pretrain --config " + cfg.string());
  ASSERT_EQ(p.status, 0) << p.output;
  EXPECT_TRUE(fs::exists(dir / "out" / "head_0.json"));
  EXPECT_EQ(slurp(dir / "out" / "pretrain_0.csv").rfind("step,loss\n", 0), 0u);

  ASSERT_EQ(run("train --config " + cfg.string()).status, 0);
  const Exec e = run("eval --config " + cfg.string());
  ASSERT_EQ(e.status, 0) << e.output;
  EXPECT_EQ(e.output.rfind("dice", 0), 0u) << e.output;
  const json metrics = read_json(dir / "out" / "metrics.json");
  EXPECT_TRUE(metrics["measured"].contains("dice"));

  const fs::path data = dir / "data";
  write(dir / "reg.cfg", slurp(cfg) + "[register]\ntarget = \"" + (data / "template.csv").string() + "\"\n" +
                             "[chamfer]\na = \"" + (data / "template.csv").string() + "\"\nb = \"" +
                             (data / "template.csv").string() + "\"\n");
  const Exec reg = run("register --config " + (dir / "reg.cfg").string());
  ASSERT_EQ(reg.status, 0) << reg.output;
  const auto t = transform_from_json(read_json(dir / "out" / "transform.json"));
  EXPECT_LT((t.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  const Exec ch = run("chamfer --config " + (dir / "reg.cfg").string());
  ASSERT_EQ(ch.status, 0) << ch.output;
  EXPECT_EQ(json::parse(ch.output)["chamfer"], 0.0);
}

TEST(Cli, CheckFilterRunsOnlyMatchingChecks) {
  const Exec r = run("check --filter chamfer");
  ASSERT_EQ(r.status, 0) << r.output;
  std::stringstream s(r.output);
  int lines = 0;
  for (std::string line; std::getline(s, line);) {
    if (line.rfind("PASS", 0) != 0 && line.rfind("FAIL", 0) != 0) continue;
    EXPECT_NE(line.find("chamfer"), std::string::npos) << line;
    ++lines;
  }
  EXPECT_EQ(lines, 2);
}

TEST(Cli, CheckAllPass) {
  const Exec r = run("check");
  EXPECT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}
