#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>

#include "test_util.hpp"

using namespace darl;
using namespace darl::testing;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(DARL_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace

TEST(Cli, HelpAndVersion) {
  EXPECT_EQ(run("--help").code, 0);
  const auto v = run("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(std::string(kVersion)), std::string::npos);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("train").code, 1);
  EXPECT_EQ(run("train --stage warmup").code, 1);
}

TEST(Cli, PrintConfigAppliesOverrides) {
  const auto r = run("--seed 21 --alpha 0.3 --rho 0.2 --fpr 0.1 --run-dir somewhere --print-config");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["seed"], 21);
  EXPECT_FALSE(j["data"].contains("seed"));
  EXPECT_EQ(j["alpha"], 0.3);
  EXPECT_EQ(j["rho"], 0.2);
  EXPECT_EQ(j["ood"]["alpha_fpr"], 0.1);
  EXPECT_EQ(j["paths"]["data_dir"], "somewhere/data");
  const auto back = config_from_json(j).sync();
  EXPECT_EQ(back.seed, 21u);
}

TEST(Cli, ConfigFileAndInvalidValues) {
  TempDir dir("cli_config");
  write_text(dir / "c.json", R"({"seed": 4, "plan": {"lp": {"epochs": 2}}})");
  const auto r = run("--config " + (dir / "c.json") + " --seed 6 --print-config");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["seed"], 6);
  EXPECT_EQ(j["plan"]["lp"]["epochs"], 2);
  write_text(dir / "bad.json", R"({"sed": 4})");
  EXPECT_EQ(run("--config " + (dir / "bad.json") + " --print-config").code, 1);
  EXPECT_EQ(run("--config " + (dir / "nope.json") + " --print-config").code, 1);
  EXPECT_EQ(run("--alpha 2 --print-config").code, 1);
}

TEST(Cli, ExitCodesFollowErrorKinds) {
  TempDir dir("cli_codes");
  const std::string rd = "--run-dir " + dir.str();
  // Missing artifacts are usage errors.
  EXPECT_EQ(run(rd + " select").code, 1);
  EXPECT_EQ(run(rd + " eval").code, 1);
  // A corrupt checkpoint is a data error.
  write_text(dir / "junk.ckpt", "DARLnot really a checkpoint");
  EXPECT_EQ(run(rd + " eval --checkpoint " + (dir / "junk.ckpt")).code, 2);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.json"));
}

TEST(Cli, TinyEndToEnd) {
  TempDir dir("cli_e2e");
  write_text(dir / "tiny.json", dump_config(tiny_config(dir / "run")));
  const std::string base = "--config " + (dir / "tiny.json");
  ASSERT_EQ(run(base + " gen-data").code, 0);
  ASSERT_EQ(run(base + " train --stage pretrain").code, 0);
  ASSERT_EQ(run(base + " fit-ood").code, 0);
  const auto sel = run(base + " select");
  ASSERT_EQ(sel.code, 0);
  EXPECT_NE(sel.out.find("selected "), std::string::npos);
  ASSERT_EQ(run(base + " train --stage lp").code, 0);
  ASSERT_EQ(run(base + " train --stage ft").code, 0);
  ASSERT_EQ(run(base + " --alpha 0.25 interpolate").code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "run/phi_alpha_0.25.ckpt"));
  ASSERT_EQ(run(base + " --alpha 0.25 eval").code, 0);
  ASSERT_EQ(run(base + " sweep-alpha").code, 0);
  ASSERT_EQ(run(base + " --alpha 0.25 hist").code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "run/MANIFEST.tsv"));
  // Data from another seed is refused.
  EXPECT_EQ(run(base + " --seed 99 fit-ood").code, 1);
}
