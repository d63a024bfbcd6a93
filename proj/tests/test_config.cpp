#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace darl;
using namespace darl::testing;

namespace {

std::string field_of(const nlohmann::json& j) {
  try {
    config_from_json(j).sync().validate();
  } catch (const ConfigError& e) {
    return e.field;
  }
  return "";
}

}  // namespace

TEST(RunConfig, DefaultsValidate) {
  RunConfig c;
  c.sync();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.resolved_data_dir(), "run/data");
  EXPECT_EQ(c.arch.input_dim, 32u);
  EXPECT_EQ(c.plan.alpha_grid.size(), 11u);
  EXPECT_EQ(c.seeds.size(), 5u);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.seed = 19;
  c.data.ood_shift_norm = 4.5;
  c.arch.hidden = {10, 4};
  c.plan.ft = {7, 2e-4};
  c.policy = ThresholdPolicy::f1;
  c.alpha = 0.35;
  c.seeds = {1, 2};
  c.budgets = {0.5};
  c.sync();
  const auto back = config_from_json(nlohmann::json::parse(dump_config(c))).sync();
  EXPECT_EQ(dump_config(back), dump_config(c));
  EXPECT_EQ(back.arch, c.arch);
  EXPECT_EQ(back.policy, ThresholdPolicy::f1);
  EXPECT_EQ(back.plan.ft.epochs, 7u);
}

TEST(RunConfig, PartialDocumentKeepsDefaults) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"plan": {"lp": {"lr": 0.01}}, "rho": 0.2})"));
  EXPECT_EQ(c.plan.lp.lr, 0.01);
  EXPECT_EQ(c.plan.lp.epochs, StagePlan{}.lp.epochs);
  EXPECT_EQ(c.rho, 0.2);
  EXPECT_EQ(c.alpha, 0.6);
}

TEST(RunConfig, RejectionsNameTheField) {
  using nlohmann::json;
  EXPECT_EQ(field_of(json::parse(R"({"bogus": 1})")), "bogus");
  EXPECT_EQ(field_of(json::parse(R"({"plan": {"lp": {"epoch": 3}}})")), "plan.lp.epoch");
  EXPECT_EQ(field_of(json::parse(R"({"data": {"dims": "many"}})")), "data.dims");
  EXPECT_EQ(field_of(json::parse(R"({"data": {"train_size": -5}})")), "data.train_size");
  EXPECT_EQ(field_of(json::parse(R"({"seeds": [1, -2]})")), "seeds");
  EXPECT_EQ(field_of(json::parse(R"({"seeds": [1, 1]})")), "seeds");
  EXPECT_EQ(field_of(json::parse(R"({"rho": 0.5})")), "rho");
  EXPECT_EQ(field_of(json::parse(R"({"alpha": 1.5})")), "alpha");
  EXPECT_EQ(field_of(json::parse(R"({"ood": {"policy": "median"}})")), "ood.policy");
  EXPECT_EQ(field_of(json::parse(R"({"ood": {"alpha_fpr": 0}})")), "ood.alpha_fpr");
  EXPECT_EQ(field_of(json::parse(R"({"arch": {"activation": "relu"}})")), "arch.activation");
  EXPECT_EQ(field_of(json::parse(R"({"plan": {"pretrain": {"epochs": 0}}})")), "plan.pretrain.epochs");
  EXPECT_EQ(field_of(json::parse(R"({"hist_bins": 1})")), "hist_bins");
  EXPECT_EQ(field_of(json::parse(R"([1, 2])")), "<root>");
}

TEST(RunConfig, LoadFileErrors) {
  TempDir dir("config");
  EXPECT_THROW(load_config(dir / "missing.json"), UsageError);
  write_text(dir / "bad.json", "{not json");
  try {
    load_config(dir / "bad.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field, "<file>");
  }
  write_text(dir / "ok.json", R"({"seed": 5})");
  EXPECT_EQ(load_config(dir / "ok.json").seed, 5u);
}

TEST(ConfigHash, IgnoresPathsTracksEverythingElse) {
  RunConfig a;
  a.sync();
  RunConfig b = a;
  b.run_dir = "elsewhere";
  b.data_dir = "/tmp/data";
  EXPECT_EQ(config_hash(a), config_hash(b));
  RunConfig c = a;
  c.seed = 8;
  c.sync();
  EXPECT_NE(config_hash(a), config_hash(c));
  RunConfig d = a;
  d.plan.lp.lr = 1e-3;
  EXPECT_NE(config_hash(a), config_hash(d));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(RunConfig, SyncPropagatesSeedAndDims) {
  RunConfig c;
  c.seed = 42;
  c.data.dims = 12;
  c.sync();
  EXPECT_EQ(c.data.seed, 42u);
  EXPECT_EQ(c.plan.seed, 42u);
  EXPECT_EQ(c.arch.input_dim, 12u);
}
