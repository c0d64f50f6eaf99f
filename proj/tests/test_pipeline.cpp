#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dgc/pipeline.hpp"

using namespace dgc;
namespace fs = std::filesystem;

namespace {

PipelineConfig parse(const std::string& s) {
  std::istringstream is(s);
  return parse_config(is);
}

}  // namespace

TEST(Config, Defaults) {
  const auto c = parse("");
  EXPECT_EQ(c.model.n_layers, 6);
  EXPECT_EQ(c.model.d_model, 128);
  EXPECT_EQ(c.train.batch_size, 64u);
  EXPECT_DOUBLE_EQ(c.train.lr, 3e-4);
  EXPECT_DOUBLE_EQ(c.min_accuracy, 0.95);
}

TEST(Config, SectionsAndLists) {
  const auto c = parse(
      "[model]\nn_layers = 4\nlr = 1e-3\n[fisher]\nthresholds = 0.2, 0.4\nlayers = 1..3\n"
      "[intervene]\nablation = no\nlayers = 0, 2\n");
  EXPECT_EQ(c.model.n_layers, 4);
  EXPECT_DOUBLE_EQ(c.train.lr, 1e-3);
  EXPECT_EQ(c.thresholds, (std::vector<double>{0.2, 0.4}));
  EXPECT_EQ(c.fisher_layers, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(c.layers, (std::vector<int>{0, 2}));
  EXPECT_FALSE(c.ablation);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse("[extra]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse("x = 1\n"), ConfigError);
  EXPECT_THROW(parse("[model]\nn_layers = many\n"), ConfigError);
  EXPECT_THROW(parse("[model]\nd_model = 10\nn_heads = 4\n"), ConfigError);
  EXPECT_THROW(parse("[fisher]\nthresholds = 0.1, -1\n"), ConfigError);
  EXPECT_THROW(parse("[intervene]\nlayers = 9\n"), ConfigError);
  EXPECT_THROW(parse("[data]\npairs = -3\n"), ConfigError);
  EXPECT_THROW(parse("[report]\ntest_fraction = 1\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/dgc.ini"), ConfigError);
}

TEST(Config, CanonicalFormParsesBack) {
  const auto c = parse("[model]\nn_layers = 3\nweight_decay = 0.1\n[fisher]\nthresholds = 0.3\n");
  const auto back = parse(c.canonical());
  EXPECT_EQ(back.canonical(), c.canonical());
  EXPECT_NE(parse("").canonical(), c.canonical());
}

TEST(Pipeline, SmokeRunThenResume) {
  const fs::path out = fs::temp_directory_path() / "dgc_pipeline_smoke";
  fs::remove_all(out);
  const auto cfg = load_config(std::string(DGC_SOURCE_DIR) + "/configs/smoke.ini");
  std::ostringstream log;

  const auto first = Pipeline(cfg, out, log).run(false);
  EXPECT_EQ(first.ran, stage_names());
  EXPECT_EQ(first.exit_code, kExitAcceptance);  // a 30-step model is far below the bar
  EXPECT_TRUE(first.checks.at("artifacts_complete").get<bool>());
  for (const char* f : {"manifest.json", "config.ini", "model/model.dgcm", "traces/add.dgc1",
                        "fisher/sub.dgcf", "report/summary.md", "report/checks.json",
                        "report/effects_op2.md", "report/flips_op2.md",
                        "report/add_sub_overlap.md"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  const auto second = Pipeline(cfg, out, log).run(true);
  EXPECT_TRUE(second.ran.empty());
  EXPECT_EQ(second.skipped, stage_names());

  // a tampered artifact reruns its stage and everything downstream
  { std::ofstream(out / "fisher/add.dgcf", std::ios::app) << "x"; }
  const auto third = Pipeline(cfg, out, log).run(true);
  ASSERT_FALSE(third.ran.empty());
  EXPECT_EQ(third.ran.front(), "fisher");
  EXPECT_EQ(third.skipped, (std::vector<std::string>{"gen", "train", "capture"}));

  auto other = cfg;
  other.pairs += 1;
  EXPECT_THROW(Pipeline(other, out, log).run(true), ConfigError);
}
