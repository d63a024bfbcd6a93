#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace darl;
using namespace darl::testing;

namespace {

ExperimentConfig tiny_experiment(double shift = 6.0) {
  auto c = tiny_config("unused");
  c.data.ood_shift_norm = shift;
  return c.experiment();
}

}  // namespace

class TinyExperiment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { ctx_ = new ExperimentContext(prepare_experiment(tiny_experiment(), 5)); }
  static void TearDownTestSuite() { delete ctx_; }
  static ExperimentContext* ctx_;
};

ExperimentContext* TinyExperiment::ctx_ = nullptr;

TEST_F(TinyExperiment, SelectionMatchesReport) {
  const auto q = selection_quality(*ctx_);
  EXPECT_EQ(q.selected, ctx_->selection.selected_ids.size());
  EXPECT_GT(q.selected, 0u);
  EXPECT_EQ(q.true_ood_total, 600u);
  EXPECT_LE(q.true_ood_selected, q.selected);
  EXPECT_EQ(ctx_->d_ood().size(), q.selected);
}

TEST_F(TinyExperiment, BudgetRows) {
  const auto& ctx = *ctx_;
  const std::size_t sel = ctx.selection.selected_ids.size();
  EXPECT_EQ(budget_count(ctx, 1.0), sel);
  EXPECT_EQ(budget_count(ctx, 0.0), 0u);
  EXPECT_THROW(budget_count(ctx, 1.5), UsageError);

  const auto all = budget_rows(ctx, SelectionStrategy::dasa, sel);
  for (auto i : all) EXPECT_TRUE(ctx.selection.report[i].selected);
  EXPECT_EQ(all.size(), sel);
  EXPECT_THROW(budget_rows(ctx, SelectionStrategy::dasa, sel + 1), UsageError);

  // Smaller budgets nest inside larger ones for both strategies.
  for (auto s : {SelectionStrategy::dasa, SelectionStrategy::random}) {
    const auto small = budget_rows(ctx, s, sel / 4);
    const auto big = budget_rows(ctx, s, sel / 2);
    EXPECT_TRUE(std::includes(big.begin(), big.end(), small.begin(), small.end()));
    EXPECT_TRUE(std::is_sorted(small.begin(), small.end()));
    EXPECT_EQ(std::set(big.begin(), big.end()).size(), big.size());
  }
}

TEST(Harness, PrepareIsDeterministic) {
  const auto a = prepare_experiment(tiny_experiment(), 9);
  const auto b = prepare_experiment(tiny_experiment(), 9);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.selection.selected_ids, b.selection.selected_ids);
  EXPECT_EQ(a.thresholds.d1, b.thresholds.d1);
}

TEST(Harness, NoCovariateShiftSelectsLittle) {
  // OOD clusters at the origin: only the concept shift remains, so the pool
  // should pass the thresholds at roughly the calibrated false-positive rate.
  for (std::uint64_t seed : {3u, 4u}) {
    const auto ctx = prepare_experiment(tiny_experiment(0.0), seed);
    const double frac = static_cast<double>(ctx.selection.selected_ids.size()) /
                        static_cast<double>(ctx.corpus.pool.rows());
    EXPECT_LE(frac, 0.07) << "seed " << seed;
  }
}
