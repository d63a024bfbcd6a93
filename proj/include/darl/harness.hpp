#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "darl/dataset.hpp"
#include "darl/eval.hpp"
#include "darl/lpft.hpp"
#include "darl/model.hpp"
#include "darl/ood_select.hpp"

namespace darl {

struct ExperimentConfig {
  SyntheticConfig data;
  ModelArch arch;
  StagePlan plan;
  double rho = 0.1;
  ThresholdPolicy policy = ThresholdPolicy::fpr;
  double alpha_fpr = 0.05;
  std::size_t hist_bins = 40;
};

// Everything that is shared by every configuration trained for one seed:
// the corpus, the pretrained backbone and the DASA selection made with it.
struct ExperimentContext {
  std::uint64_t seed = 0;
  ExperimentConfig cfg;
  SyntheticCorpus corpus;
  ModelParams theta;
  GaussianStats stats;
  NeighborIndex index;
  OodThresholds thresholds;
  std::vector<DistancePair> pool_scores;
  Selection selection;

  Objective objective(bool kl) const { return {CalibrationPrior(cfg.rho), kl}; }
  LabeledDataset d_ood() const { return oracle_label(corpus.pool, corpus.pool_truth, selection.selected_ids); }
};

struct DasaFit {
  GaussianStats stats;
  NeighborIndex index;
  OodThresholds thresholds;
};

// Fits x̄/Σ and the neighbor index on g(train_id) and calibrates d1/d2 on held-out reps.
inline DasaFit fit_dasa(const ModelParams& theta, const LabeledDataset& train_id, const LabeledDataset& val_id,
                        const LabeledDataset& val_ood, ThresholdPolicy policy, double alpha_fpr) {
  const auto reps = representations(theta, train_id.embeddings);
  DasaFit f{fit_gaussian(reps), build_index(reps), {}};
  const auto id_scores = score_rows(representations(theta, val_id.embeddings), f.stats, f.index);
  std::vector<DistancePair> ood_scores;
  if (policy == ThresholdPolicy::f1) ood_scores = score_rows(representations(theta, val_ood.embeddings), f.stats, f.index);
  f.thresholds = calibrate_thresholds(id_scores, policy, alpha_fpr, ood_scores);
  return f;
}

inline ExperimentContext prepare_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentContext ctx;
  ctx.seed = seed;
  ctx.cfg = cfg;
  ctx.cfg.data.seed = seed;
  ctx.cfg.plan.seed = seed;
  ctx.corpus = generate_synthetic(ctx.cfg.data);
  // Generic pretraining: plain cross-entropy, calibration is a task-stage component.
  ctx.theta = pretrain_backbone(ctx.corpus.superset, ctx.cfg.arch, ctx.cfg.plan, ctx.objective(false));
  auto fit = fit_dasa(ctx.theta, ctx.corpus.train_id, ctx.corpus.val_id, ctx.corpus.val_ood, cfg.policy, cfg.alpha_fpr);
  ctx.stats = std::move(fit.stats);
  ctx.index = std::move(fit.index);
  ctx.thresholds = fit.thresholds;
  ctx.pool_scores = score_rows(representations(ctx.theta, ctx.corpus.pool), ctx.stats, ctx.index);
  ctx.selection = apply_thresholds(ctx.corpus.pool.ids(), ctx.pool_scores, ctx.thresholds);
  return ctx;
}

struct SelectionQuality {
  std::size_t selected = 0;
  std::size_t true_ood_selected = 0;
  std::size_t true_ood_total = 0;
  double precision() const { return selected ? static_cast<double>(true_ood_selected) / selected : 0.0; }
  double recall() const { return true_ood_total ? static_cast<double>(true_ood_selected) / true_ood_total : 0.0; }
};

inline SelectionQuality selection_quality(const ExperimentContext& ctx) {
  SelectionQuality q;
  const auto& origin = ctx.corpus.pool_truth.origin;
  for (std::size_t i = 0; i < origin.size(); ++i) {
    const bool ood = origin[i] == Origin::OOD;
    q.true_ood_total += ood;
    if (ctx.selection.report[i].selected) {
      ++q.selected;
      q.true_ood_selected += ood;
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Ablation ladder

inline constexpr std::array<std::string_view, 4> kAblationRows = {"baseline", "+occ", "+occ+dasa", "+occ+dasa+lpft"};

struct ModelEval {
  DomainMetrics metrics;
  std::vector<double> test_scores;  // test_id then test_ood
  std::vector<RelevanceGrade> test_grades;
};

inline ModelEval evaluate_on_test(const ModelParams& phi, const SyntheticCorpus& c) {
  ModelEval e;
  e.metrics = evaluate_model(phi, c.val_id, c.val_ood, c.test_id, c.test_ood);
  e.test_scores = predict(phi, c.test_id.embeddings);
  const auto s = predict(phi, c.test_ood.embeddings);
  e.test_scores.insert(e.test_scores.end(), s.begin(), s.end());
  e.test_grades = c.test_id.grades;
  e.test_grades.insert(e.test_grades.end(), c.test_ood.grades.begin(), c.test_ood.grades.end());
  return e;
}

struct AblationResult {
  std::uint64_t seed = 0;
  std::array<ModelEval, 4> rows;
  SweepResult sweep;  // validation alpha sweep behind row 4
  ModelParams phi_lp, phi_ft;
};

inline AblationResult run_ablation(const ExperimentContext& ctx) {
  if (ctx.selection.selected_ids.empty()) throw DataError("insufficient pool for DASA: no pool row passed both thresholds");
  const auto& c = ctx.corpus;
  const auto& plan = ctx.cfg.plan;
  const auto d_aug = merge_datasets(c.train_id, ctx.d_ood());
  AblationResult r;
  r.seed = ctx.seed;
  r.rows[0] = evaluate_on_test(plain_finetune(ctx.theta, c.train_id, ctx.objective(false), plan).params, c);
  r.rows[1] = evaluate_on_test(plain_finetune(ctx.theta, c.train_id, ctx.objective(true), plan).params, c);
  r.rows[2] = evaluate_on_test(plain_finetune(ctx.theta, d_aug, ctx.objective(true), plan).params, c);
  r.phi_lp = linear_probe(ctx.theta, d_aug, ctx.objective(true), plan).params;
  r.phi_ft = full_finetune(r.phi_lp, d_aug, ctx.objective(true), plan).params;
  r.sweep = alpha_sweep(r.phi_lp, r.phi_ft, plan.alpha_grid, c.val_id, c.val_ood);
  r.rows[3] = evaluate_on_test(interpolate(r.phi_lp, r.phi_ft, r.sweep.best_alpha), c);
  return r;
}

struct MeanRow {
  double f1_id = 0, acc_id = 0, f1_ood = 0, acc_ood = 0;
};

inline std::array<MeanRow, 4> ablation_means(std::span<const AblationResult> results) {
  std::array<MeanRow, 4> m{};
  if (results.empty()) return m;
  for (const auto& r : results) {
    for (std::size_t k = 0; k < 4; ++k) {
      m[k].f1_id += r.rows[k].metrics.id.macro_f1;
      m[k].acc_id += r.rows[k].metrics.id.accuracy;
      m[k].f1_ood += r.rows[k].metrics.ood.macro_f1;
      m[k].acc_ood += r.rows[k].metrics.ood.accuracy;
    }
  }
  const double n = static_cast<double>(results.size());
  for (auto& row : m) {
    row.f1_id /= n;
    row.acc_id /= n;
    row.f1_ood /= n;
    row.acc_ood /= n;
  }
  return m;
}

inline std::string format_ablation(std::string_view comment, std::span<const AblationResult> results) {
  std::string out(comment);
  out += "row\tconfig\tseed\tf1_id\tacc_id\tf1_ood\tacc_ood\n";
  auto line = [&](std::size_t k, const std::string& seed, const MeanRow& m) {
    out += std::to_string(k + 1) + '\t' + std::string(kAblationRows[k]) + '\t' + seed + '\t' + format_fixed(m.f1_id) +
           '\t' + format_fixed(m.acc_id) + '\t' + format_fixed(m.f1_ood) + '\t' + format_fixed(m.acc_ood) + '\n';
  };
  for (const auto& r : results)
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& mt = r.rows[k].metrics;
      line(k, std::to_string(r.seed), {mt.id.macro_f1, mt.id.accuracy, mt.ood.macro_f1, mt.ood.accuracy});
    }
  const auto means = ablation_means(results);
  for (std::size_t k = 0; k < 4; ++k) line(k, "mean", means[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Budget sweep

enum class SelectionStrategy { dasa, random };

inline std::string_view to_string(SelectionStrategy s) { return s == SelectionStrategy::dasa ? "dasa" : "random"; }

// Pool row indices (ascending) chosen for a budget of `count` rows.
// DASA keeps the `count` thresholded rows with the largest min(rank_mahal, rank_knn),
// where ranks are ascending by distance over the whole pool. Random takes a
// prefix of one seeded pool permutation, so smaller budgets nest inside larger ones.
inline std::vector<std::size_t> budget_rows(const ExperimentContext& ctx, SelectionStrategy strategy, std::size_t count) {
  const std::size_t n = ctx.pool_scores.size();
  if (count > n) throw UsageError("budget exceeds pool: " + std::to_string(count) + " > " + std::to_string(n));
  std::vector<std::size_t> rows;
  if (strategy == SelectionStrategy::random) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(ctx.seed, "random_budget"));
    rng.shuffle(perm);
    rows.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(count));
  } else {
    if (count > ctx.selection.selected_ids.size())
      throw UsageError("budget exceeds the DASA-selected set (" + std::to_string(ctx.selection.selected_ids.size()) + " rows)");
    auto ranks = [&](bool mahal) {
      std::vector<std::size_t> order(n), rank(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& pa = ctx.pool_scores[a];
        const auto& pb = ctx.pool_scores[b];
        return mahal ? pa.d_mahal < pb.d_mahal : pa.d_knn < pb.d_knn;
      });
      for (std::size_t r = 0; r < n; ++r) rank[order[r]] = r;
      return rank;
    };
    const auto rm = ranks(true);
    const auto rk = ranks(false);
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < n; ++i)
      if (ctx.selection.report[i].selected) cand.push_back(i);
    std::stable_sort(cand.begin(), cand.end(),
                     [&](std::size_t a, std::size_t b) { return std::min(rm[a], rk[a]) > std::min(rm[b], rk[b]); });
    rows.assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(count));
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

inline std::size_t budget_count(const ExperimentContext& ctx, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw UsageError("budget fractions must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ctx.selection.selected_ids.size())));
}

struct BudgetCell {
  double budget = 0.0;
  SelectionStrategy strategy = SelectionStrategy::dasa;
  std::size_t rows = 0;
  double f1_id = 0.0;
  double f1_ood = 0.0;
};

// Trains the row-3 configuration (plain fine-tune, KL on) on D_id plus the
// oracle-labeled budget rows and evaluates it on the test sets.
inline BudgetCell budget_cell(const ExperimentContext& ctx, SelectionStrategy strategy, double fraction) {
  const auto& c = ctx.corpus;
  const auto rows = budget_rows(ctx, strategy, budget_count(ctx, fraction));
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (auto i : rows) ids.push_back(c.pool.id(i));
  const auto data = ids.empty() ? c.train_id : merge_datasets(c.train_id, oracle_label(c.pool, c.pool_truth, ids));
  const auto phi = plain_finetune(ctx.theta, data, ctx.objective(true), ctx.cfg.plan).params;
  const auto m = evaluate_model(phi, c.val_id, c.val_ood, c.test_id, c.test_ood);
  return {fraction, strategy, rows.size(), m.id.macro_f1, m.ood.macro_f1};
}

inline std::vector<BudgetCell> budget_sweep(const ExperimentContext& ctx, std::span<const double> budgets,
                                            std::span<const SelectionStrategy> strategies) {
  std::vector<BudgetCell> out;
  for (double b : budgets) budget_count(ctx, b);  // validate up front
  for (double b : budgets) {
    if (b == 0.0) {
      // Both strategies reduce to the D_id-only model.
      const auto cell = budget_cell(ctx, SelectionStrategy::dasa, 0.0);
      for (auto s : strategies) {
        auto c = cell;
        c.strategy = s;
        out.push_back(c);
      }
      continue;
    }
    for (auto s : strategies) out.push_back(budget_cell(ctx, s, b));
  }
  return out;
}

inline std::string format_budget_sweep(std::string_view comment, std::span<const std::uint64_t> seeds,
                                       std::span<const std::vector<BudgetCell>> per_seed) {
  std::string out(comment);
  out += "budget\tstrategy\tseed\trows\tf1_id\tf1_ood\n";
  for (std::size_t s = 0; s < per_seed.size(); ++s)
    for (const auto& c : per_seed[s])
      out += format_fixed(c.budget, 2) + '\t' + std::string(to_string(c.strategy)) + '\t' + std::to_string(seeds[s]) +
             '\t' + std::to_string(c.rows) + '\t' + format_fixed(c.f1_id) + '\t' + format_fixed(c.f1_ood) + '\n';
  if (!per_seed.empty()) {
    for (std::size_t j = 0; j < per_seed[0].size(); ++j) {
      double id = 0, ood = 0, rows = 0;
      for (const auto& cells : per_seed) {
        id += cells[j].f1_id;
        ood += cells[j].f1_ood;
        rows += static_cast<double>(cells[j].rows);
      }
      const double n = static_cast<double>(per_seed.size());
      const auto& c0 = per_seed[0][j];
      out += format_fixed(c0.budget, 2) + '\t' + std::string(to_string(c0.strategy)) + "\tmean\t" +
             format_fixed(rows / n, 1) + '\t' + format_fixed(id / n) + '\t' + format_fixed(ood / n) + '\n';
    }
  }
  return out;
}

}  // namespace darl
