#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "darl/config.hpp"
#include "darl/dataset.hpp"
#include "darl/dataset_io.hpp"
#include "darl/eval.hpp"
#include "darl/harness.hpp"
#include "darl/lpft.hpp"
#include "darl/model.hpp"
#include "darl/ood_select.hpp"

// Run-directory steps behind the darl executable. Each step reads named
// artifacts, writes its own outputs and never touches its inputs.
namespace darl {

namespace artifact {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kManifest = "MANIFEST.tsv";
inline constexpr const char* kDataStamp = "data.json";
inline constexpr const char* kTheta = "theta.ckpt";
inline constexpr const char* kThresholds = "thresholds.json";
inline constexpr const char* kScores = "ood_scores.tsv";
inline constexpr const char* kSelected = "selected_ids.txt";
inline constexpr const char* kDAug = "d_aug";
inline constexpr const char* kPhiLp = "phi_lp.ckpt";
inline constexpr const char* kPhiFt = "phi_ft.ckpt";
inline constexpr const char* kAlphaSweep = "alpha_sweep.tsv";
inline constexpr const char* kMetrics = "metrics.tsv";
inline constexpr const char* kHistogram = "histogram.tsv";
inline constexpr const char* kGnuplot = "histogram.gp";
inline constexpr const char* kAblation = "ablation.tsv";
inline constexpr const char* kAblationAlpha = "ablation_alpha.tsv";
inline constexpr const char* kAblationCalibration = "ablation_calibration.tsv";
inline constexpr const char* kDasaQuality = "dasa_quality.tsv";
inline constexpr const char* kBudgetSweep = "budget_sweep.tsv";
inline constexpr std::array<std::string_view, 6> kSplits = {"train_id", "val_id", "test_id", "val_ood", "test_ood",
                                                            "superset"};
}  // namespace artifact

// "0.60", "0.55", "0.125": two decimals at least, trailing zeros trimmed after that.
inline std::string alpha_tag(double alpha) {
  auto s = format_fixed(alpha, 6);
  while (s.back() == '0' && s[s.size() - 3] != '.') s.pop_back();
  return s;
}

inline std::string alpha_checkpoint_name(double alpha) { return "phi_alpha_" + alpha_tag(alpha) + ".ckpt"; }

class RunDir {
 public:
  explicit RunDir(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.sync();
    cfg_.validate();
    hash_ = config_hash(cfg_);
  }

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }

  std::string path(std::string_view name) const { return (std::filesystem::path(cfg_.run_dir) / name).string(); }
  std::string data_path(std::string_view name) const {
    return (std::filesystem::path(cfg_.resolved_data_dir()) / name).string();
  }

  // Throws MissingArtifactError naming `producer` when `p` is absent.
  static const std::string& require(const std::string& p, std::string_view producer) {
    if (!std::filesystem::exists(p)) throw MissingArtifactError(p, std::string(producer));
    return p;
  }

  void open() const {
    std::filesystem::create_directories(cfg_.run_dir);
    write_text(path(artifact::kConfig), dump_config(cfg_));
  }

  std::string comment() const {
    const std::uint64_t s = cfg_.seed;
    return table_comment(hash_, std::span(&s, 1));
  }
  std::string seeds_comment() const { return table_comment(hash_, cfg_.seeds); }

  // Identity of the generated data: data section plus seed.
  std::string data_stamp() const {
    auto j = config_to_json(cfg_, false);
    nlohmann::ordered_json s;
    s["seed"] = j["seed"];
    s["data"] = j["data"];
    return s.dump(2) + "\n";
  }

  void check_data() const {
    const auto stamp = data_path(artifact::kDataStamp);
    require(stamp, "gen-data");
    if (read_text(stamp) != data_stamp())
      throw UsageError("data in '" + cfg_.resolved_data_dir() +
                       "' was generated with a different data config or seed; rerun 'gen-data'");
  }

  LabeledDataset split(std::string_view name) const {
    check_data();
    const auto stem = data_path(name);
    require(stem + ".emb", "gen-data");
    require(stem + ".labels.tsv", "gen-data");
    return load_dataset(stem);
  }

  EmbeddingMatrix pool() const {
    check_data();
    return load_embeddings(require(data_path("pool.emb"), "gen-data"));
  }

  PoolTruth pool_truth() const {
    check_data();
    const auto t = load_labels(require(data_path("pool_truth.labels.tsv"), "gen-data"));
    return {t.ids, t.grades, t.origin};
  }

  ModelParams checkpoint(const std::string& p, std::string_view producer) const {
    return load_checkpoint(require(p, producer), cfg_.arch);
  }

  // Every run-dir file except the config and the manifest itself, with content hashes.
  void write_manifest() const {
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::recursive_directory_iterator(cfg_.run_dir)) {
      if (!e.is_regular_file()) continue;
      auto rel = std::filesystem::relative(e.path(), cfg_.run_dir).generic_string();
      if (rel == artifact::kConfig || rel == artifact::kManifest) continue;
      names.push_back(std::move(rel));
    }
    std::sort(names.begin(), names.end());
    std::string out = "file\tbytes\tfnv1a64\n";
    for (const auto& n : names) {
      const auto b = read_file_bytes(path(n));
      out += n + '\t' + std::to_string(b.size()) + '\t' +
             hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()))) + '\n';
    }
    write_text(path(artifact::kManifest), out);
  }

 private:
  RunConfig cfg_;
  std::string hash_;
};

namespace detail {

inline std::string format_trace(std::string_view comment, std::string_view stage, std::span<const double> trace) {
  std::string out(comment);
  out += "stage\tepoch\tloss\n";
  for (std::size_t e = 0; e < trace.size(); ++e)
    out += std::string(stage) + '\t' + std::to_string(e) + '\t' + format_fixed(trace[e], 8) + '\n';
  return out;
}

inline void wrote(std::ostream& log, const std::string& p) { log << "wrote " << p << '\n'; }

}  // namespace detail

inline void cmd_gen_data(const RunDir& run, std::ostream& log) {
  const auto c = generate_synthetic(run.config().data);
  std::filesystem::create_directories(run.config().resolved_data_dir());
  const std::pair<std::string_view, const LabeledDataset*> parts[] = {
      {"train_id", &c.train_id}, {"val_id", &c.val_id},     {"test_id", &c.test_id},
      {"val_ood", &c.val_ood},   {"test_ood", &c.test_ood}, {"superset", &c.superset}};
  for (const auto& [name, d] : parts) {
    save_dataset(*d, run.data_path(name));
    detail::wrote(log, run.data_path(name) + ".{emb,labels.tsv}");
  }
  write_embeddings(c.pool, run.data_path("pool.emb"));
  write_text(run.data_path("pool_truth.labels.tsv"), format_labels(c.pool_truth.ids, c.pool_truth.grades, c.pool_truth.origin));
  detail::wrote(log, run.data_path("pool.emb"));
  // Written last: its presence marks a complete data directory.
  write_text(run.data_path(artifact::kDataStamp), run.data_stamp());
}

inline void cmd_pretrain(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  const auto superset = run.split("superset");
  const auto theta = pretrain_backbone(superset, cfg.arch, cfg.plan, cfg.objective(false));
  save_checkpoint(theta, run.path(artifact::kTheta));
  detail::wrote(log, run.path(artifact::kTheta));
}

inline void cmd_fit_ood(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  const auto theta = run.checkpoint(run.path(artifact::kTheta), "train --stage pretrain");
  const auto fit = fit_dasa(theta, run.split("train_id"), run.split("val_id"),
                            cfg.policy == ThresholdPolicy::f1 ? run.split("val_ood") : LabeledDataset{}, cfg.policy,
                            cfg.alpha_fpr);
  write_text(run.path(artifact::kThresholds), thresholds_to_json(fit.thresholds).dump(2) + "\n");
  detail::wrote(log, run.path(artifact::kThresholds));
}

// Scores the pool, keeps rows past both thresholds, oracle-labels them and
// writes D_aug = D_id + D_ood.
inline void cmd_select(const RunDir& run, std::ostream& log, const std::optional<std::string>& thresholds_path = {}) {
  const auto tpath = thresholds_path.value_or(run.path(artifact::kThresholds));
  RunDir::require(tpath, "fit-ood");
  const auto theta = run.checkpoint(run.path(artifact::kTheta), "train --stage pretrain");
  nlohmann::json tj;
  try {
    tj = nlohmann::json::parse(read_text(tpath));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(tpath + ": " + e.what());
  }
  const auto thresholds = thresholds_from_json(tj);
  const auto train_id = run.split("train_id");
  const auto reps = representations(theta, train_id.embeddings);
  const auto stats = fit_gaussian(reps);
  const auto index = build_index(reps);
  const auto pool = run.pool();
  const auto sel = select_ood(representations(theta, pool), stats, index, thresholds);
  if (sel.selected_ids.empty()) throw DataError("insufficient pool for DASA: no pool row passed both thresholds");
  write_text(run.path(artifact::kScores), format_score_report(sel.report));
  std::string ids;
  for (const auto& id : sel.selected_ids) ids += id + '\n';
  write_text(run.path(artifact::kSelected), ids);
  const auto d_aug = merge_datasets(train_id, oracle_label(pool, run.pool_truth(), sel.selected_ids));
  save_dataset(d_aug, run.path(artifact::kDAug));
  log << "selected " << sel.selected_ids.size() << " of " << pool.rows() << " pool rows\n";
  detail::wrote(log, run.path(artifact::kDAug) + ".{emb,labels.tsv}");
}

inline LabeledDataset load_d_aug(const RunDir& run) {
  const auto stem = run.path(artifact::kDAug);
  RunDir::require(stem + ".emb", "select");
  RunDir::require(stem + ".labels.tsv", "select");
  return load_dataset(stem);
}

inline void cmd_train_lp(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  const auto theta = run.checkpoint(run.path(artifact::kTheta), "train --stage pretrain");
  const auto r = linear_probe(theta, load_d_aug(run), cfg.objective(), cfg.plan);
  save_checkpoint(r.params, run.path(artifact::kPhiLp));
  write_text(run.path("lp_trace.tsv"), detail::format_trace(run.comment(), "lp", r.trace));
  detail::wrote(log, run.path(artifact::kPhiLp));
}

inline void cmd_train_ft(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  const auto phi_lp = run.checkpoint(run.path(artifact::kPhiLp), "train --stage lp");
  const auto r = full_finetune(phi_lp, load_d_aug(run), cfg.objective(), cfg.plan);
  save_checkpoint(r.params, run.path(artifact::kPhiFt));
  write_text(run.path("ft_trace.tsv"), detail::format_trace(run.comment(), "ft", r.trace));
  detail::wrote(log, run.path(artifact::kPhiFt));
}

struct InterpolatePaths {
  std::optional<std::string> lp, ft, out;
};

inline std::string cmd_interpolate(const RunDir& run, std::ostream& log, double alpha, const InterpolatePaths& p = {}) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("--alpha must be in [0, 1]");
  const auto phi_lp = run.checkpoint(p.lp.value_or(run.path(artifact::kPhiLp)), "train --stage lp");
  const auto phi_ft = run.checkpoint(p.ft.value_or(run.path(artifact::kPhiFt)), "train --stage ft");
  const auto out = p.out.value_or(run.path(alpha_checkpoint_name(alpha)));
  save_checkpoint(interpolate(phi_lp, phi_ft, alpha), out);
  detail::wrote(log, out);
  return out;
}

inline SweepResult cmd_sweep_alpha(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  const auto phi_lp = run.checkpoint(run.path(artifact::kPhiLp), "train --stage lp");
  const auto phi_ft = run.checkpoint(run.path(artifact::kPhiFt), "train --stage ft");
  auto s = alpha_sweep(phi_lp, phi_ft, cfg.plan.alpha_grid, run.split("val_id"), run.split("val_ood"));
  write_text(run.path(artifact::kAlphaSweep), format_sweep(run.comment(), s));
  log << "best alpha on validation: " << format_fixed(s.best_alpha, 2) << '\n';
  detail::wrote(log, run.path(artifact::kAlphaSweep));
  return s;
}

inline DomainMetrics cmd_eval(const RunDir& run, std::ostream& log, const std::optional<std::string>& checkpoint = {}) {
  const auto& cfg = run.config();
  const auto ck = checkpoint.value_or(run.path(alpha_checkpoint_name(cfg.alpha)));
  const auto phi = run.checkpoint(ck, "interpolate");
  const auto test_id = run.split("test_id");
  const auto test_ood = run.split("test_ood");
  const auto m = evaluate_model(phi, run.split("val_id"), run.split("val_ood"), test_id, test_ood);
  auto comment = run.comment();
  comment += "# checkpoint=" + std::filesystem::path(ck).filename().string() +
             " thresholds_id=" + format_fixed(m.thresholds_id.t_wr, 6) + "," + format_fixed(m.thresholds_id.t_sr, 6) +
             " thresholds_ood=" + format_fixed(m.thresholds_ood.t_wr, 6) + "," + format_fixed(m.thresholds_ood.t_sr, 6) +
             "\n";
  const std::pair<std::string, Metrics> rows[] = {{"test_id", m.id}, {"test_ood", m.ood}};
  write_text(run.path(artifact::kMetrics), format_metrics_rows(comment, rows));
  log << "test macro-F1: ID " << format_fixed(m.id.macro_f1) << ", OOD " << format_fixed(m.ood.macro_f1) << '\n';
  detail::wrote(log, run.path(artifact::kMetrics));
  return m;
}

inline ScoreHistogram cmd_hist(const RunDir& run, std::ostream& log, const std::optional<std::string>& checkpoint = {}) {
  const auto& cfg = run.config();
  const auto phi = run.checkpoint(checkpoint.value_or(run.path(alpha_checkpoint_name(cfg.alpha))), "interpolate");
  const auto test_id = run.split("test_id");
  const auto test_ood = run.split("test_ood");
  auto scores = predict(phi, test_id.embeddings);
  const auto s2 = predict(phi, test_ood.embeddings);
  scores.insert(scores.end(), s2.begin(), s2.end());
  auto grades = test_id.grades;
  grades.insert(grades.end(), test_ood.grades.begin(), test_ood.grades.end());
  const auto h = score_histogram(scores, grades, cfg.hist_bins);
  write_text(run.path(artifact::kHistogram), format_histogram(run.comment(), h));
  write_text(run.path(artifact::kGnuplot), gnuplot_script(artifact::kHistogram, "histogram.png"));
  detail::wrote(log, run.path(artifact::kHistogram));
  return h;
}

inline std::string format_dasa_quality(std::string_view comment, std::span<const std::uint64_t> seeds,
                                       std::span<const SelectionQuality> q) {
  std::string out(comment);
  out += "seed\tselected\ttrue_ood_selected\ttrue_ood_total\tprecision\trecall\n";
  double p = 0, r = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    out += std::to_string(seeds[i]) + '\t' + std::to_string(q[i].selected) + '\t' + std::to_string(q[i].true_ood_selected) +
           '\t' + std::to_string(q[i].true_ood_total) + '\t' + format_fixed(q[i].precision()) + '\t' +
           format_fixed(q[i].recall()) + '\n';
    p += q[i].precision();
    r += q[i].recall();
  }
  if (!q.empty()) {
    const double n = static_cast<double>(q.size());
    out += "mean\t\t\t\t" + format_fixed(p / n) + '\t' + format_fixed(r / n) + '\n';
  }
  return out;
}

inline std::string format_ablation_alpha(std::string_view comment, std::span<const AblationResult> results) {
  std::string out(comment);
  out += "seed\talpha\tf1_id\tf1_ood\tcombined\n";
  if (results.empty()) return out;
  for (const auto& r : results)
    for (const auto& row : r.sweep.rows)
      out += std::to_string(r.seed) + '\t' + format_fixed(row.alpha, 2) + '\t' + format_fixed(row.f1_id) + '\t' +
             format_fixed(row.f1_ood) + '\t' + format_fixed(row.combined()) + '\n';
  const double n = static_cast<double>(results.size());
  for (std::size_t k = 0; k < results[0].sweep.rows.size(); ++k) {
    double id = 0, ood = 0;
    for (const auto& r : results) {
      id += r.sweep.rows[k].f1_id;
      ood += r.sweep.rows[k].f1_ood;
    }
    out += "mean\t" + format_fixed(results[0].sweep.rows[k].alpha, 2) + '\t' + format_fixed(id / n) + '\t' +
           format_fixed(ood / n) + '\t' + format_fixed(0.5 * (id + ood) / n) + '\n';
  }
  return out;
}

struct CalibrationStats {
  double overlap_wr_sr = 0.0;
  double wr_inside = 0.0;  // fraction of WR test scores in (0.5, 0.95)
};

inline CalibrationStats calibration_stats(const ModelEval& e, std::size_t bins) {
  return {score_histogram(e.test_scores, e.test_grades, bins).overlap_wr_sr,
          fraction_inside(e.test_scores, e.test_grades, RelevanceGrade::WR, 0.5, 0.95)};
}

inline std::string format_ablation_calibration(std::string_view comment, std::span<const AblationResult> results,
                                               std::size_t bins) {
  std::string out(comment);
  out += "row\tconfig\tseed\toverlap_wr_sr\twr_inside_0.5_0.95\n";
  std::array<CalibrationStats, 4> mean{};
  for (const auto& r : results)
    for (std::size_t k = 0; k < 4; ++k) {
      const auto s = calibration_stats(r.rows[k], bins);
      mean[k].overlap_wr_sr += s.overlap_wr_sr / static_cast<double>(results.size());
      mean[k].wr_inside += s.wr_inside / static_cast<double>(results.size());
      out += std::to_string(k + 1) + '\t' + std::string(kAblationRows[k]) + '\t' + std::to_string(r.seed) + '\t' +
             format_fixed(s.overlap_wr_sr) + '\t' + format_fixed(s.wr_inside) + '\n';
    }
  for (std::size_t k = 0; k < 4 && !results.empty(); ++k)
    out += std::to_string(k + 1) + '\t' + std::string(kAblationRows[k]) + "\tmean\t" + format_fixed(mean[k].overlap_wr_sr) +
           '\t' + format_fixed(mean[k].wr_inside) + '\n';
  return out;
}

// The ablation and budget sweep build their own corpus per seed; they do not
// read the run's data directory.
inline std::vector<AblationResult> cmd_ablate(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  std::vector<AblationResult> results;
  std::vector<SelectionQuality> quality;
  for (auto seed : cfg.seeds) {
    log << "seed " << seed << ": preparing\n";
    const auto ctx = prepare_experiment(cfg.experiment(), seed);
    quality.push_back(selection_quality(ctx));
    log << "seed " << seed << ": training ablation rows\n";
    results.push_back(run_ablation(ctx));
  }
  const auto c = run.seeds_comment();
  write_text(run.path(artifact::kAblation), format_ablation(c, results));
  write_text(run.path(artifact::kAblationAlpha), format_ablation_alpha(c, results));
  write_text(run.path(artifact::kAblationCalibration), format_ablation_calibration(c, results, cfg.hist_bins));
  write_text(run.path(artifact::kDasaQuality), format_dasa_quality(c, cfg.seeds, quality));
  detail::wrote(log, run.path(artifact::kAblation));
  return results;
}

inline std::vector<std::vector<BudgetCell>> cmd_sweep_budget(const RunDir& run, std::ostream& log) {
  const auto& cfg = run.config();
  if (cfg.budgets.empty()) throw UsageError("no budgets configured");
  const SelectionStrategy strategies[] = {SelectionStrategy::dasa, SelectionStrategy::random};
  std::vector<std::vector<BudgetCell>> cells;
  for (auto seed : cfg.seeds) {
    log << "seed " << seed << ": preparing\n";
    const auto ctx = prepare_experiment(cfg.experiment(), seed);
    cells.push_back(budget_sweep(ctx, cfg.budgets, strategies));
  }
  write_text(run.path(artifact::kBudgetSweep), format_budget_sweep(run.seeds_comment(), cfg.seeds, cells));
  detail::wrote(log, run.path(artifact::kBudgetSweep));
  return cells;
}

inline void cmd_pipeline(const RunDir& run, std::ostream& log) {
  cmd_gen_data(run, log);
  cmd_pretrain(run, log);
  cmd_fit_ood(run, log);
  cmd_select(run, log);
  cmd_train_lp(run, log);
  cmd_train_ft(run, log);
  cmd_interpolate(run, log, run.config().alpha);
  cmd_sweep_alpha(run, log);
  cmd_eval(run, log);
  cmd_hist(run, log);
}

}  // namespace darl
