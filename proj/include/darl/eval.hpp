#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "darl/common.hpp"
#include "darl/dataset.hpp"
#include "darl/model.hpp"

namespace darl {

// Score -> grade rule: p < t_wr -> IR, t_wr <= p < t_sr -> WR, p >= t_sr -> SR.
struct GradeThresholds {
  double t_wr = 1.0 / 3.0;
  double t_sr = 2.0 / 3.0;
  bool degenerate = false;  // fitted on scores without signal; defaults returned

  RelevanceGrade classify(double p) const {
    if (p < t_wr) return RelevanceGrade::IR;
    if (p < t_sr) return RelevanceGrade::WR;
    return RelevanceGrade::SR;
  }
};

struct GradeMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;    // labelled with this grade
  std::size_t predicted = 0;  // predicted as this grade
};

struct Metrics {
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::array<GradeMetrics, 3> per_grade{};  // indexed by grade_index
  std::size_t n = 0;

  const GradeMetrics& grade(RelevanceGrade g) const { return per_grade[grade_index(g)]; }
};

inline double f1_from_counts(std::size_t tp, std::size_t predicted, std::size_t support) {
  const double denom = static_cast<double>(predicted + support);
  return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

// Macro-F1 averages per-grade F1 over the grades that occur in labels or predictions.
inline Metrics metrics_from_predictions(std::span<const RelevanceGrade> predicted, std::span<const RelevanceGrade> truth) {
  if (predicted.size() != truth.size()) throw DataError("metrics: length mismatch");
  if (truth.empty()) throw DataError("metrics: empty input");
  Metrics m;
  m.n = truth.size();
  std::array<std::size_t, 3> tp{};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++m.per_grade[grade_index(truth[i])].support;
    ++m.per_grade[grade_index(predicted[i])].predicted;
    if (predicted[i] == truth[i]) {
      ++tp[grade_index(truth[i])];
      ++correct;
    }
  }
  double f1_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    auto& gm = m.per_grade[g];
    gm.precision = gm.predicted ? static_cast<double>(tp[g]) / static_cast<double>(gm.predicted) : 0.0;
    gm.recall = gm.support ? static_cast<double>(tp[g]) / static_cast<double>(gm.support) : 0.0;
    gm.f1 = f1_from_counts(tp[g], gm.predicted, gm.support);
    if (gm.support + gm.predicted > 0) {
      f1_sum += gm.f1;
      ++present;
    }
  }
  m.macro_f1 = present ? f1_sum / static_cast<double>(present) : 0.0;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  return m;
}

inline Metrics compute_metrics(std::span<const double> scores, std::span<const RelevanceGrade> grades,
                               const GradeThresholds& t) {
  if (scores.size() != grades.size()) throw DataError("compute_metrics: scores and grades differ in length");
  if (scores.empty()) throw DataError("compute_metrics: empty input");
  std::vector<RelevanceGrade> pred(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = t.classify(scores[i]);
  return metrics_from_predictions(pred, grades);
}

inline constexpr std::size_t kThresholdPercentiles = 99;

// Exhaustive search over (t_wr, t_sr) drawn from the 1st..99th nearest-rank
// percentiles of the validation scores, maximizing macro-F1. Ties prefer the
// wider WR band (in percentile steps), then the lower t_wr.
inline GradeThresholds fit_grade_thresholds(std::span<const double> scores, std::span<const RelevanceGrade> grades) {
  if (scores.size() != grades.size()) throw DataError("fit_grade_thresholds: length mismatch");
  std::array<std::size_t, 3> support{};
  for (auto g : grades) ++support[grade_index(g)];
  for (auto g : kAllGrades)
    if (support[grade_index(g)] == 0)
      throw DataError("fit_grade_thresholds: grade " + std::string(to_string(g)) + " missing from validation data");

  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> sorted(n);
  for (std::size_t i = 0; i < n; ++i) sorted[i] = scores[order[i]];
  if (sorted.front() == sorted.back()) return GradeThresholds{1.0 / 3.0, 2.0 / 3.0, true};

  // prefix[k][g] = rows of grade g among the k smallest scores
  std::vector<std::array<std::size_t, 3>> prefix(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    prefix[i + 1] = prefix[i];
    ++prefix[i + 1][grade_index(grades[order[i]])];
  }

  struct Cut {
    double value;
    std::size_t below;  // rows with score < value
  };
  std::vector<Cut> cuts;
  for (std::size_t k = 1; k <= kThresholdPercentiles; ++k) {
    const double q = static_cast<double>(k) / static_cast<double>(kThresholdPercentiles + 1);
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
    const double v = sorted[std::clamp<std::size_t>(rank, 1, n) - 1];
    const auto below = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
    cuts.push_back({v, below});
  }

  const std::size_t ir = grade_index(RelevanceGrade::IR);
  const std::size_t wr = grade_index(RelevanceGrade::WR);
  const std::size_t sr = grade_index(RelevanceGrade::SR);
  double best = -1.0;
  std::size_t best_width = 0;
  GradeThresholds out;
  bool found = false;
  for (std::size_t i = 0; i < cuts.size(); ++i) {
    for (std::size_t j = i + 1; j < cuts.size(); ++j) {
      if (!(cuts[i].value < cuts[j].value)) continue;
      const auto& lo = prefix[cuts[i].below];
      const auto& hi = prefix[cuts[j].below];
      const std::size_t pred_ir = cuts[i].below;
      const std::size_t pred_wr = cuts[j].below - cuts[i].below;
      const std::size_t pred_sr = n - cuts[j].below;
      const double f_ir = f1_from_counts(lo[ir], pred_ir, support[ir]);
      const double f_wr = f1_from_counts(hi[wr] - lo[wr], pred_wr, support[wr]);
      const double f_sr = f1_from_counts(support[sr] - hi[sr], pred_sr, support[sr]);
      const double macro = (f_ir + f_wr + f_sr) / 3.0;
      const std::size_t width = j - i;
      if (macro > best || (macro == best && width > best_width)) {
        best = macro;
        best_width = width;
        out = {cuts[i].value, cuts[j].value, false};
        found = true;
      }
    }
  }
  if (!found) return GradeThresholds{1.0 / 3.0, 2.0 / 3.0, true};
  return out;
}

// ---------------------------------------------------------------------------
// Score distributions

struct ScoreHistogram {
  std::size_t bins = 0;
  std::array<std::vector<double>, 3> h;  // normalized per grade, indexed by grade_index
  double overlap_wr_sr = 0.0;            // sum over bins of min(h_WR, h_SR)

  double left(std::size_t b) const { return static_cast<double>(b) / static_cast<double>(bins); }
  double right(std::size_t b) const { return static_cast<double>(b + 1) / static_cast<double>(bins); }
  const std::vector<double>& of(RelevanceGrade g) const { return h[grade_index(g)]; }
};

inline ScoreHistogram score_histogram(std::span<const double> scores, std::span<const RelevanceGrade> grades,
                                      std::size_t bins = 40) {
  if (bins < 2) throw UsageError("score_histogram: bins must be >= 2");
  if (scores.size() != grades.size()) throw DataError("score_histogram: length mismatch");
  ScoreHistogram out;
  out.bins = bins;
  for (auto& v : out.h) v.assign(bins, 0.0);
  std::array<std::size_t, 3> count{};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], 0.0, 1.0);
    const auto b = std::min(bins - 1, static_cast<std::size_t>(std::floor(p * static_cast<double>(bins))));
    out.h[grade_index(grades[i])][b] += 1.0;
    ++count[grade_index(grades[i])];
  }
  for (std::size_t g = 0; g < 3; ++g)
    if (count[g])
      for (auto& x : out.h[g]) x /= static_cast<double>(count[g]);
  const auto& wr = out.of(RelevanceGrade::WR);
  const auto& sr = out.of(RelevanceGrade::SR);
  for (std::size_t b = 0; b < bins; ++b) out.overlap_wr_sr += std::min(wr[b], sr[b]);
  return out;
}

// Fraction of `grade` scores strictly inside (lo, hi).
inline double fraction_inside(std::span<const double> scores, std::span<const RelevanceGrade> grades, RelevanceGrade grade,
                              double lo, double hi) {
  std::size_t n = 0, inside = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (grades[i] != grade) continue;
    ++n;
    if (scores[i] > lo && scores[i] < hi) ++inside;
  }
  return n ? static_cast<double>(inside) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Model evaluation protocol: each domain gets its own grade thresholds, fitted
// on that domain's validation scores and applied to its evaluation set.

struct DomainMetrics {
  GradeThresholds thresholds_id;
  GradeThresholds thresholds_ood;
  Metrics id;
  Metrics ood;
};

inline DomainMetrics evaluate_model(const ModelParams& params, const LabeledDataset& fit_id,
                                    const LabeledDataset& fit_ood, const LabeledDataset& eval_id,
                                    const LabeledDataset& eval_ood) {
  DomainMetrics out;
  out.thresholds_id = fit_grade_thresholds(predict(params, fit_id.embeddings), fit_id.grades);
  out.thresholds_ood = fit_ood.empty() ? out.thresholds_id
                                       : fit_grade_thresholds(predict(params, fit_ood.embeddings), fit_ood.grades);
  out.id = compute_metrics(predict(params, eval_id.embeddings), eval_id.grades, out.thresholds_id);
  out.ood = compute_metrics(predict(params, eval_ood.embeddings), eval_ood.grades, out.thresholds_ood);
  return out;
}

// ---------------------------------------------------------------------------
// Table output

inline std::string format_fixed(double v, int decimals = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// Leading comment line for every emitted table.
inline std::string table_comment(std::string_view config_hash, std::span<const std::uint64_t> seeds) {
  std::string s = "# config_hash=" + std::string(config_hash) + " seeds=";
  for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
  s += " version=" + std::string(kVersion) + " f1=macro(SR,WR,IR)\n";
  return s;
}

inline std::string format_metrics_rows(std::string_view comment, std::span<const std::pair<std::string, Metrics>> rows) {
  std::string out(comment);
  out += "set\tn\tmacro_f1\taccuracy\tf1_SR\tf1_WR\tf1_IR\tprecision_SR\tprecision_WR\tprecision_IR\trecall_SR\trecall_WR\trecall_IR\n";
  for (const auto& [name, m] : rows) {
    out += name + '\t' + std::to_string(m.n) + '\t' + format_fixed(m.macro_f1) + '\t' + format_fixed(m.accuracy);
    for (auto g : kAllGrades) out += '\t' + format_fixed(m.grade(g).f1);
    for (auto g : kAllGrades) out += '\t' + format_fixed(m.grade(g).precision);
    for (auto g : kAllGrades) out += '\t' + format_fixed(m.grade(g).recall);
    out += '\n';
  }
  return out;
}

inline std::string format_histogram(std::string_view comment, const ScoreHistogram& h) {
  std::string out(comment);
  out += "# overlap_wr_sr=" + format_fixed(h.overlap_wr_sr, 6) + "\n";
  out += "bin_left\tbin_right\th_SR\th_WR\th_IR\n";
  for (std::size_t b = 0; b < h.bins; ++b) {
    out += format_fixed(h.left(b), 4) + '\t' + format_fixed(h.right(b), 4) + '\t' +
           format_fixed(h.of(RelevanceGrade::SR)[b], 6) + '\t' + format_fixed(h.of(RelevanceGrade::WR)[b], 6) + '\t' +
           format_fixed(h.of(RelevanceGrade::IR)[b], 6) + '\n';
  }
  return out;
}

// gnuplot script plotting a histogram TSV written by format_histogram.
inline std::string gnuplot_script(std::string_view tsv_name, std::string_view png_name) {
  std::string s;
  s += "set terminal pngcairo size 800,500\n";
  s += "set output '" + std::string(png_name) + "'\n";
  s += "set datafile separator '\\t'\n";
  s += "set style fill transparent solid 0.4\n";
  s += "set xlabel 'score'\nset ylabel 'fraction'\nset xrange [0:1]\n";
  s += "plot '" + std::string(tsv_name) + "' skip 3 using (($1+$2)/2):3 with boxes title 'SR', \\\n";
  s += "     '' skip 3 using (($1+$2)/2):4 with boxes title 'WR', \\\n";
  s += "     '' skip 3 using (($1+$2)/2):5 with boxes title 'IR'\n";
  return s;
}

}  // namespace darl
