#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "darl/common.hpp"
#include "darl/dataset.hpp"

namespace darl {

// Fitted Gaussian over in-distribution representations. `factor` holds the
// Cholesky factorization of covariance + ridge * I.
struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  Eigen::LLT<Eigen::MatrixXd> factor;
  double ridge = 0.0;

  std::size_t dims() const noexcept { return static_cast<std::size_t>(mean.size()); }
};

inline double default_ridge(const Eigen::MatrixXd& covariance) {
  if (covariance.rows() == 0) return 0.0;
  return 1e-4 * covariance.trace() / static_cast<double>(covariance.rows());
}

namespace detail {

template <typename T>
Eigen::MatrixXd to_eigen(const DenseRows<T>& m) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.dims()));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t d = 0; d < m.dims(); ++d)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = static_cast<double>(r[d]);
  }
  return out;
}

inline Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  const double denom = x.rows() > 1 ? static_cast<double>(x.rows() - 1) : 1.0;
  Eigen::MatrixXd cov = (centered.transpose() * centered) / denom;
  // Exact symmetry regardless of GEMM rounding.
  return 0.5 * (cov + cov.transpose());
}

}  // namespace detail

inline GaussianStats fit_gaussian(const Eigen::MatrixXd& x, double ridge) {
  if (x.rows() == 0 || x.cols() == 0) throw DataError("fit_gaussian: empty representation matrix");
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw UsageError("fit_gaussian: ridge must be finite and >= 0");
  GaussianStats s;
  s.mean = x.colwise().mean().transpose();
  s.covariance = detail::sample_covariance(x, s.mean);
  s.ridge = ridge;
  Eigen::MatrixXd a = s.covariance;
  a.diagonal().array() += ridge;
  s.factor.compute(a);
  const double scale = a.diagonal().maxCoeff();
  const Eigen::VectorXd pivots = s.factor.matrixL().toDenseMatrix().diagonal();
  const bool ok = s.factor.info() == Eigen::Success && scale > 0.0 && pivots.allFinite() &&
                  pivots.array().square().minCoeff() > 1e-10 * scale;
  if (!ok)
    throw NumericalError("singular covariance (ridge " + std::to_string(ridge) +
                         "); retry with a larger ridge epsilon");
  return s;
}

template <typename T>
GaussianStats fit_gaussian(const DenseRows<T>& reps, double ridge) {
  return fit_gaussian(detail::to_eigen(reps), ridge);
}

// Uses the default ridge 1e-4 * trace(cov) / dims.
template <typename T>
GaussianStats fit_gaussian(const DenseRows<T>& reps) {
  const auto x = detail::to_eigen(reps);
  if (x.rows() == 0) throw DataError("fit_gaussian: empty representation matrix");
  const Eigen::VectorXd mean = x.colwise().mean().transpose();
  return fit_gaussian(x, default_ridge(detail::sample_covariance(x, mean)));
}

// sqrt((x - mean)^T (cov + ridge I)^{-1} (x - mean)) via one triangular solve, O(b^2).
inline double mahalanobis(const GaussianStats& stats, std::span<const double> x) {
  if (x.size() != stats.dims())
    throw DataError("mahalanobis: query has " + std::to_string(x.size()) + " dims, stats have " +
                    std::to_string(stats.dims()));
  Eigen::VectorXd diff(static_cast<Eigen::Index>(x.size()));
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (!std::isfinite(x[d])) throw DataError("mahalanobis: non-finite query");
    diff(static_cast<Eigen::Index>(d)) = x[d] - stats.mean(static_cast<Eigen::Index>(d));
  }
  const Eigen::VectorXd y = stats.factor.matrixL().solve(diff);
  return std::sqrt(y.squaredNorm());
}

// Batched form; results follow row order.
template <typename T>
std::vector<double> mahalanobis_all(const GaussianStats& stats, const DenseRows<T>& reps) {
  if (reps.dims() != stats.dims()) throw DataError("mahalanobis: dims mismatch");
  std::vector<double> out(reps.rows());
  constexpr std::size_t kBlock = 1024;
  for (std::size_t start = 0; start < reps.rows(); start += kBlock) {
    const std::size_t n = std::min(kBlock, reps.rows() - start);
    Eigen::MatrixXd diff(static_cast<Eigen::Index>(stats.dims()), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = reps.row(start + i);
      for (std::size_t d = 0; d < stats.dims(); ++d)
        diff(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(i)) =
            static_cast<double>(r[d]) - stats.mean(static_cast<Eigen::Index>(d));
    }
    stats.factor.matrixL().solveInPlace(diff);
    for (std::size_t i = 0; i < n; ++i)
      out[start + i] = std::sqrt(diff.col(static_cast<Eigen::Index>(i)).squaredNorm());
  }
  return out;
}

// Unit-normalized reference rows for exact cosine nearest-neighbour search.
class NeighborIndex {
 public:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  NeighborIndex() = default;
  NeighborIndex(RowMatrix rows, std::vector<std::string> ids) : rows_(std::move(rows)), ids_(std::move(ids)) {}

  std::size_t size() const noexcept { return static_cast<std::size_t>(rows_.rows()); }
  std::size_t dims() const noexcept { return static_cast<std::size_t>(rows_.cols()); }
  const RowMatrix& rows() const noexcept { return rows_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

 private:
  RowMatrix rows_;
  std::vector<std::string> ids_;
};

template <typename T>
NeighborIndex build_index(const DenseRows<T>& reps) {
  if (reps.empty()) throw DataError("build_index: no reference rows");
  NeighborIndex::RowMatrix rows(static_cast<Eigen::Index>(reps.rows()), static_cast<Eigen::Index>(reps.dims()));
  for (std::size_t i = 0; i < reps.rows(); ++i) {
    const auto r = reps.row(i);
    double norm = 0.0;
    for (auto v : r) norm += static_cast<double>(v) * static_cast<double>(v);
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw DataError("build_index: zero-norm row '" + reps.id(i) + "'");
    for (std::size_t d = 0; d < reps.dims(); ++d)
      rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = static_cast<double>(r[d]) / norm;
  }
  return NeighborIndex(std::move(rows), reps.ids());
}

// min_i 1 - cos(x, ref_i), exhaustive.
inline double knn_distance(const NeighborIndex& index, std::span<const double> x) {
  if (x.size() != index.dims())
    throw DataError("knn_distance: query has " + std::to_string(x.size()) + " dims, index has " +
                    std::to_string(index.dims()));
  Eigen::VectorXd q(static_cast<Eigen::Index>(x.size()));
  for (std::size_t d = 0; d < x.size(); ++d) q(static_cast<Eigen::Index>(d)) = x[d];
  const double norm = q.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) throw DataError("knn_distance: zero or non-finite query vector");
  q /= norm;
  const double best = (index.rows() * q).maxCoeff();
  return std::clamp(1.0 - best, 0.0, 2.0);
}

// Batched exact search: blocked matrix products, row maxima of cosine.
template <typename T>
std::vector<double> knn_distances(const NeighborIndex& index, const DenseRows<T>& queries) {
  if (queries.dims() != index.dims()) throw DataError("knn_distance: dims mismatch");
  std::vector<double> out(queries.rows());
  constexpr std::size_t kBlock = 256;
  NeighborIndex::RowMatrix q;
  for (std::size_t start = 0; start < queries.rows(); start += kBlock) {
    const std::size_t n = std::min(kBlock, queries.rows() - start);
    q.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(index.dims()));
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = queries.row(start + i);
      double norm = 0.0;
      for (auto v : r) norm += static_cast<double>(v) * static_cast<double>(v);
      norm = std::sqrt(norm);
      if (!(norm > 0.0)) throw DataError("knn_distance: zero query vector '" + queries.id(start + i) + "'");
      for (std::size_t d = 0; d < index.dims(); ++d)
        q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = static_cast<double>(r[d]) / norm;
    }
    const Eigen::MatrixXd cos = q * index.rows().transpose();
    for (std::size_t i = 0; i < n; ++i)
      out[start + i] = std::clamp(1.0 - cos.row(static_cast<Eigen::Index>(i)).maxCoeff(), 0.0, 2.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Thresholds

enum class ThresholdPolicy { fpr, f1 };

inline std::string_view to_string(ThresholdPolicy p) { return p == ThresholdPolicy::fpr ? "fpr" : "f1"; }

inline ThresholdPolicy parse_threshold_policy(std::string_view s) {
  if (s == "fpr") return ThresholdPolicy::fpr;
  if (s == "f1") return ThresholdPolicy::f1;
  throw UsageError("unknown threshold policy '" + std::string(s) + "' (expected fpr or f1)");
}

// Calibrated thresholds satisfy d1 > 0 and 0 <= d2 <= 2. Hand-built values
// passed to select_ood are only required to be non-NaN.
struct OodThresholds {
  double d1 = std::numeric_limits<double>::infinity();
  double d2 = std::numeric_limits<double>::infinity();
  ThresholdPolicy policy = ThresholdPolicy::fpr;
  double alpha_fpr = 0.05;
};

struct DistancePair {
  double d_mahal = 0.0;
  double d_knn = 0.0;
};

// Nearest-rank quantile of sorted values: the ceil(q n)-th smallest, q in [0, 1].
inline double nearest_rank(std::span<const double> sorted, double q) {
  const double n = static_cast<double>(sorted.size());
  const auto rank = static_cast<std::ptrdiff_t>(std::ceil(q * n - 1e-9));
  const auto i = std::clamp<std::ptrdiff_t>(rank - 1, 0, static_cast<std::ptrdiff_t>(sorted.size()) - 1);
  return sorted[static_cast<std::size_t>(i)];
}

inline constexpr std::size_t kMinCalibrationSamples = 50;
inline constexpr std::size_t kF1GridLevels = 21;

struct DetectionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, flagged = 0;
  double f1() const {
    const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) + static_cast<double>(fn);
    return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
};

inline DetectionCounts detection_counts(std::span<const DistancePair> id, std::span<const DistancePair> ood, double d1,
                                        double d2) {
  DetectionCounts c;
  for (const auto& p : id) {
    if (p.d_mahal > d1 && p.d_knn > d2) ++c.fp;
  }
  for (const auto& p : ood) {
    if (p.d_mahal > d1 && p.d_knn > d2) ++c.tp;
    else ++c.fn;
  }
  c.flagged = c.tp + c.fp;
  return c;
}

inline OodThresholds calibrate_thresholds(std::span<const DistancePair> id_val, ThresholdPolicy policy,
                                          double alpha_fpr = 0.05, std::span<const DistancePair> ood_val = {}) {
  if (id_val.size() < kMinCalibrationSamples)
    throw DataError("calibrate_thresholds: need at least " + std::to_string(kMinCalibrationSamples) +
                    " validation samples, got " + std::to_string(id_val.size()));
  if (!(alpha_fpr >= 0.0 && alpha_fpr < 1.0)) throw UsageError("alpha_fpr must be in [0, 1)");
  OodThresholds t;
  t.policy = policy;
  t.alpha_fpr = alpha_fpr;

  auto sorted_column = [](std::span<const DistancePair> a, std::span<const DistancePair> b, bool mahal) {
    std::vector<double> v;
    v.reserve(a.size() + b.size());
    for (const auto& p : a) v.push_back(mahal ? p.d_mahal : p.d_knn);
    for (const auto& p : b) v.push_back(mahal ? p.d_mahal : p.d_knn);
    std::sort(v.begin(), v.end());
    return v;
  };

  if (policy == ThresholdPolicy::fpr) {
    const auto m = sorted_column(id_val, {}, true);
    const auto k = sorted_column(id_val, {}, false);
    t.d1 = nearest_rank(m, 1.0 - alpha_fpr);
    t.d2 = nearest_rank(k, 1.0 - alpha_fpr);
  } else {
    if (ood_val.empty()) throw DataError("calibrate_thresholds: F1 policy needs OOD-labeled validation samples");
    const auto m = sorted_column(id_val, ood_val, true);
    const auto k = sorted_column(id_val, ood_val, false);
    double best_f1 = -1.0;
    std::size_t best_flagged = 0;
    for (std::size_t i = 0; i < kF1GridLevels; ++i) {
      const double d1 = nearest_rank(m, static_cast<double>(i) / static_cast<double>(kF1GridLevels - 1));
      for (std::size_t j = 0; j < kF1GridLevels; ++j) {
        const double d2 = nearest_rank(k, static_cast<double>(j) / static_cast<double>(kF1GridLevels - 1));
        const auto c = detection_counts(id_val, ood_val, d1, d2);
        const double f1 = c.f1();
        if (f1 > best_f1 || (f1 == best_f1 && c.flagged < best_flagged)) {
          best_f1 = f1;
          best_flagged = c.flagged;
          t.d1 = d1;
          t.d2 = d2;
        }
      }
    }
  }
  t.d2 = std::clamp(t.d2, 0.0, 2.0);
  return t;
}

// ---------------------------------------------------------------------------
// Selection

struct ScoreRow {
  std::string id;
  double d_mahal = 0.0;
  double d_knn = 0.0;
  bool flag_mahal = false;
  bool flag_knn = false;
  bool selected = false;
};

struct Selection {
  std::vector<std::string> selected_ids;  // U_ood, in pool order
  std::vector<ScoreRow> report;           // one row per pool row, in pool order
};

template <typename T>
std::vector<DistancePair> score_rows(const DenseRows<T>& reps, const GaussianStats& stats, const NeighborIndex& index) {
  if (reps.dims() != stats.dims() || reps.dims() != index.dims())
    throw DataError("score_rows: representation dims do not match fitted stats/index");
  const auto m = mahalanobis_all(stats, reps);
  const auto k = knn_distances(index, reps);
  std::vector<DistancePair> out(reps.rows());
  for (std::size_t i = 0; i < reps.rows(); ++i) out[i] = {m[i], k[i]};
  return out;
}

inline Selection apply_thresholds(const std::vector<std::string>& ids, std::span<const DistancePair> scores,
                                  const OodThresholds& t) {
  if (std::isnan(t.d1) || std::isnan(t.d2)) throw UsageError("select_ood: NaN threshold");
  Selection s;
  s.report.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    ScoreRow r{ids[i], scores[i].d_mahal, scores[i].d_knn, scores[i].d_mahal > t.d1, scores[i].d_knn > t.d2, false};
    r.selected = r.flag_mahal && r.flag_knn;
    if (r.selected) s.selected_ids.push_back(r.id);
    s.report.push_back(std::move(r));
  }
  return s;
}

// U_ood = { x : d_mahal(x) > d1 and d_knn(x) > d2 }.
template <typename T>
Selection select_ood(const DenseRows<T>& pool_reps, const GaussianStats& stats, const NeighborIndex& index,
                     const OodThresholds& thresholds) {
  const auto scores = score_rows(pool_reps, stats, index);
  return apply_thresholds(pool_reps.ids(), scores, thresholds);
}

inline std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string format_score_report(std::span<const ScoreRow> report) {
  std::string out = "id\td_mahal\td_knn\tflag_mahal\tflag_knn\tselected\n";
  for (const auto& r : report) {
    out += r.id + '\t' + format_g6(r.d_mahal) + '\t' + format_g6(r.d_knn) + '\t' + (r.flag_mahal ? "1" : "0") + '\t' +
           (r.flag_knn ? "1" : "0") + '\t' + (r.selected ? "1" : "0") + '\n';
  }
  return out;
}

inline nlohmann::json thresholds_to_json(const OodThresholds& t) {
  return {{"d1", t.d1}, {"d2", t.d2}, {"policy", std::string(to_string(t.policy))}, {"alpha_fpr", t.alpha_fpr}};
}

inline OodThresholds thresholds_from_json(const nlohmann::json& j) {
  try {
    OodThresholds t;
    t.d1 = j.at("d1").get<double>();
    t.d2 = j.at("d2").get<double>();
    t.policy = parse_threshold_policy(j.at("policy").get<std::string>());
    t.alpha_fpr = j.at("alpha_fpr").get<double>();
    if (!(t.d1 > 0.0) || !(t.d2 >= 0.0 && t.d2 <= 2.0)) throw DataError("thresholds out of range");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed thresholds JSON: ") + e.what());
  }
}

}  // namespace darl
