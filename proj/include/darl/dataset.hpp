#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "darl/common.hpp"

namespace darl {

// Three-point relevance scale. Numeric order is IR < WR < SR.
enum class RelevanceGrade : std::uint8_t { IR = 0, WR = 1, SR = 2 };

inline constexpr std::array<RelevanceGrade, 3> kAllGrades = {RelevanceGrade::SR, RelevanceGrade::WR,
                                                             RelevanceGrade::IR};

inline std::string_view to_string(RelevanceGrade g) {
  switch (g) {
    case RelevanceGrade::SR: return "SR";
    case RelevanceGrade::WR: return "WR";
    case RelevanceGrade::IR: return "IR";
  }
  return "?";
}

inline RelevanceGrade parse_grade(std::string_view s) {
  if (s == "SR") return RelevanceGrade::SR;
  if (s == "WR") return RelevanceGrade::WR;
  if (s == "IR") return RelevanceGrade::IR;
  throw DataError("unknown relevance grade '" + std::string(s) + "'");
}

inline std::size_t grade_index(RelevanceGrade g) { return static_cast<std::size_t>(g); }

enum class Origin : std::uint8_t { ID = 0, OOD = 1 };

inline std::string_view to_string(Origin o) { return o == Origin::ID ? "ID" : "OOD"; }

inline Origin parse_origin(std::string_view s) {
  if (s == "ID") return Origin::ID;
  if (s == "OOD") return Origin::OOD;
  throw DataError("unknown origin tag '" + std::string(s) + "'");
}

// Dense row-major matrix with one opaque id per row.
template <typename T>
class DenseRows {
 public:
  using value_type = T;

  DenseRows() = default;

  explicit DenseRows(std::size_t dims) : dims_(dims) {}

  DenseRows(std::size_t rows, std::size_t dims, std::vector<T> data, std::vector<std::string> ids)
      : rows_(rows), dims_(dims), data_(std::move(data)), ids_(std::move(ids)) {
    if (data_.size() != rows_ * dims_)
      throw DataError("matrix payload has " + std::to_string(data_.size()) + " values, expected " +
                      std::to_string(rows_ * dims_));
    if (ids_.size() != rows_)
      throw DataError("matrix has " + std::to_string(ids_.size()) + " ids for " + std::to_string(rows_) + " rows");
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i]))
        throw DataError("non-finite value at row " + std::to_string(i / std::max<std::size_t>(dims_, 1)));
    }
    std::unordered_set<std::string_view> seen;
    seen.reserve(ids_.size());
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) throw DataError("duplicate id '" + id + "'");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t dims() const noexcept { return dims_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<const T> row(std::size_t i) const { return {data_.data() + i * dims_, dims_}; }
  const std::vector<T>& data() const noexcept { return data_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }

  DenseRows subset(std::span<const std::size_t> indices) const {
    std::vector<T> data;
    std::vector<std::string> ids;
    data.reserve(indices.size() * dims_);
    ids.reserve(indices.size());
    for (std::size_t i : indices) {
      if (i >= rows_) throw std::out_of_range("DenseRows::subset index out of range");
      const auto r = row(i);
      data.insert(data.end(), r.begin(), r.end());
      ids.push_back(ids_[i]);
    }
    return DenseRows(indices.size(), dims_, std::move(data), std::move(ids));
  }

  bool operator==(const DenseRows&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dims_ = 0;
  std::vector<T> data_;
  std::vector<std::string> ids_;
};

// Raw feature rows as stored on disk (float32).
using EmbeddingMatrix = DenseRows<float>;
// Representation-space rows produced by a model (float64).
using RepMatrix = DenseRows<double>;

struct LabeledDataset {
  EmbeddingMatrix embeddings;
  std::vector<RelevanceGrade> grades;
  std::vector<Origin> origin;

  LabeledDataset() = default;

  LabeledDataset(EmbeddingMatrix emb, std::vector<RelevanceGrade> g, std::vector<Origin> o)
      : embeddings(std::move(emb)), grades(std::move(g)), origin(std::move(o)) {
    if (grades.size() != embeddings.rows())
      throw DataError("dataset has " + std::to_string(grades.size()) + " grades for " +
                      std::to_string(embeddings.rows()) + " rows");
    if (origin.size() != embeddings.rows())
      throw DataError("dataset has " + std::to_string(origin.size()) + " origin tags for " +
                      std::to_string(embeddings.rows()) + " rows");
  }

  std::size_t size() const noexcept { return embeddings.rows(); }
  std::size_t dims() const noexcept { return embeddings.dims(); }
  bool empty() const noexcept { return size() == 0; }

  LabeledDataset subset(std::span<const std::size_t> indices) const {
    std::vector<RelevanceGrade> g;
    std::vector<Origin> o;
    g.reserve(indices.size());
    o.reserve(indices.size());
    for (std::size_t i : indices) {
      g.push_back(grades.at(i));
      o.push_back(origin.at(i));
    }
    return {embeddings.subset(indices), std::move(g), std::move(o)};
  }

  std::array<std::size_t, 3> grade_counts() const {
    std::array<std::size_t, 3> c{};
    for (auto g : grades) ++c[grade_index(g)];
    return c;
  }

  bool operator==(const LabeledDataset&) const = default;
};

// D_aug = D_id ∪ D_ood. Rows of `a` come first, then rows of `b`.
inline LabeledDataset merge_datasets(const LabeledDataset& a, const LabeledDataset& b) {
  if (b.empty()) return a;
  if (a.empty()) return b;
  if (a.dims() != b.dims())
    throw DataError("cannot merge datasets with dims " + std::to_string(a.dims()) + " and " +
                    std::to_string(b.dims()));
  std::unordered_set<std::string_view> ids(a.embeddings.ids().begin(), a.embeddings.ids().end());
  for (const auto& id : b.embeddings.ids()) {
    if (ids.contains(id)) throw DataError("duplicate id '" + id + "' in merge");
  }
  std::vector<float> data = a.embeddings.data();
  data.insert(data.end(), b.embeddings.data().begin(), b.embeddings.data().end());
  std::vector<std::string> all_ids = a.embeddings.ids();
  all_ids.insert(all_ids.end(), b.embeddings.ids().begin(), b.embeddings.ids().end());
  std::vector<RelevanceGrade> grades = a.grades;
  grades.insert(grades.end(), b.grades.begin(), b.grades.end());
  std::vector<Origin> origin = a.origin;
  origin.insert(origin.end(), b.origin.begin(), b.origin.end());
  return {EmbeddingMatrix(a.size() + b.size(), a.dims(), std::move(data), std::move(all_ids)), std::move(grades),
          std::move(origin)};
}

// Stratified, seeded partition. Split sizes follow `fractions` by largest
// remainder; rows of each grade are dealt to the split furthest behind its
// quota so per-grade mixes track the input within one row per grade.
inline std::vector<LabeledDataset> split(const LabeledDataset& dataset, std::span<const double> fractions,
                                         std::uint64_t seed) {
  if (dataset.empty()) throw DataError("cannot split an empty dataset");
  if (fractions.empty()) throw UsageError("split needs at least one fraction");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw UsageError("split fractions must be positive");
    total += f;
  }
  if (total > 1.0 + 1e-9) throw UsageError("split fractions sum to more than 1");

  const std::size_t n = dataset.size();
  const std::size_t k = fractions.size();
  // Bucket k (if present) holds the dropped remainder.
  std::vector<double> shares(fractions.begin(), fractions.end());
  const bool has_rest = total < 1.0 - 1e-9;
  if (has_rest) shares.push_back(1.0 - total);
  else
    for (auto& s : shares) s /= total;

  std::vector<std::size_t> quota(shares.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < shares.size(); ++s) {
    const double exact = shares[s] * static_cast<double>(n);
    quota[s] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[s];
    remainders.emplace_back(exact - std::floor(exact), s);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& x, const auto& y) { return x.first > y.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[remainders[i % remainders.size()].second];

  Rng rng(derive_seed(seed, "split"));
  std::array<std::vector<std::size_t>, 3> by_grade;
  for (std::size_t i = 0; i < n; ++i) by_grade[grade_index(dataset.grades[i])].push_back(i);
  std::vector<std::size_t> order;
  order.reserve(n);
  for (auto& group : by_grade) {
    rng.shuffle(group);
    order.insert(order.end(), group.begin(), group.end());
  }

  std::vector<std::vector<std::size_t>> members(shares.size());
  for (std::size_t pos = 0; pos < n; ++pos) {
    std::size_t best = shares.size();
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < shares.size(); ++s) {
      if (members[s].size() >= quota[s]) continue;
      const double deficit = shares[s] * static_cast<double>(pos + 1) - static_cast<double>(members[s].size());
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    members[best].push_back(order[pos]);
  }

  std::vector<LabeledDataset> out;
  out.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    rng.shuffle(members[s]);
    out.push_back(dataset.subset(members[s]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticConfig {
  std::size_t dims = 32;
  std::size_t id_cluster_count = 8;
  std::size_t ood_cluster_count = 4;
  // Distance of each OOD cluster center from the ID center it is anchored to.
  double ood_shift_norm = 6.0;
  // OOD grading projection = w1 * ood_rule_w1 + w2 * ood_rule_w2.
  double ood_rule_w1 = 0.6;
  double ood_rule_w2 = 0.8;
  double label_noise_rate = 0.05;
  double sr_fraction = 0.25;
  double wr_fraction = 0.10;
  std::size_t train_size = 10000;
  std::size_t val_size = 2000;
  std::size_t test_size = 2000;
  std::size_t pool_size = 50000;
  double pool_ood_fraction = 0.30;
  std::size_t ood_val_size = 2000;
  std::size_t ood_test_size = 2000;
  std::size_t superset_extra_clusters = 8;
  std::size_t superset_size = 40000;
  // The first ood_cluster_count extra clusters reuse the OOD cluster centers.
  bool superset_covers_ood = true;
  std::uint64_t seed = 7;

  void validate() const {
    auto positive = [](const char* field, std::size_t v) {
      if (v == 0) throw ConfigError(field, "must be > 0");
    };
    positive("dims", dims);
    positive("id_cluster_count", id_cluster_count);
    positive("ood_cluster_count", ood_cluster_count);
    positive("train_size", train_size);
    positive("val_size", val_size);
    positive("test_size", test_size);
    positive("pool_size", pool_size);
    positive("ood_val_size", ood_val_size);
    positive("ood_test_size", ood_test_size);
    positive("superset_extra_clusters", superset_extra_clusters);
    positive("superset_size", superset_size);
    if (dims < 2) throw ConfigError("dims", "must be >= 2 (two planted projections)");
    if (!(label_noise_rate >= 0.0 && label_noise_rate < 0.5)) throw ConfigError("label_noise_rate", "must be in [0, 0.5)");
    if (!(ood_shift_norm >= 0.0) || !std::isfinite(ood_shift_norm)) throw ConfigError("ood_shift_norm", "must be finite and >= 0");
    if (!(sr_fraction > 0.0 && wr_fraction > 0.0 && sr_fraction + wr_fraction < 1.0))
      throw ConfigError("sr_fraction", "grade mix must leave a positive share for every grade");
    if (!(pool_ood_fraction > 0.0 && pool_ood_fraction < 1.0)) throw ConfigError("pool_ood_fraction", "must be in (0, 1)");
    if (!std::isfinite(ood_rule_w1) || !std::isfinite(ood_rule_w2) || (ood_rule_w1 == 0.0 && ood_rule_w2 == 0.0))
      throw ConfigError("ood_rule_w1", "OOD projection weights must be finite and not both zero");
  }
};

// Per-row ground truth for the unlabeled pool, aligned with the pool rows.
struct PoolTruth {
  std::vector<std::string> ids;
  std::vector<RelevanceGrade> grades;
  std::vector<Origin> origin;
};

struct SyntheticCorpus {
  LabeledDataset train_id;
  LabeledDataset val_id;
  LabeledDataset test_id;
  LabeledDataset val_ood;
  LabeledDataset test_ood;
  EmbeddingMatrix pool;
  PoolTruth pool_truth;
  // Broad labeled superset used only to pretrain the backbone.
  LabeledDataset superset;
};

namespace detail {

// One region of feature space with planted linear grading rules: either one
// projection shared by all centers or one projection per center.
struct Domain {
  std::vector<std::vector<double>> centers;
  std::vector<std::vector<double>> projections;
  double ir_below = 0.0;  // score < ir_below -> IR
  double sr_from = 0.0;   // score >= sr_from -> SR, otherwise WR

  double score(std::span<const float> x, std::size_t center) const {
    const auto& w = projections[projections.size() == 1 ? 0 : center];
    double s = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) s += w[d] * static_cast<double>(x[d]);
    return s;
  }

  RelevanceGrade grade(std::span<const float> x, std::size_t center) const {
    const double s = score(x, center);
    if (s < ir_below) return RelevanceGrade::IR;
    if (s >= sr_from) return RelevanceGrade::SR;
    return RelevanceGrade::WR;
  }

  std::size_t draw(Rng& rng, std::vector<float>& out) const {
    const std::size_t k = rng.index(centers.size());
    for (double cd : centers[k]) out.push_back(static_cast<float>(cd + rng.normal()));
    return k;
  }
};

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t dims, double scale = 1.0) {
  std::vector<double> v(dims);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
}

// Quantile cut points of the domain's score so grades follow the requested mix.
inline void calibrate_domain(Domain& dom, const SyntheticConfig& cfg, Rng& rng) {
  constexpr std::size_t kCalibrationDraws = 20000;
  std::vector<double> scores;
  scores.reserve(kCalibrationDraws);
  std::vector<float> buf;
  for (std::size_t i = 0; i < kCalibrationDraws; ++i) {
    buf.clear();
    const auto k = dom.draw(rng, buf);
    scores.push_back(dom.score(buf, k));
  }
  std::sort(scores.begin(), scores.end());
  const double ir_share = 1.0 - cfg.sr_fraction - cfg.wr_fraction;
  auto at = [&](double q) {
    const auto i = static_cast<std::size_t>(std::floor(q * static_cast<double>(scores.size())));
    return scores[std::min(i, scores.size() - 1)];
  };
  dom.ir_below = at(ir_share);
  dom.sr_from = at(ir_share + cfg.wr_fraction);
}

struct World {
  Domain id;
  Domain ood;
  Domain extra;
};

inline World make_world(const SyntheticConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "world"));
  World w;
  for (std::size_t k = 0; k < cfg.id_cluster_count; ++k) w.id.centers.push_back(gaussian_vector(rng, cfg.dims));

  // Two orthonormal planted projections.
  auto w1 = gaussian_vector(rng, cfg.dims);
  normalize(w1);
  auto w2 = gaussian_vector(rng, cfg.dims);
  double dot = 0.0;
  for (std::size_t d = 0; d < cfg.dims; ++d) dot += w1[d] * w2[d];
  for (std::size_t d = 0; d < cfg.dims; ++d) w2[d] -= dot * w1[d];
  normalize(w2);

  w.id.projections = {w1};
  std::vector<double> rotated(cfg.dims);
  for (std::size_t d = 0; d < cfg.dims; ++d) rotated[d] = cfg.ood_rule_w1 * w1[d] + cfg.ood_rule_w2 * w2[d];
  w.ood.projections = {rotated};

  // OOD centers lie ood_shift_norm from the origin along random directions.
  for (std::size_t k = 0; k < cfg.ood_cluster_count; ++k) {
    auto u = gaussian_vector(rng, cfg.dims);
    normalize(u);
    for (auto& x : u) x *= cfg.ood_shift_norm;
    w.ood.centers.push_back(std::move(u));
  }
  // The pretraining superset sees the shifted regions (unlabeled for the task:
  // they carry the superset's own rule) so the backbone has features for them.
  for (std::size_t k = 0; k < cfg.superset_extra_clusters; ++k) {
    auto rule = gaussian_vector(rng, cfg.dims);
    normalize(rule);
    w.extra.projections.push_back(std::move(rule));
    if (cfg.superset_covers_ood && k < cfg.ood_cluster_count) {
      w.extra.centers.push_back(w.ood.centers[k]);
      continue;
    }
    auto u = gaussian_vector(rng, cfg.dims);
    normalize(u);
    auto c = w.id.centers[k % cfg.id_cluster_count];
    for (std::size_t d = 0; d < cfg.dims; ++d) c[d] += cfg.ood_shift_norm * u[d];
    w.extra.centers.push_back(std::move(c));
  }

  calibrate_domain(w.id, cfg, rng);
  calibrate_domain(w.ood, cfg, rng);
  calibrate_domain(w.extra, cfg, rng);
  return w;
}

inline RelevanceGrade apply_noise(RelevanceGrade g, double rate, Rng& rng) {
  if (rate > 0.0 && rng.uniform() < rate) return static_cast<RelevanceGrade>(rng.index(3));
  return g;
}

struct DrawnRows {
  std::vector<float> data;
  std::vector<RelevanceGrade> grades;
  std::vector<Origin> origin;
};

inline void draw_rows(const Domain& dom, Origin tag, std::size_t n, double noise, Rng& rng, DrawnRows& out) {
  const std::size_t dims = dom.centers.front().size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = out.data.size();
    const auto k = dom.draw(rng, out.data);
    const auto g = dom.grade(std::span<const float>(out.data.data() + start, dims), k);
    out.grades.push_back(apply_noise(g, noise, rng));
    out.origin.push_back(tag);
  }
}

inline std::string make_id(std::string_view prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return std::string(prefix) + digits;
}

// Shuffles drawn rows and assigns sequential ids so ids carry no origin signal.
inline LabeledDataset finish(DrawnRows rows, std::size_t dims, std::string_view prefix, Rng& rng) {
  const std::size_t n = rows.grades.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<float> data;
  data.reserve(n * dims);
  std::vector<RelevanceGrade> grades;
  std::vector<Origin> origin;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = perm[i];
    data.insert(data.end(), rows.data.begin() + static_cast<std::ptrdiff_t>(src * dims),
                rows.data.begin() + static_cast<std::ptrdiff_t>((src + 1) * dims));
    grades.push_back(rows.grades[src]);
    origin.push_back(rows.origin[src]);
    ids.push_back(make_id(prefix, i));
  }
  return {EmbeddingMatrix(n, dims, std::move(data), std::move(ids)), std::move(grades), std::move(origin)};
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto world = detail::make_world(cfg);
  const double noise = cfg.label_noise_rate;

  auto make = [&](std::string_view name, std::string_view prefix, auto&& fill) {
    Rng rng(derive_seed(cfg.seed, name));
    detail::DrawnRows rows;
    fill(rng, rows);
    return detail::finish(std::move(rows), cfg.dims, prefix, rng);
  };

  SyntheticCorpus c;
  c.train_id = make("train_id", "t", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.id, Origin::ID, cfg.train_size, noise, r, rows);
  });
  c.val_id = make("val_id", "v", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.id, Origin::ID, cfg.val_size, noise, r, rows);
  });
  c.test_id = make("test_id", "e", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.id, Origin::ID, cfg.test_size, noise, r, rows);
  });
  c.val_ood = make("val_ood", "w", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.ood, Origin::OOD, cfg.ood_val_size, noise, r, rows);
  });
  c.test_ood = make("test_ood", "o", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.ood, Origin::OOD, cfg.ood_test_size, noise, r, rows);
  });

  const auto n_pool_ood = static_cast<std::size_t>(
      std::llround(cfg.pool_ood_fraction * static_cast<double>(cfg.pool_size)));
  auto pool = make("pool", "u", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.ood, Origin::OOD, n_pool_ood, noise, r, rows);
    detail::draw_rows(world.id, Origin::ID, cfg.pool_size - n_pool_ood, noise, r, rows);
  });
  c.pool_truth.ids = pool.embeddings.ids();
  c.pool_truth.grades = pool.grades;
  c.pool_truth.origin = pool.origin;
  c.pool = std::move(pool.embeddings);

  const std::size_t half = cfg.superset_size / 2;
  c.superset = make("superset", "s", [&](Rng& r, auto& rows) {
    detail::draw_rows(world.id, Origin::ID, half, noise, r, rows);
    detail::draw_rows(world.extra, Origin::OOD, cfg.superset_size - half, noise, r, rows);
  });
  return c;
}

// Simulated annotation: labels for selected pool ids come from the pool truth.
// Selected rows are tagged OOD (they enter training as D_ood).
inline LabeledDataset oracle_label(const EmbeddingMatrix& pool, const PoolTruth& truth,
                                   std::span<const std::string> selected_ids) {
  std::unordered_map<std::string_view, std::size_t> row_of;
  row_of.reserve(pool.rows());
  for (std::size_t i = 0; i < pool.rows(); ++i) row_of.emplace(pool.id(i), i);
  std::unordered_map<std::string_view, std::size_t> truth_of;
  truth_of.reserve(truth.ids.size());
  for (std::size_t i = 0; i < truth.ids.size(); ++i) truth_of.emplace(truth.ids[i], i);

  std::vector<std::size_t> rows;
  std::vector<RelevanceGrade> grades;
  rows.reserve(selected_ids.size());
  for (const auto& id : selected_ids) {
    auto r = row_of.find(id);
    if (r == row_of.end()) throw DataError("selected id '" + id + "' is not in the pool");
    auto t = truth_of.find(id);
    if (t == truth_of.end()) throw DataError("selected id '" + id + "' has no truth label");
    rows.push_back(r->second);
    grades.push_back(truth.grades[t->second]);
  }
  auto emb = pool.subset(rows);
  std::vector<Origin> origin(rows.size(), Origin::OOD);
  return {std::move(emb), std::move(grades), std::move(origin)};
}

}  // namespace darl
