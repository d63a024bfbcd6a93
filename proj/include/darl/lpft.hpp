#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "darl/common.hpp"
#include "darl/dataset.hpp"
#include "darl/eval.hpp"
#include "darl/model.hpp"

namespace darl {

struct StageSpec {
  std::size_t epochs = 0;
  double lr = 0.0;
};

struct StagePlan {
  StageSpec pretrain{30, 1e-3};
  StageSpec lp{30, 5e-4};
  StageSpec ft{30, 5e-4};
  std::size_t batch_size = 64;
  std::vector<double> alpha_grid = default_alpha_grid();
  std::uint64_t seed = 7;

  static std::vector<double> default_alpha_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
    return g;
  }

  void validate() const {
    auto stage = [](const char* name, const StageSpec& s, bool allow_zero) {
      if (!allow_zero && s.epochs == 0) throw ConfigError(std::string("plan.") + name + ".epochs", "must be > 0");
      if (!(s.lr > 0.0) || !std::isfinite(s.lr)) throw ConfigError(std::string("plan.") + name + ".lr", "must be > 0");
    };
    stage("pretrain", pretrain, false);
    stage("lp", lp, false);
    stage("ft", ft, true);
    if (batch_size == 0) throw ConfigError("plan.batch_size", "must be > 0");
    validate_alpha_grid(alpha_grid);
  }

  static void validate_alpha_grid(std::span<const double> grid) {
    if (grid.empty()) throw ConfigError("alpha_grid", "must not be empty");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw ConfigError("alpha_grid", "values must lie in [0, 1]");
      if (i > 0 && !(grid[i] > grid[i - 1])) throw ConfigError("alpha_grid", "must be sorted and unique");
    }
  }
};

struct StageResult {
  ModelParams params;
  // Full-dataset mean loss before the first update and after every epoch.
  std::vector<double> trace;
};

namespace detail {

inline void check_finite_loss(double l, const char* stage) {
  if (!std::isfinite(l)) throw NumericalError(std::string(stage) + ": loss became non-finite");
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stage, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, stage, epoch));
  rng.shuffle(order);
  return order;
}

// Minibatch Adam over all of `mask`, fixed epoch budget, seeded batch order.
inline StageResult train_stage(ModelParams params, const LabeledDataset& data, const Objective& obj, Trainable mask,
                               const StageSpec& spec, std::size_t batch_size, std::uint64_t seed,
                               std::string_view stage) {
  if (data.empty()) throw DataError(std::string(stage) + ": empty training set");
  if (data.dims() != params.arch.input_dim)
    throw DataError(std::string(stage) + ": data dims do not match arch " + params.arch.fingerprint());
  StageResult r;
  r.trace.push_back(dataset_loss(params, data, obj).total);
  check_finite_loss(r.trace.back(), stage.data());
  auto opt = make_adam(params.arch, mask, spec.lr);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), seed, stage, epoch);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t n = std::min(batch_size, order.size() - start);
      const auto batch = make_batch(data, std::span(order).subspan(start, n));
      const auto lg = loss_and_grad(params, batch, obj, mask);
      check_finite_loss(lg.loss.total, stage.data());
      adam_step(opt, params, lg.grad);
    }
    r.trace.push_back(dataset_loss(params, data, obj).total);
    check_finite_loss(r.trace.back(), stage.data());
  }
  r.params = std::move(params);
  return r;
}

// Head-only training over representations cached once; the backbone is frozen
// so g(x) never changes. Full-data losses use the same row blocks as
// dataset_loss and are bit-identical to it.
inline StageResult train_head(ModelParams params, const LabeledDataset& data, const Objective& obj,
                              const StageSpec& spec, std::size_t batch_size, std::uint64_t seed,
                              std::string_view stage) {
  if (data.empty()) throw DataError(std::string(stage) + ": empty training set");
  if (data.dims() != params.arch.input_dim)
    throw DataError(std::string(stage) + ": data dims do not match arch " + params.arch.fingerprint());
  std::vector<Eigen::MatrixXd> blocks;
  for (std::size_t start = 0; start < data.size(); start += kEvalBlock) {
    const std::size_t n = std::min(kEvalBlock, data.size() - start);
    blocks.push_back(backbone_forward(params, rows_to_eigen(data.embeddings, start, n)).back());
  }
  auto full_loss = [&] {
    LossSums total;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto z = head_logits(params, blocks[b]);
      const auto s = loss_sums(z, std::span(data.grades).subspan(b * kEvalBlock, blocks[b].rows()), obj, nullptr);
      total.ce += s.ce;
      total.kl += s.kl;
      total.total += s.total;
    }
    return mean_parts(total, data.size()).total;
  };
  const std::size_t rd = params.arch.rep_dim();
  auto rep_row = [&](std::size_t i) { return blocks[i / kEvalBlock].row(static_cast<Eigen::Index>(i % kEvalBlock)); };

  StageResult r;
  r.trace.push_back(full_loss());
  check_finite_loss(r.trace.back(), stage.data());
  auto opt = make_adam(params.arch, Trainable::head, spec.lr);
  std::vector<double> g(params.values.size(), 0.0);
  Eigen::MatrixXd reps;
  std::vector<RelevanceGrade> grades;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), seed, stage, epoch);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t n = std::min(batch_size, order.size() - start);
      reps.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(rd));
      grades.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        reps.row(static_cast<Eigen::Index>(i)) = rep_row(order[start + i]);
        grades[i] = data.grades[order[start + i]];
      }
      const auto z = head_logits(params, reps);
      Eigen::VectorXd dz;
      const auto sums = loss_sums(z, grades, obj, &dz);
      check_finite_loss(sums.total, stage.data());
      dz /= static_cast<double>(n);
      head_gradient(params, reps, dz, g);
      adam_step(opt, params, g);
    }
    r.trace.push_back(full_loss());
    check_finite_loss(r.trace.back(), stage.data());
  }
  r.params = std::move(params);
  return r;
}

inline ModelParams with_fresh_head(ModelParams base, std::uint64_t seed) {
  const auto fresh = init_model(base.arch, derive_seed(seed, "fresh_head"));
  const auto h = fresh.head();
  std::copy(h.begin(), h.end(), base.head_mut().begin());
  return base;
}

}  // namespace detail

// Supervised pretraining of backbone + temporary head on a broad superset.
// The temporary head is zeroed on return; only the backbone is meant to be reused.
inline ModelParams pretrain_backbone(const LabeledDataset& superset, const ModelArch& arch, const StagePlan& plan,
                                     const Objective& obj = {}) {
  plan.validate();
  if (superset.empty()) throw DataError("pretrain_backbone: empty superset");
  auto r = detail::train_stage(init_model(arch, derive_seed(plan.seed, "pretrain_init")), superset, obj,
                               Trainable::all, plan.pretrain, plan.batch_size, plan.seed, "pretrain");
  auto head = r.params.head_mut();
  std::fill(head.begin(), head.end(), 0.0);
  return std::move(r.params);
}

// Stage 1: backbone frozen, fresh head trained on D_aug.
inline StageResult linear_probe(const ModelParams& theta, const LabeledDataset& d_aug, const Objective& obj,
                                const StagePlan& plan) {
  plan.validate();
  if (d_aug.dims() != theta.arch.input_dim)
    throw DataError("linear_probe: backbone fingerprint " + theta.arch.fingerprint() + " does not match data dims " +
                    std::to_string(d_aug.dims()));
  return detail::train_head(detail::with_fresh_head(theta, plan.seed), d_aug, obj, plan.lp, plan.batch_size, plan.seed,
                            "lp");
}

// Stage 2: every parameter trainable, initialized at phi_lp.
inline StageResult full_finetune(const ModelParams& phi_lp, const LabeledDataset& d_aug, const Objective& obj,
                                 const StagePlan& plan) {
  plan.validate();
  return detail::train_stage(phi_lp, d_aug, obj, Trainable::all, plan.ft, plan.batch_size, plan.seed, "ft");
}

// Non-LPFT baseline: the fine-tune stage run directly from the pretrained
// backbone with a fresh head, no linear probe first.
inline StageResult plain_finetune(const ModelParams& theta, const LabeledDataset& data, const Objective& obj,
                                  const StagePlan& plan) {
  plan.validate();
  return detail::train_stage(detail::with_fresh_head(theta, plan.seed), data, obj, Trainable::all, plan.ft,
                             plan.batch_size, plan.seed, "plain");
}

struct SweepRow {
  double alpha = 0.0;
  double f1_id = 0.0;
  double f1_ood = 0.0;
  double acc_id = 0.0;
  double acc_ood = 0.0;

  double combined() const { return 0.5 * (f1_id + f1_ood); }
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double best_alpha = 0.0;

  const SweepRow& best() const {
    for (const auto& r : rows)
      if (r.alpha == best_alpha) return r;
    throw std::logic_error("best alpha not in sweep");
  }
};

// Evaluates interpolate(phi_lp, phi_ft, alpha) on the validation sets for every
// grid point. Best alpha maximizes the mean of ID and OOD macro-F1; ties go to
// the smaller alpha.
inline SweepResult alpha_sweep(const ModelParams& phi_lp, const ModelParams& phi_ft, std::span<const double> grid,
                               const LabeledDataset& val_id, const LabeledDataset& val_ood) {
  if (grid.empty()) throw UsageError("alpha_sweep: empty grid");
  StagePlan::validate_alpha_grid(grid);
  if (val_id.empty() || val_ood.empty()) throw DataError("alpha_sweep: needs both ID and OOD validation sets");
  SweepResult out;
  double best = -1.0;
  for (double a : grid) {
    const auto phi = interpolate(phi_lp, phi_ft, a);
    const auto m = evaluate_model(phi, val_id, val_ood, val_id, val_ood);
    SweepRow row{a, m.id.macro_f1, m.ood.macro_f1, m.id.accuracy, m.ood.accuracy};
    if (row.combined() > best) {
      best = row.combined();
      out.best_alpha = a;
    }
    out.rows.push_back(row);
  }
  return out;
}

inline std::string format_sweep(std::string_view comment, const SweepResult& s) {
  std::string out(comment);
  out += "# best_alpha=" + format_fixed(s.best_alpha, 2) + "\n";
  out += "alpha\tf1_id\tf1_ood\tacc_id\tacc_ood\tcombined\n";
  for (const auto& r : s.rows)
    out += format_fixed(r.alpha, 2) + '\t' + format_fixed(r.f1_id) + '\t' + format_fixed(r.f1_ood) + '\t' +
           format_fixed(r.acc_id) + '\t' + format_fixed(r.acc_ood) + '\t' + format_fixed(r.combined()) + '\n';
  return out;
}

}  // namespace darl
