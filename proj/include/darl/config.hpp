#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "darl/common.hpp"
#include "darl/dataset.hpp"
#include "darl/dataset_io.hpp"
#include "darl/harness.hpp"
#include "darl/lpft.hpp"
#include "darl/model.hpp"
#include "darl/ood_select.hpp"

namespace darl {

// Everything a run needs, resolvable from one JSON file. Every field has a default.
struct RunConfig {
  std::string run_dir = "run";
  std::string data_dir;  // empty: <run_dir>/data
  std::uint64_t seed = 7;
  SyntheticConfig data;
  ModelArch arch;
  StagePlan plan;
  double rho = 0.1;
  ThresholdPolicy policy = ThresholdPolicy::fpr;
  double alpha_fpr = 0.05;
  double alpha = 0.6;
  std::vector<std::uint64_t> seeds = {11, 12, 13, 14, 15};
  std::vector<double> budgets = {0.25, 0.5, 0.75, 1.0};
  std::size_t hist_bins = 40;

  std::string resolved_data_dir() const { return data_dir.empty() ? run_dir + "/data" : data_dir; }

  // Seeds the per-run fields; arch input follows the data.
  RunConfig& sync() {
    data.seed = seed;
    plan.seed = seed;
    arch.input_dim = data.dims;
    return *this;
  }

  void validate() const {
    data.validate();
    arch.validate();
    plan.validate();
    CalibrationPrior{rho};
    if (!(alpha_fpr > 0.0 && alpha_fpr < 1.0)) throw ConfigError("ood.alpha_fpr", "must be in (0, 1)");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha", "must be in [0, 1]");
    if (seeds.empty()) throw ConfigError("seeds", "must not be empty");
    if (std::set(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("seeds", "must be unique");
    for (double b : budgets)
      if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("budgets", "fractions must lie in [0, 1]");
    if (hist_bins < 2) throw ConfigError("hist_bins", "must be >= 2");
    if (run_dir.empty()) throw ConfigError("paths.run_dir", "must not be empty");
  }

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.data = data;
    e.arch = arch;
    e.plan = plan;
    e.rho = rho;
    e.policy = policy;
    e.alpha_fpr = alpha_fpr;
    e.hist_bins = hist_bins;
    return e;
  }

  Objective objective(bool kl = true) const { return {CalibrationPrior(rho), kl}; }
};

namespace detail {

// Reads keys out of one JSON object and rejects whatever is left over.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    // get<> would wrap -1 into a huge unsigned value.
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_unsigned()) throw ConfigError(field(key), "expected a non-negative integer");
    } else if constexpr (requires { typename T::value_type; } && !std::is_same_v<T, std::string>) {
      if constexpr (std::is_unsigned_v<typename T::value_type>) {
        if (!it->is_array()) throw ConfigError(field(key), "expected an array");
        for (const auto& v : *it)
          if (!v.is_number_unsigned()) throw ConfigError(field(key), "expected non-negative integers");
      }
    }
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key), "wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

inline void read_stage(const nlohmann::json* j, const std::string& path, StageSpec& s) {
  if (!j) return;
  ObjectReader r(*j, path);
  r.get("epochs", s.epochs);
  r.get("lr", s.lr);
  r.finish();
}

}  // namespace detail

inline nlohmann::ordered_json config_to_json(const RunConfig& c, bool with_paths = true) {
  nlohmann::ordered_json j;
  if (with_paths) j["paths"] = {{"run_dir", c.run_dir}, {"data_dir", c.resolved_data_dir()}};
  j["seed"] = c.seed;
  const auto& d = c.data;
  j["data"] = {{"dims", d.dims},
               {"id_cluster_count", d.id_cluster_count},
               {"ood_cluster_count", d.ood_cluster_count},
               {"ood_shift_norm", d.ood_shift_norm},
               {"ood_rule_w1", d.ood_rule_w1},
               {"ood_rule_w2", d.ood_rule_w2},
               {"label_noise_rate", d.label_noise_rate},
               {"sr_fraction", d.sr_fraction},
               {"wr_fraction", d.wr_fraction},
               {"train_size", d.train_size},
               {"val_size", d.val_size},
               {"test_size", d.test_size},
               {"pool_size", d.pool_size},
               {"pool_ood_fraction", d.pool_ood_fraction},
               {"ood_val_size", d.ood_val_size},
               {"ood_test_size", d.ood_test_size},
               {"superset_extra_clusters", d.superset_extra_clusters},
               {"superset_size", d.superset_size},
               {"superset_covers_ood", d.superset_covers_ood}};
  j["arch"] = {{"hidden", c.arch.hidden}, {"activation", std::string(to_string(c.arch.activation))}};
  auto stage = [](const StageSpec& s) { return nlohmann::ordered_json{{"epochs", s.epochs}, {"lr", s.lr}}; };
  j["plan"] = {{"pretrain", stage(c.plan.pretrain)},
               {"lp", stage(c.plan.lp)},
               {"ft", stage(c.plan.ft)},
               {"batch_size", c.plan.batch_size},
               {"alpha_grid", c.plan.alpha_grid}};
  j["rho"] = c.rho;
  j["ood"] = {{"policy", std::string(to_string(c.policy))}, {"alpha_fpr", c.alpha_fpr}};
  j["alpha"] = c.alpha;
  j["seeds"] = c.seeds;
  j["budgets"] = c.budgets;
  j["hist_bins"] = c.hist_bins;
  return j;
}

// Overlays a JSON document on `base`. Unknown keys and wrong types are ConfigErrors.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  using detail::ObjectReader;
  auto& c = base;
  ObjectReader root(j, "");
  if (const auto* p = root.child("paths")) {
    ObjectReader r(*p, "paths");
    r.get("run_dir", c.run_dir);
    r.get("data_dir", c.data_dir);
    r.finish();
  }
  root.get("seed", c.seed);
  if (const auto* p = root.child("data")) {
    ObjectReader r(*p, "data");
    auto& d = c.data;
    r.get("dims", d.dims);
    r.get("id_cluster_count", d.id_cluster_count);
    r.get("ood_cluster_count", d.ood_cluster_count);
    r.get("ood_shift_norm", d.ood_shift_norm);
    r.get("ood_rule_w1", d.ood_rule_w1);
    r.get("ood_rule_w2", d.ood_rule_w2);
    r.get("label_noise_rate", d.label_noise_rate);
    r.get("sr_fraction", d.sr_fraction);
    r.get("wr_fraction", d.wr_fraction);
    r.get("train_size", d.train_size);
    r.get("val_size", d.val_size);
    r.get("test_size", d.test_size);
    r.get("pool_size", d.pool_size);
    r.get("pool_ood_fraction", d.pool_ood_fraction);
    r.get("ood_val_size", d.ood_val_size);
    r.get("ood_test_size", d.ood_test_size);
    r.get("superset_extra_clusters", d.superset_extra_clusters);
    r.get("superset_size", d.superset_size);
    r.get("superset_covers_ood", d.superset_covers_ood);
    r.finish();
  }
  if (const auto* p = root.child("arch")) {
    ObjectReader r(*p, "arch");
    r.get("hidden", c.arch.hidden);
    std::string act(to_string(c.arch.activation));
    r.get("activation", act);
    try {
      c.arch.activation = parse_activation(act);
    } catch (const Error& e) {
      throw ConfigError("arch.activation", e.what());
    }
    r.finish();
  }
  if (const auto* p = root.child("plan")) {
    ObjectReader r(*p, "plan");
    detail::read_stage(r.child("pretrain"), "plan.pretrain", c.plan.pretrain);
    detail::read_stage(r.child("lp"), "plan.lp", c.plan.lp);
    detail::read_stage(r.child("ft"), "plan.ft", c.plan.ft);
    r.get("batch_size", c.plan.batch_size);
    r.get("alpha_grid", c.plan.alpha_grid);
    r.finish();
  }
  root.get("rho", c.rho);
  if (const auto* p = root.child("ood")) {
    ObjectReader r(*p, "ood");
    std::string pol(to_string(c.policy));
    r.get("policy", pol);
    try {
      c.policy = parse_threshold_policy(pol);
    } catch (const Error& e) {
      throw ConfigError("ood.policy", e.what());
    }
    r.get("alpha_fpr", c.alpha_fpr);
    r.finish();
  }
  root.get("alpha", c.alpha);
  root.get("seeds", c.seeds);
  root.get("budgets", c.budgets);
  root.get("hist_bins", c.hist_bins);
  root.finish();
  return c;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error&) {
    throw UsageError("cannot read config file " + path);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", path + ": " + e.what());
  }
  return config_from_json(j, std::move(base));
}

inline std::string dump_config(const RunConfig& c) { return config_to_json(c).dump(2) + "\n"; }

// Hash of everything that affects results. Paths are excluded so the same
// experiment in two run directories stamps identical tables.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(config_to_json(c, false).dump())); }

}  // namespace darl
