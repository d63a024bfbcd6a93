// darl: run-directory driver for the selection / training / evaluation pipeline.
// Exit codes: 0 ok, 1 usage, 2 data or format, 3 numerical.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "darl/darl.hpp"

namespace {

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  std::optional<std::string> data_dir;
  std::optional<double> alpha;
  std::optional<double> rho;
  std::optional<double> fpr;
  bool print_config = false;
};

darl::RunConfig resolve(const Overrides& o) {
  darl::RunConfig cfg;
  if (o.config) cfg = darl::load_config(*o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.run_dir) cfg.run_dir = *o.run_dir;
  if (o.data_dir) cfg.data_dir = *o.data_dir;
  if (o.alpha) cfg.alpha = *o.alpha;
  if (o.rho) cfg.rho = *o.rho;
  if (o.fpr) cfg.alpha_fpr = *o.fpr;
  return cfg.sync();
}

std::optional<std::string> opt_path(const std::string& s) {
  return s.empty() ? std::nullopt : std::optional<std::string>(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"darl: OOD-aware selection, staged fine-tuning and calibration for relevance classifiers"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", std::string(darl::kVersion));

  Overrides o;
  app.add_option("--config", o.config, "JSON run config");
  app.add_option("--seed", o.seed, "seed for data, initialization and batch order");
  app.add_option("--run-dir", o.run_dir, "run directory");
  app.add_option("--data-dir", o.data_dir, "data directory (default <run-dir>/data)");
  app.add_option("--alpha", o.alpha, "interpolation coefficient (default 0.6)");
  app.add_option("--rho", o.rho, "calibration prior rho (default 0.1)");
  app.add_option("--fpr", o.fpr, "target false-positive rate for OOD thresholds (default 0.05)");
  app.add_flag("--print-config", o.print_config, "print the resolved config and exit");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  auto* fit = app.add_subcommand("fit-ood", "fit the ID density and calibrate thresholds");
  std::string thresholds_in;
  auto* sel = app.add_subcommand("select", "select OOD pool rows and build the augmented training set");
  sel->add_option("--thresholds", thresholds_in, "thresholds JSON (default <run-dir>/thresholds.json)");
  std::string stage;
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage, "pretrain | lp | ft")->required()->check(CLI::IsMember({"pretrain", "lp", "ft"}));
  darl::InterpolatePaths ip;
  std::string lp_in, ft_in, out_path;
  auto* interp = app.add_subcommand("interpolate", "blend phi_lp and phi_ft at --alpha");
  interp->add_option("--lp", lp_in, "phi_lp checkpoint");
  interp->add_option("--ft", ft_in, "phi_ft checkpoint");
  interp->add_option("--out", out_path, "output checkpoint");
  auto* sweep = app.add_subcommand("sweep-alpha", "evaluate the alpha grid on validation data");
  std::string eval_ck, hist_ck;
  auto* eval = app.add_subcommand("eval", "test-set metrics for a checkpoint");
  eval->add_option("--checkpoint", eval_ck, "checkpoint (default phi_alpha_<alpha>.ckpt)");
  auto* hist = app.add_subcommand("hist", "per-grade score histograms");
  hist->add_option("--checkpoint", hist_ck, "checkpoint (default phi_alpha_<alpha>.ckpt)");
  auto* ablate = app.add_subcommand("ablate", "four-row ablation over the configured seeds");
  auto* budget = app.add_subcommand("sweep-budget", "DASA vs random selection across budgets");
  auto* pipeline = app.add_subcommand("pipeline", "gen-data through hist in one run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const auto cfg = resolve(o);
    if (o.print_config) {
      cfg.validate();
      std::cout << darl::dump_config(cfg);
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 1;
    }
    const darl::RunDir run(cfg);
    run.open();
    auto& log = std::cout;
    if (gen->parsed()) darl::cmd_gen_data(run, log);
    else if (fit->parsed()) darl::cmd_fit_ood(run, log);
    else if (sel->parsed()) darl::cmd_select(run, log, opt_path(thresholds_in));
    else if (train->parsed()) {
      if (stage == "pretrain") darl::cmd_pretrain(run, log);
      else if (stage == "lp") darl::cmd_train_lp(run, log);
      else darl::cmd_train_ft(run, log);
    } else if (interp->parsed()) {
      ip.lp = opt_path(lp_in);
      ip.ft = opt_path(ft_in);
      ip.out = opt_path(out_path);
      darl::cmd_interpolate(run, log, cfg.alpha, ip);
    } else if (sweep->parsed()) darl::cmd_sweep_alpha(run, log);
    else if (eval->parsed()) darl::cmd_eval(run, log, opt_path(eval_ck));
    else if (hist->parsed()) darl::cmd_hist(run, log, opt_path(hist_ck));
    else if (ablate->parsed()) darl::cmd_ablate(run, log);
    else if (budget->parsed()) darl::cmd_sweep_budget(run, log);
    else if (pipeline->parsed()) darl::cmd_pipeline(run, log);
    run.write_manifest();
  } catch (const darl::Error& e) {
    std::cerr << "darl: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "darl: " << e.what() << '\n';
    return static_cast<int>(darl::ErrorKind::data);
  } catch (const std::exception& e) {
    std::cerr << "darl: unexpected error: " << e.what() << '\n';
    return static_cast<int>(darl::ErrorKind::data);
  }
  return 0;
}
