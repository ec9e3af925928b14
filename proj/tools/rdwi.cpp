// Command-line front end: argument parsing and exit codes around the stages in rdwi/cli/run.hpp.
// Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 data error, 4 numerical failure.

#include <CLI11.hpp>

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rdwi/cli/run.hpp"

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<int> factor;
  std::optional<std::string> scheme;
  std::vector<std::string> overrides;
};

rdwi::RunConfig resolve_config(const Globals& g) {
  rdwi::RunConfig cfg = g.config_path.empty() ? rdwi::RunConfig{} : rdwi::load_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw rdwi::ConfigError("--set expects key=value, got '" + kv + "'");
    rdwi::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.factor) cfg.factor = *g.factor;
  if (g.scheme) cfg.scheme = *g.scheme;
  cfg.validate();
  return cfg;
}

int run_main(int argc, char** argv) {
  CLI::App app{"Radial diffusion-weighted MRI: simulation, reconstruction, ADC fitting and learned ADC estimation"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "Config file (key = value lines)");
  app.add_option("--seed", g.seed, "Run seed (overrides run.seed)");
  app.add_option("--out", g.out, "Run directory")->capture_default_str();
  app.add_option("--factor", g.factor, "Acceleration factor: 1, 4 or 8 (overrides acquire.factor)");
  app.add_option("--scheme", g.scheme, "View scheme: uniform or block_random (overrides acquire.scheme)");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)");

  std::string method = "gridding", preset, split = "test", truth = "full_fit";
  std::optional<std::uint64_t> train_seed;
  std::vector<std::string> rois;
  rdwi::cli::ErrorMapRequest em;
  std::string em_split = "test", em_pred, em_truth, em_csv;

  auto* phantom = app.add_subcommand("phantom", "Simulate train and test phantoms");
  auto* acquire = app.add_subcommand("acquire", "Sample noisy radial k-space; decimate views for factor 4/8");
  auto* recon = app.add_subcommand("recon", "Reconstruct images from k-space");
  recon->add_option("--method", method, "gridding or cs")->capture_default_str();
  auto* fit = app.add_subcommand("fit", "Least-squares ADC/S0 fits of reconstructed stacks");
  fit->add_option("--method", method, "Reconstruction to fit: gridding or cs")->capture_default_str();
  auto* train = app.add_subcommand("train", "Train a network preset on the train split");
  train->add_option("--preset", preset, "Preset name (default: train.preset)");
  train->add_option("--train-seed", train_seed, "Training seed (default: train.seed)");
  auto* inf = app.add_subcommand("infer", "Apply a trained network to a split");
  inf->add_option("--preset", preset, "Preset name (default: train.preset)");
  inf->add_option("--train-seed", train_seed, "Training seed (default: train.seed)");
  inf->add_option("--split", split, "train or test")->capture_default_str();
  auto* evaluate = app.add_subcommand("evaluate", "Metrics of LSQ, CS and inferred networks against the reference ADC");
  evaluate->add_option("--roi", rois, "ROI label (repeatable; default: evaluate.rois)");
  evaluate->add_option("--split", split, "train or test")->capture_default_str();
  evaluate->add_option("--truth", truth, "Reference ADC: full_fit or phantom")->capture_default_str();
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every variant of the configured ablation");
  auto* errormap = app.add_subcommand("errormap", "CSV grid of clipped absolute ADC errors");
  errormap->add_option("--pred", em_pred, "Predicted ADC tensor ([H,W] or [S,H,W])")->required();
  errormap->add_option("--truth", em_truth, "Reference ADC tensor ([H,W] or [S,H,W])")->required();
  errormap->add_option("--slice", em.slice, "Slice index")->capture_default_str();
  errormap->add_option("--roi", em.roi, "ROI label resolved against the run's phantom");
  errormap->add_option("--split", em_split, "Phantom split for --roi")->capture_default_str();
  errormap->add_option("--clip", em.clip_fraction, "Clip fraction of the maximum difference")->capture_default_str();
  errormap->add_option("--csv", em_csv, "Output path (default: <out>/reports/errormap_*.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return 2;
  }

  const rdwi::RunConfig cfg = resolve_config(g);
  rdwi::cli::Run run(g.out, cfg);
  if (preset.empty()) preset = cfg.preset;
  const std::uint64_t tseed = train_seed.value_or(cfg.train_seed);

  if (phantom->parsed()) rdwi::cli::cmd_phantom(run);
  if (acquire->parsed()) rdwi::cli::cmd_acquire(run);
  if (recon->parsed()) rdwi::cli::cmd_recon(run, rdwi::parse_recon_method(method));
  if (fit->parsed()) rdwi::cli::cmd_fit(run, rdwi::parse_recon_method(method));
  if (train->parsed()) rdwi::cli::cmd_train(run, preset, tseed);
  if (inf->parsed()) rdwi::cli::cmd_infer(run, preset, tseed, rdwi::parse_split(split));
  if (evaluate->parsed()) {
    const auto reports = rdwi::cli::cmd_evaluate(run, rdwi::parse_split(split), rois.empty() ? cfg.rois : rois,
                                                 rdwi::cli::parse_truth_source(truth));
    std::cout << rdwi::to_csv(reports);
  }
  if (ablate->parsed()) {
    const auto runs = rdwi::cli::cmd_ablate(run);
    std::cout << rdwi::cli::ablation_csv(rdwi::cli::ablation_variants(cfg), runs);
  }
  if (errormap->parsed()) {
    em.pred = em_pred;
    em.truth = em_truth;
    em.csv = em_csv;
    em.split = rdwi::parse_split(em_split);
    (void)rdwi::cli::cmd_errormap(run, em);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const rdwi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const rdwi::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const rdwi::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
