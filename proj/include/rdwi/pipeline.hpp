#pragma once

// Seeded synthetic datasets: phantoms, noisy radial acquisitions, reconstructions and fits,
// wired from a RunConfig. Every slice draws from its own RNG stream so slices are independent
// of how many others are generated.

#include <string>
#include <vector>

#include "rdwi/adcfit.hpp"
#include "rdwi/core/config.hpp"
#include "rdwi/kspace.hpp"
#include "rdwi/phantom.hpp"
#include "rdwi/recon.hpp"
#include "rdwi/train.hpp"

namespace rdwi {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

inline std::size_t split_size(const RunConfig& cfg, Split s) { return s == Split::train ? cfg.train_slices : cfg.test_slices; }

namespace streams {
inline constexpr std::uint64_t tissues = 0, fields = 1, noise = 2, views = 3;
}

/// Root stream of one slice.
inline SeededRng slice_rng(const RunConfig& cfg, Split split, std::size_t index) {
  return SeededRng(cfg.seed, split == Split::train ? 1 : 2).fork(index);
}

inline GriddingParams gridding_params(const RunConfig& cfg) {
  GriddingParams p{static_cast<double>(cfg.kernel_width), cfg.kernel_beta, cfg.grid()};
  p.validate();
  return p;
}

inline CsParams cs_params(const RunConfig& cfg) { return CsParams{cfg.cs_iterations, cfg.cs_step, cfg.cs_tv_weight}; }

inline Phantom simulate_phantom(const RunConfig& cfg, Split split, std::size_t index) {
  const SeededRng root = slice_rng(cfg, split, index);
  SeededRng tr = root.fork(streams::tissues);
  return make_phantom(cfg.grid(), random_tissues(tr), root.fork(streams::fields));
}

/// Fully sampled noisy k-space of every b-value image of the phantom.
inline std::vector<RadialKSpace> acquire_full(const Phantom& ph, const RunConfig& cfg, const SeededRng& slice) {
  const auto dwi = render_dwi(ph, cfg.protocol());
  const auto traj = make_trajectory(cfg.views, cfg.grid_size);
  const SeededRng noise_root = slice.fork(streams::noise);
  std::vector<RadialKSpace> out;
  for (std::size_t b = 0; b < dwi.images.size(); ++b) {
    SeededRng noise = noise_root.fork(b);
    out.push_back(add_noise(forward_sample(dwi.images[b], traj, b), cfg.noise_sigma, noise));
  }
  return out;
}

/// Keeps one view pattern for the whole slice (shared by all b-values). factor 1 is the identity.
inline std::vector<RadialKSpace> decimate_stack(const std::vector<RadialKSpace>& full, int factor, ViewScheme scheme,
                                                const SeededRng& slice) {
  if (factor == 1) return full;
  if (full.empty()) throw DataError("nothing to decimate");
  SeededRng rng = slice.fork(streams::views);
  const auto keep = select_views(full.front().trajectory.num_views(), factor, scheme, rng);
  std::vector<RadialKSpace> out;
  for (const auto& ks : full) out.push_back(keep_views(ks, keep));
  return out;
}

enum class ReconMethod { gridding, cs };

inline ReconMethod parse_recon_method(const std::string& s) {
  if (s == "gridding") return ReconMethod::gridding;
  if (s == "cs") return ReconMethod::cs;
  throw ConfigError("unknown recon method '" + s + "'");
}

inline std::string to_string(ReconMethod m) { return m == ReconMethod::gridding ? "gridding" : "cs"; }

inline DwiStack reconstruct_stack(const std::vector<RadialKSpace>& ks, ReconMethod method, const RunConfig& cfg) {
  if (ks.size() != cfg.b_values.size()) throw DataError("k-space stack does not match the protocol");
  const auto gp = gridding_params(cfg);
  DwiStack out;
  out.protocol = cfg.protocol();
  const std::size_t views = ks.front().trajectory.num_views(), ref = ks.front().trajectory.reference_views;
  const int factor = views == ref ? 1 : static_cast<int>(std::lround(static_cast<double>(ref) / static_cast<double>(views)));
  out.provenance = {factor == 1 ? Provenance::Kind::full : Provenance::Kind::accelerated, factor};
  if (method == ReconMethod::gridding) {
    for (const auto& k : ks) out.images.push_back(grid_reconstruct(k, gp));
  } else {
    const CsOperator op(ks.front().trajectory, cfg.grid_size);
    for (const auto& k : ks) {
      if (k.trajectory.angles != ks.front().trajectory.angles) throw DataError("CS stack must share one trajectory");
      out.images.push_back(cs_reconstruct_detailed(k, cs_params(cfg), gp, op).magnitude);
    }
  }
  return out;
}

/// Pixels scored in whole-image evaluation: inside a labelled tissue and valid per
/// validity_mask of the fully sampled stack and fit.
inline Mask evaluation_mask(const Phantom& ph, const DwiStack& full, const FitResult& fit_full) {
  Mask m = validity_mask(full, fit_full.adc);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (ph.labels[i] <= 0) m[i] = 0;
  return m;
}

/// Everything derived for one slice.
struct SliceData {
  Phantom phantom;
  DwiStack full, accel, cs;
  FitResult fit_full, fit_accel, fit_cs;
  Mask eval_mask;
};

struct SliceOptions {
  bool with_cs = true;
};

inline SliceData simulate_slice(const RunConfig& cfg, Split split, std::size_t index, const SliceOptions& opt = {}) {
  SliceData d;
  const SeededRng root = slice_rng(cfg, split, index);
  d.phantom = simulate_phantom(cfg, split, index);
  const auto full_ks = acquire_full(d.phantom, cfg, root);
  const auto acc_ks = decimate_stack(full_ks, cfg.factor, parse_view_scheme(cfg.scheme), root);
  d.full = reconstruct_stack(full_ks, ReconMethod::gridding, cfg);
  d.accel = reconstruct_stack(acc_ks, ReconMethod::gridding, cfg);
  d.fit_full = fit_lsq(d.full);
  d.fit_accel = fit_lsq(d.accel);
  if (opt.with_cs) {
    d.cs = reconstruct_stack(acc_ks, ReconMethod::cs, cfg);
    d.fit_cs = fit_lsq(d.cs);
  }
  d.eval_mask = evaluation_mask(d.phantom, d.full, d.fit_full);
  return d;
}

inline TrainExample make_example(const SliceData& d) { return make_example(d.accel, d.fit_accel.adc, d.full, d.fit_full, d.eval_mask); }

/// Model and training configuration for a preset under a run configuration.
struct TrainingSetup {
  nn::ModelConfig model;
  TrainConfig train;
};

inline TrainingSetup training_setup(const RunConfig& cfg, const std::string& preset_name, std::uint64_t seed) {
  TrainingSetup s;
  s.model.b_values = cfg.b_values;
  s.model.height = s.model.width = cfg.grid_size;
  s.model.filters = cfg.filters;
  s.model.blocks = cfg.blocks;
  s.model.convs_per_block = cfg.convs;
  s.model.heads = cfg.heads;
  s.model.attention_enabled = cfg.attention;
  s.model.adc_min = cfg.adc_min;
  s.model.adc_max = cfg.adc_max;
  s.model.input_mode = nn::parse_input_mode(cfg.input_mode);
  s.model.init_seed = seed;
  s.train.weights = {cfg.alpha, cfg.beta, cfg.gamma};
  s.train.lr = cfg.lr;
  s.train.weight_decay = cfg.weight_decay;
  s.train.decoupled_weight_decay = cfg.decoupled_weight_decay;
  s.train.epochs = cfg.epochs;
  s.train.batch = cfg.batch;
  s.train.seed = seed;
  s.train.eval_every = cfg.eval_every;
  apply_preset(find_preset(preset_name), s.model, s.train.weights);
  s.model.validate();
  s.train.validate();
  return s;
}

}  // namespace rdwi
