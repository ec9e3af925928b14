// Acceptance suite: one PASS/FAIL line per criterion. Usage: acceptance [config]
// Without a config the built-in defaults of configs/acceptance.conf are used.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "../grad_check.hpp"
#include "rdwi/cli/run.hpp"
#include "rdwi/metrics.hpp"
#include "rdwi/nn/mhsa.hpp"
#include "rdwi/nn/model.hpp"
#include "rdwi/pipeline.hpp"

namespace {

using namespace rdwi;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------------------------
// 1. Monoexponential round trip.

Outcome monoexponential_round_trip() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t pixels = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SeededRng rng(seed);
    const Phantom ph = make_phantom(Grid2D{96, 96, 32.0}, random_tissues(rng), rng.fork(2));
    const FitResult f = fit_lsq(render_dwi(ph, BProtocol()));
    for (std::size_t i = 0; i < ph.labels.size(); ++i) {
      if (!(ph.s0_truth.values[i] > 0.0)) continue;
      const double t = ph.adc_truth.values[i];
      const double err = std::abs(f.adc.values[i] - t);
      worst = std::max(worst, t > 0.0 ? err / t : (err == 0.0 ? 0.0 : std::numeric_limits<double>::infinity()));
      ++pixels;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 5.0 && pixels > 0,
          fmt("max relative ADC error %.3g over %zu pixels of 5 phantoms (<= 1e-10), %.2f s (< 5 s)", worst, pixels, secs)};
}

// ---------------------------------------------------------------------------------------------
// 2. Gradient suite.

Outcome gradient_suite() {
  using namespace rdwi::nn;
  using nn::Shape;
  using test::DVar;
  using test::leaf;
  const auto t0 = Clock::now();
  SeededRng rng(2);
  std::map<std::string, double> err;
  auto check = [&](const std::string& name, const std::vector<DVar>& leaves, const std::function<DVar(Graph<double>&)>& op) {
    err[name] = std::max(err[name], test::op_fd_error(rng, leaves, op));
  };
  for (std::size_t stride : {1u, 2u}) {
    auto x = leaf(rng, Shape{2, 2, 5, 6}), w = leaf(rng, Shape{3, 2, 3, 3}), b = leaf(rng, Shape{1, 3, 1, 1});
    check("conv2d", {x, w, b}, [&](Graph<double>& g) { return conv2d(g, x, w, b, stride); });
  }
  auto a = leaf(rng, Shape{2, 2, 3, 3}), b = leaf(rng, Shape{2, 3, 3, 3}), c = leaf(rng, Shape{2, 2, 3, 3});
  check("concat", {a, b}, [&](Graph<double>& g) { return concat<double>(g, {a, b}); });
  check("channel_slice", {b}, [&](Graph<double>& g) { return channel_slice(g, b, 1, 2); });
  check("add", {a, c}, [&](Graph<double>& g) { return add(g, a, c); });
  check("upsample2x", {a}, [&](Graph<double>& g) { return upsample2x(g, a); });
  auto x = leaf(rng, Shape{2, 3, 4, 5}, -3.0, 3.0), gamma = leaf(rng, Shape{1, 3, 1, 1}), beta = leaf(rng, Shape{1, 3, 1, 1});
  check("silu", {x}, [&](Graph<double>& g) { return silu(g, x); });
  check("instance_norm", {x, gamma, beta}, [&](Graph<double>& g) { return instance_norm(g, x, gamma, beta); });
  auto h = leaf(rng, Shape{1, 1, 4, 4}, -4.0, 4.0);
  check("scaled_sigmoid_head", {h}, [&](Graph<double>& g) { return scaled_sigmoid_head(g, h, kAdcMin, kAdcMax); });
  auto z = leaf(rng, Shape{1, 1, 4, 4}, -2.0, 2.0), s1 = leaf(rng, Shape{1, 1, 4, 4}, 0.1, 1.0);
  for (double& v : z->value)
    if (std::abs(v) < 0.05) v = 0.5;  // away from the kink of the rectifier
  check("s0_head", {z, s1}, [&](Graph<double>& g) { return s0_head(g, z, s1); });
  auto adc = leaf(rng, Shape{1, 1, 3, 3}, 0.0, 1.0), s0 = leaf(rng, Shape{1, 1, 3, 3}, 0.2, 1.0);
  const std::vector<double> bv = BProtocol().b_values();
  check("mono_layer", {adc, s0}, [&](Graph<double>& g) { return mono_layer(g, adc, s0, bv, kAdcMax); });
  auto p = leaf(rng, Shape{2, 1, 3, 4});
  auto t = test::fixed(rng, Shape{2, 1, 3, 4}, 2.0, 3.0);
  err["l1_loss"] = test::graph_fd_error({p}, [&](Graph<double>& g) { return l1_loss(g, p, t); });
  auto u = leaf(rng, Shape{}), v = leaf(rng, Shape{});
  err["weighted_sum"] = test::graph_fd_error({u, v}, [&](Graph<double>& g) { return weighted_sum<double>(g, {{0.3, u}, {-1.2, v}}); });
  {
    const std::size_t ch = 4, heads = 2, d = ch / heads;
    MhsaParams<double> mp{leaf(rng, Shape{ch, ch, 1, 1}), leaf(rng, Shape{ch, ch, 1, 1}), leaf(rng, Shape{ch, ch, 1, 1}),
                          leaf(rng, Shape{ch, ch, 1, 1}), leaf(rng, Shape{1, ch, 1, 1}),  leaf(rng, Shape{1, d, 2, 1}),
                          leaf(rng, Shape{1, d, 1, 3}),   heads};
    auto xm = leaf(rng, Shape{2, ch, 2, 3});
    check("mhsa", {mp.wq, mp.wk, mp.wv, mp.wo, mp.bo, mp.rel_h, mp.rel_w, xm}, [&](Graph<double>& g) { return mhsa(g, xm, mp); });
  }
  double ops = 0.0;
  std::string worst_op;
  for (const auto& [name, e] : err)
    if (e >= ops) {
      ops = e;
      worst_op = name;
    }

  // End-to-end loss of a micro model; targets below every prediction keep L1 off its kinks.
  ModelConfig mc;
  mc.height = mc.width = 8;
  mc.blocks = 2;
  mc.filters = 4;
  mc.heads = 2;
  mc.convs_per_block = 2;
  DeepAdcNet<double> model(mc);
  const Shape in_shape{1, mc.input_channels(), 8, 8};
  auto in = constant<double>(in_shape, test::random_vector(rng, in_shape.size(), 0.05, 1.0));
  auto adc_t = constant<double>(Shape{1, 1, 8, 8}, std::vector<double>(64, -1.0));
  auto s0_t = constant<double>(Shape{1, 1, 8, 8}, std::vector<double>(64, -1.0));
  auto dwi_t = constant<double>(Shape{1, 5, 8, 8}, std::vector<double>(320, -1.0));
  std::vector<DVar> leaves;
  for (auto& prm : model.parameters()) leaves.push_back(prm.var);
  const double e2e = test::graph_fd_error(leaves, [&](Graph<double>& g) {
    return total_loss(g, losses(g, model.forward(g, in), adc_t, s0_t, dwi_t), LossWeights{});
  });
  const double secs = seconds_since(t0);
  return {ops <= 1e-6 && e2e <= 1e-5 && secs < 60.0,
          fmt("%zu ops, worst %s %.3g (<= 1e-6); micro-model loss %.3g (<= 1e-5); %.1f s (< 60 s)", err.size(), worst_op.c_str(), ops,
              e2e, secs)};
}

// ---------------------------------------------------------------------------------------------
// 3. Structural bounds of the heads under random weights.

Outcome structural_bounds() {
  using namespace rdwi::nn;
  using nn::Shape;
  const auto t0 = Clock::now();
  SeededRng rng(3);
  std::size_t passes = 0, outputs = 0, violations = 0;
  const float gains[] = {1.0f, 10.0f, 1e3f, 1e5f};
  for (std::uint64_t m = 0; m < 500; ++m) {
    ModelConfig mc;
    mc.height = mc.width = 8;
    mc.blocks = 2;
    mc.filters = 4;
    mc.heads = 2;
    mc.convs_per_block = 2;
    mc.attention_enabled = m % 2 == 0;
    mc.init_seed = 1000 + m;
    DeepAdcNet<float> model(mc);
    const float gain = gains[m % 4];
    for (const char* name : {"head_adc.w", "head_adc.b", "head_s0.w", "head_s0.b"})
      for (auto& v : model.parameter(name).values()) v = gain * (v + static_cast<float>(rng.uniform(-1, 1)));
    for (int k = 0; k < 20; ++k, ++passes) {
      const Shape s{1, mc.input_channels(), 8, 8};
      std::vector<float> x(s.size());
      const double hi = k % 2 ? 1.0 : 50.0;
      for (auto& v : x) v = static_cast<float>(rng.uniform(0.0, hi));
      Graph<float> g(false);
      auto in = constant<float>(s, x);
      const auto out = model.forward(g, in);
      for (std::size_t p = 0; p < 64; ++p, ++outputs) {
        const double a = static_cast<double>(out.adc->value[p]) * kAdcMax;
        if (!(a >= 0.0 && a <= kAdcMax)) ++violations;
        if (!(out.s0->value[p] >= in->value[p])) ++violations;  // channel 0 holds S_1
      }
    }
  }
  return {passes >= 10000 && violations == 0,
          fmt("%zu random-weight forward passes, %zu pixels, %zu violations (must be 0); %.1f s", passes, outputs, violations,
              seconds_since(t0))};
}

// ---------------------------------------------------------------------------------------------
// 4. Gridding fidelity.

double masked_nmse(const Image& rec, const Image& ref, const Mask& m) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) {
      num += (rec[i] - ref[i]) * (rec[i] - ref[i]);
      den += ref[i] * ref[i];
    }
  return num / den;
}

double masked_mean(const Image& im, const Mask& m) {
  double s = 0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) {
      s += im[i];
      ++c;
    }
  return s / static_cast<double>(c);
}

Outcome gridding_fidelity(const RunConfig& base) {
  const auto t0 = Clock::now();
  RunConfig cfg = base;
  cfg.grid_size = 96;
  cfg.views = 403;
  const std::size_t n = cfg.grid_size;
  const auto gp = gridding_params(cfg);
  const auto interior = interior_mask(n);
  const auto traj = make_trajectory(cfg.views, n);

  double worst_full = 0.0;
  std::size_t order_violations = 0;
  for (std::size_t s = 0; s < cfg.test_slices; ++s) {
    const Image ref = render_dwi(simulate_phantom(cfg, Split::test, s), cfg.protocol()).images.front();
    const auto full = forward_sample(ref, traj);
    SeededRng rng = slice_rng(cfg, Split::test, s).fork(streams::views);
    const double e1 = masked_nmse(grid_reconstruct(full, gp), ref, interior);
    worst_full = std::max(worst_full, e1);
    for (auto scheme : {ViewScheme::uniform, ViewScheme::block_random}) {
      const double e4 = masked_nmse(grid_reconstruct(decimate_views(full, 4, scheme, rng), gp), ref, interior);
      const double e8 = masked_nmse(grid_reconstruct(decimate_views(full, 8, scheme, rng), gp), ref, interior);
      if (!(e8 > e4 && e4 > e1)) ++order_violations;
    }
  }

  double worst_const = 0.0;
  const auto disk_traj = make_trajectory(403, n);
  for (double c : {0.5, 1.0, 3.0}) {
    const auto ks = forward_sample(constant_disk(n, c), disk_traj);
    worst_const = std::max(worst_const, std::abs(masked_mean(grid_reconstruct(ks, gp), interior) - c) / c);
    SeededRng rng(4);
    for (int f : {4, 8})
      for (auto scheme : {ViewScheme::uniform, ViewScheme::block_random})
        worst_const = std::max(worst_const, std::abs(masked_mean(grid_reconstruct(decimate_views(ks, f, scheme, rng), gp), interior) - c) / c);
  }

  SeededRng rng(5);
  const std::size_t an = 32;
  const auto at = make_trajectory(403, an);
  double worst_adj = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<cdouble> x(an * an), y(at.num_samples());
    for (auto& v : x) v = {rng.normal(), rng.normal()};
    for (auto& v : y) v = {rng.normal(), rng.normal()};
    const auto ax = nudft_forward(x, an, at), ahy = nudft_adjoint(y, an, at);
    cdouble lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += ax[i] * std::conj(y[i]);
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * std::conj(ahy[i]);
    worst_adj = std::max(worst_adj, std::abs(lhs - rhs) / std::abs(lhs));
  }
  return {worst_full <= 0.02 && worst_const <= 0.02 && worst_adj <= 1e-8 && order_violations == 0,
          fmt("96-point 403-view interior NMSE worst %.4f over %zu slices (<= 0.02); constant disk worst %.4f (<= 0.02); adjoint "
              "%.2g (<= 1e-8); 8x > 4x > full violated on %zu of %zu slice-schemes; %.1f s",
              worst_full, cfg.test_slices, worst_const, worst_adj, order_violations, 2 * cfg.test_slices, seconds_since(t0))};
}

// ---------------------------------------------------------------------------------------------
// 5, 6, 10. Shared synthetic train/test sets.

struct Dataset {
  std::vector<TrainExample> train;
  std::vector<SliceData> test;
  double seconds = 0.0;
};

Dataset make_dataset(const RunConfig& cfg) {
  const auto t0 = Clock::now();
  Dataset d;
  for (std::size_t i = 0; i < cfg.train_slices; ++i) d.train.push_back(make_example(simulate_slice(cfg, Split::train, i, {false})));
  for (std::size_t i = 0; i < cfg.test_slices; ++i) d.test.push_back(simulate_slice(cfg, Split::test, i));
  d.seconds = seconds_since(t0);
  return d;
}

double mean_cc(const std::vector<AdcMap>& preds, const std::vector<SliceData>& test) {
  std::vector<std::optional<double>> v;
  for (std::size_t s = 0; s < test.size(); ++s) v.push_back(pearson_cc(preds[s].values, test[s].fit_full.adc.values, test[s].eval_mask));
  return aggregate(v).mean;
}

double mean_nmse(const std::vector<AdcMap>& preds, const std::vector<SliceData>& test) {
  std::vector<std::optional<double>> v;
  for (std::size_t s = 0; s < test.size(); ++s) v.push_back(nmse(preds[s].values, test[s].fit_full.adc.values, test[s].eval_mask));
  return aggregate(v).mean;
}

std::vector<AdcMap> lsq_maps(const Dataset& d) {
  std::vector<AdcMap> out;
  for (const auto& s : d.test) out.push_back(s.fit_accel.adc);
  return out;
}

std::vector<AdcMap> cs_maps(const Dataset& d) {
  std::vector<AdcMap> out;
  for (const auto& s : d.test) out.push_back(s.fit_cs.adc);
  return out;
}

struct TrainedScore {
  double cc = 0.0, seconds = 0.0;
};

TrainedScore train_and_score(const RunConfig& cfg, const std::string& preset, std::uint64_t seed, const Dataset& d) {
  const auto t0 = Clock::now();
  const auto setup = training_setup(cfg, preset, seed);
  nn::DeepAdcNet<float> model(setup.model);
  (void)train_loop(model, d.train, setup.train);
  std::vector<AdcMap> preds;
  for (const auto& s : d.test) preds.push_back(infer(model, s.accel, s.fit_accel.adc));
  return {mean_cc(preds, d.test), seconds_since(t0)};
}

std::vector<std::uint64_t> training_seeds(const RunConfig& cfg) {
  std::vector<std::uint64_t> s;
  for (std::size_t k = 0; k < std::max<std::size_t>(3, cfg.ablate_seeds); ++k) s.push_back(cfg.train_seed + k);
  return s;
}

Outcome method_ordering(const RunConfig& cfg, const Dataset& d, std::map<std::string, std::vector<double>>& cc_by_preset) {
  const double lsq = mean_cc(lsq_maps(d), d.test), cs = mean_cc(cs_maps(d), d.test);
  double secs = d.seconds;
  std::size_t votes = 0;
  std::string per_seed;
  for (std::uint64_t seed : training_seeds(cfg)) {
    const auto r = train_and_score(cfg, "DeepADC-Net", seed, d);
    secs += r.seconds;
    cc_by_preset["DeepADC-Net"].push_back(r.cc);
    const bool ok = r.cc >= cs + 0.01 && cs >= lsq + 0.01;
    votes += ok;
    per_seed += fmt(" seed %llu %.4f%s", static_cast<unsigned long long>(seed), r.cc, ok ? "" : "(x)");
  }
  const std::size_t n = training_seeds(cfg).size();
  return {d.test.size() >= 30 && cfg.grid_size == 64 && 2 * votes > n && secs < 1800.0,
          fmt("%zu test slices %zux%zu sigma %g: CC LSQ %.4f, CS %.4f, DeepADC-Net%s; gaps >= 0.01 on %zu/%zu seeds; %.0f s (< 1800 s)",
              d.test.size(), cfg.grid_size, cfg.grid_size, cfg.noise_sigma, lsq, cs, per_seed.c_str(), votes, n, secs)};
}

Outcome ablation_ordering(const RunConfig& cfg, const Dataset& d, std::map<std::string, std::vector<double>>& cc_by_preset) {
  const auto t0 = Clock::now();
  const auto seeds = training_seeds(cfg);
  for (const char* preset : {"DenseU-Net", "DenseU-ADC", "DenseU-DWI", "DenseU-ADC-DWI"})
    for (std::uint64_t seed : seeds) cc_by_preset[preset].push_back(train_and_score(cfg, preset, seed, d).cc);
  std::size_t adc_votes = 0, dwi_votes = 0;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    adc_votes += cc_by_preset["DenseU-ADC"][k] > cc_by_preset["DenseU-Net"][k];
    dwi_votes += cc_by_preset["DenseU-ADC-DWI"][k] > cc_by_preset["DenseU-DWI"][k];
  }
  std::string table;
  for (const auto& [name, ccs] : cc_by_preset) {
    table += " " + name + " [";
    for (std::size_t k = 0; k < ccs.size(); ++k) table += fmt(k ? " %.4f" : "%.4f", ccs[k]);
    table += "]";
  }
  return {2 * adc_votes > seeds.size() && 2 * dwi_votes > seeds.size(),
          fmt("DenseU-ADC > DenseU-Net on %zu/%zu seeds, DenseU-ADC-DWI > DenseU-DWI on %zu/%zu seeds; CC per seed:%s; %.0f s",
              adc_votes, seeds.size(), dwi_votes, seeds.size(), table.c_str(), seconds_since(t0))};
}

Outcome cs_behaviour(const RunConfig& cfg, const Dataset& d) {
  const auto t0 = Clock::now();
  const Phantom ph = simulate_phantom(cfg, Split::test, 0);
  const auto ks = forward_sample(render_dwi(ph, cfg.protocol()).images.front(), make_trajectory(cfg.views, cfg.grid_size));
  const auto r = cs_reconstruct_detailed(ks, CsParams{50, cfg.cs_step, cfg.cs_tv_weight}, gridding_params(cfg));
  std::size_t increases = 0;
  for (std::size_t i = 1; i < r.residuals.size(); ++i) increases += r.residuals[i] > r.residuals[i - 1];
  const double lsq = mean_nmse(lsq_maps(d), d.test), cs = mean_nmse(cs_maps(d), d.test);
  return {r.residuals.size() == 51 && increases == 0 && cs < lsq && cfg.factor == 4 && cfg.scheme == "block_random",
          fmt("residual increases in 50 iterations (tv %g, fully sampled): %zu (must be 0), %.4g -> %.4g; NMSE at %dx %s: CS %.4f < "
              "LSQ %.4f; %.1f s",
              cfg.cs_tv_weight, increases, r.residuals.front(), r.residuals.back(), cfg.factor, cfg.scheme.c_str(), cs, lsq,
              seconds_since(t0))};
}

// ---------------------------------------------------------------------------------------------
// 7. Metric oracles.

long double cc_oracle(const Image& a, const Image& b, const Mask& m) {
  long double n = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) {
      n += 1;
      sa += a[i];
      sb += b[i];
    }
  const long double ma = sa / n, mb = sb / n;
  long double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) {
      cov += (a[i] - ma) * (b[i] - mb);
      va += (a[i] - ma) * (a[i] - ma);
      vb += (b[i] - mb) * (b[i] - mb);
    }
  return cov / std::sqrt(va * vb);
}

// Direct 11x11 Gaussian window (sigma 1.5) at every valid offset, statistics over masked pixels.
long double ssim_oracle(const Image& a, const Image& b, const Mask& m) {
  const std::size_t K = 11, H = a.height(), W = a.width();
  long double g[11], gs = 0;
  for (std::size_t k = 0; k < K; ++k) gs += g[k] = std::exp(-std::pow(static_cast<long double>(k) - 5.0L, 2) / (2 * 1.5L * 1.5L));
  const long double c1 = std::pow(0.01L * 0.0032L, 2), c2 = std::pow(0.03L * 0.0032L, 2);
  long double total = 0;
  std::size_t used = 0;
  for (std::size_t oy = 0; oy + K <= H; ++oy)
    for (std::size_t ox = 0; ox + K <= W; ++ox) {
      long double ws = 0, ma = 0, mb = 0;
      for (std::size_t y = 0; y < K; ++y)
        for (std::size_t x = 0; x < K; ++x) {
          const std::size_t i = (oy + y) * W + ox + x;
          if (!m[i]) continue;
          const long double w = g[y] * g[x];
          ws += w;
          ma += w * a[i];
          mb += w * b[i];
        }
      if (ws <= 0) continue;
      ma /= ws;
      mb /= ws;
      long double va = 0, vb = 0, cab = 0;
      for (std::size_t y = 0; y < K; ++y)
        for (std::size_t x = 0; x < K; ++x) {
          const std::size_t i = (oy + y) * W + ox + x;
          if (!m[i]) continue;
          const long double w = g[y] * g[x] / ws;
          va += w * (a[i] - ma) * (a[i] - ma);
          vb += w * (b[i] - mb) * (b[i] - mb);
          cab += w * (a[i] - ma) * (b[i] - mb);
        }
      total += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++used;
    }
  return total / static_cast<long double>(used);
}

Outcome metric_oracles() {
  SeededRng rng(7);
  double worst = 0.0;
  bool identities = true;
  for (int k = 0; k < 100; ++k) {
    const std::size_t h = 11 + rng.below(14), w = 11 + rng.below(14);
    Image t(h, w), p(h, w);
    Mask m(h, w, 1);
    const double noise = rng.uniform(1e-5, 1e-3);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = rng.uniform(0.0, kAdcMax);
      p[i] = t[i] + noise * rng.normal();
      if (k % 2) m[i] = rng.uniform() < 0.7;
    }
    long double se = 0, st = 0;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) {
        se += (static_cast<long double>(p[i]) - t[i]) * (static_cast<long double>(p[i]) - t[i]);
        st += static_cast<long double>(t[i]) * t[i];
      }
    worst = std::max(worst, std::abs(*pearson_cc(p, t, m) - static_cast<double>(cc_oracle(p, t, m))));
    worst = std::max(worst, std::abs(ssim(p, t, m) - static_cast<double>(ssim_oracle(p, t, m))));
    worst = std::max(worst, std::abs(nmse(p, t, m) - static_cast<double>(se / st)));
    identities = identities && ssim(t, t, m) == 1.0 && nmse(t, t, m) == 0.0;
  }
  return {worst <= 1e-9 && identities,
          fmt("100 random pairs: worst |library - oracle| over CC/SSIM/NMSE %.3g (<= 1e-9); SSIM(x,x)=1 and NMSE(x,x)=0 exactly: %s", worst,
              identities ? "yes" : "no")};
}

// ---------------------------------------------------------------------------------------------
// 8. Determinism of the staged pipeline.

Outcome determinism(const RunConfig& base) {
  const auto t0 = Clock::now();
  RunConfig cfg = base;
  cfg.grid_size = 32;
  cfg.train_slices = 3;
  cfg.test_slices = 2;
  cfg.views = 101;
  cfg.cs_iterations = 5;
  cfg.filters = 4;
  cfg.heads = 2;
  cfg.blocks = 3;
  cfg.epochs = 2;
  const auto root = fs::temp_directory_path() / ("rdwi_acceptance_" + std::to_string(::getpid()));
  std::vector<std::map<std::string, std::string>> hashes;
  for (const char* name : {"a", "b"}) {
    fs::remove_all(root / name);
    cli::Run run(root / name, cfg, nullptr);
    cli::cmd_phantom(run);
    cli::cmd_acquire(run);
    cli::cmd_recon(run, ReconMethod::gridding);
    cli::cmd_recon(run, ReconMethod::cs);
    cli::cmd_fit(run, ReconMethod::gridding);
    cli::cmd_fit(run, ReconMethod::cs);
    cli::cmd_train(run, cfg.preset, cfg.train_seed);
    cli::cmd_infer(run, cfg.preset, cfg.train_seed, Split::test);
    (void)cli::cmd_evaluate(run, Split::test, cfg.rois);
    std::map<std::string, std::string> h;
    for (const auto& [rel, a] : run.manifest().at("artifacts").items()) h[rel] = a.at("hash").get<std::string>();
    hashes.push_back(std::move(h));
  }
  fs::remove_all(root);
  std::size_t checkpoint_files = 0;
  for (const auto& [rel, h] : hashes[0]) checkpoint_files += rel.rfind("models/", 0) == 0;
  const bool same = hashes[0] == hashes[1];
  return {same && checkpoint_files > 0,
          fmt("two end-to-end runs: %zu artifacts (%zu under models/) %s; %.1f s", hashes[0].size(), checkpoint_files,
              same ? "byte-identical" : "DIFFER", seconds_since(t0))};
}

// ---------------------------------------------------------------------------------------------
// 9. QDWI round trip and corrupted headers.

NdArray random_array(SeededRng& rng, bool nonempty) {
  const auto dt = static_cast<DType>(rng.below(3));
  std::vector<std::uint32_t> dims(nonempty ? 1 + rng.below(4) : rng.below(5));
  for (auto& d : dims) d = static_cast<std::uint32_t>(nonempty ? 1 + rng.below(5) : rng.below(6));
  const std::size_t n = NdArray::element_count(dims);
  switch (dt) {
    case DType::f32: {
      std::vector<float> v(n);
      for (auto& x : v) x = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
      return NdArray(dims, v);
    }
    case DType::f64: {
      std::vector<double> v(n);
      for (auto& x : v) x = std::bit_cast<double>(rng.next_u64());
      return NdArray(dims, v);
    }
    case DType::c64: {
      std::vector<std::complex<float>> v(n);
      for (auto& x : v)
        x = {std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64())), std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()))};
      return NdArray(dims, v);
    }
  }
  return {};
}

Outcome format_round_trip() {
  using K = FormatError::Kind;
  SeededRng rng(9);
  const auto dir = fs::temp_directory_path() / ("rdwi_acceptance_qdwi_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::size_t round_trips = 0, rt_failures = 0;
  for (int i = 0; i < 500; ++i, ++round_trips) {
    const NdArray a = random_array(rng, false);
    save_tensor(dir / "a.qdwi", a);
    if (!(load_tensor(dir / "a.qdwi") == a)) ++rt_failures;
  }
  fs::remove_all(dir);

  // Each corruption class has one documented error kind.
  std::size_t cases = 0, wrong = 0;
  auto expect = [&](const std::vector<std::uint8_t>& bytes, K want) {
    ++cases;
    try {
      (void)decode_tensor(bytes);
      ++wrong;
    } catch (const FormatError& e) {
      wrong += e.kind() != want;
    } catch (...) {
      ++wrong;
    }
  };
  for (int i = 0; i < 500; ++i) {
    const auto good = encode_tensor(random_array(rng, true));
    const std::size_t ndim = good[7], header = 8 + 4 * ndim;
    auto b = good;
    b[rng.below(4)] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    expect(b, K::bad_magic);
    b = good;
    const auto version = static_cast<std::uint16_t>(2 + rng.below(65534));
    b[4] = static_cast<std::uint8_t>(version & 0xff);
    b[5] = static_cast<std::uint8_t>(version >> 8);
    expect(b, K::bad_version);
    b = good;
    b[6] = static_cast<std::uint8_t>(3 + rng.below(253));
    expect(b, K::unsupported_dtype);
    b = good;
    b[7] = static_cast<std::uint8_t>(5 + rng.below(251));
    expect(b, K::bad_ndim);
    b = good;
    b.resize(rng.below(good.size()));
    expect(b, K::truncated);
    b = good;
    for (std::size_t k = 1 + rng.below(16); k > 0; --k) b.push_back(static_cast<std::uint8_t>(rng.next_u64()));
    expect(b, K::size_mismatch);
    // A larger dimension claims more payload than is present.
    b = good;
    const std::size_t d = 8 + 4 * rng.below(ndim);
    std::uint32_t dim = 0;
    std::memcpy(&dim, b.data() + d, 4);
    const std::uint32_t bigger = dim + 1 + static_cast<std::uint32_t>(rng.below(1000));
    std::memcpy(b.data() + d, &bigger, 4);
    expect(b, K::truncated);
    // A smaller nonzero dimension leaves payload over.
    if (dim > 1) {
      b = good;
      const std::uint32_t smaller = 1 + static_cast<std::uint32_t>(rng.below(dim - 1));
      std::memcpy(b.data() + d, &smaller, 4);
      expect(b, K::size_mismatch);
    }
    (void)header;
  }

  // Arbitrary header bytes: a FormatError or a well-formed array, never anything else.
  std::size_t fuzz = 0, undocumented = 0;
  for (int i = 0; i < 3000; ++i, ++fuzz) {
    auto bytes = encode_tensor(random_array(rng, false));
    bytes[rng.below(8 + 4 * bytes[7])] = static_cast<std::uint8_t>(rng.next_u64());
    try {
      const NdArray a = decode_tensor(bytes);
      undocumented += encode_tensor(a) != bytes;
    } catch (const FormatError&) {
    } catch (...) {
      ++undocumented;
    }
  }
  return {rt_failures == 0 && wrong == 0 && undocumented == 0,
          fmt("%zu randomized round trips, %zu failures; %zu class-specific corruptions, %zu not rejected with their documented "
              "kind; %zu random header mutations, %zu undocumented outcomes",
              round_trips, rt_failures, cases, wrong, fuzz, undocumented)};
}

// ---------------------------------------------------------------------------------------------

RunConfig acceptance_defaults() {
  RunConfig c;
  c.grid_size = 64;
  c.train_slices = 40;
  c.test_slices = 30;
  c.factor = 4;
  c.scheme = "block_random";
  c.noise_sigma = 2.0;
  c.cs_tv_weight = 0.001;
  c.filters = 8;
  c.lr = 1e-3;
  c.weight_decay = 0.0;
  c.epochs = 30;
  c.eval_every = 5;
  c.ablate_seeds = 3;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  try {
    cfg = argc > 1 ? load_config(argv[1]) : acceptance_defaults();
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "config: " << e.what() << '\n';
    return 2;
  }
  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "): " << o.detail << std::endl;
  };

  report(1, "monoexponential round trip", monoexponential_round_trip);
  report(2, "gradient suite", gradient_suite);
  report(3, "structural bounds", structural_bounds);
  report(4, "gridding fidelity", [&] { return gridding_fidelity(cfg); });

  std::optional<Dataset> data;
  std::map<std::string, std::vector<double>> cc_by_preset;
  report(5, "method ordering", [&] {
    data = make_dataset(cfg);
    return method_ordering(cfg, *data, cc_by_preset);
  });
  report(6, "ablation ordering", [&] {
    if (!data) data = make_dataset(cfg);
    return ablation_ordering(cfg, *data, cc_by_preset);
  });
  report(7, "metric oracles", metric_oracles);
  report(8, "determinism", [&] { return determinism(cfg); });
  report(9, "format round trip", format_round_trip);
  report(10, "CS baseline", [&] {
    if (!data) data = make_dataset(cfg);
    return cs_behaviour(cfg, *data);
  });
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << 10 - failures << "/10" << std::endl;
  return failures ? 1 : 0;
}
