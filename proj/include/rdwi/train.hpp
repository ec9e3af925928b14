#pragma once

// Input normalization, the three-term loss, Adam, the training loop and inference.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rdwi/adcfit.hpp"
#include "rdwi/core/rng.hpp"
#include "rdwi/metrics.hpp"
#include "rdwi/nn/model.hpp"

namespace rdwi {

struct NormStats {
  double dwi_clip = 1.0;                // 99th percentile of the slice stack
  double adc_scale = 1.0 / kAdcMax;     // multiply mm^2/s by this
};

/// Linear-interpolated percentile (q in [0, 100]) of the values.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("percentile of an empty set");
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (frac == 0.0 || lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + frac * (b - a);
}

struct NormalizedInput {
  nn::Shape shape;             // 1 x (n_b + 1) x H x W
  std::vector<double> values;  // channels [S_1 .. S_n, ADC]
  NormStats stats;
};

/// Clips the stack at its joint 99th percentile and divides by it; ADC is divided by 0.0032.
inline NormalizedInput normalize(const DwiStack& dwi, const AdcMap& adc) {
  dwi.validate();
  if (!dwi.images.front().same_shape(adc.values)) throw DataError("normalize: DWI and ADC shapes differ");
  std::vector<double> all;
  for (const auto& im : dwi.images) all.insert(all.end(), im.begin(), im.end());
  NormalizedInput out;
  out.stats.dwi_clip = percentile(std::move(all), 99.0);
  if (!(out.stats.dwi_clip > 0.0)) throw DataError("normalize: stack has a zero 99th percentile");
  const std::size_t nb = dwi.images.size(), plane = adc.values.size();
  out.shape = nn::Shape{1, nb + 1, adc.height(), adc.width()};
  out.values.resize((nb + 1) * plane);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t p = 0; p < plane; ++p)
      out.values[i * plane + p] = std::min(dwi.images[i][p], out.stats.dwi_clip) / out.stats.dwi_clip;
  for (std::size_t p = 0; p < plane; ++p) out.values[nb * plane + p] = adc.values[p] * out.stats.adc_scale;
  return out;
}

/// Inverse of the ADC normalization.
inline AdcMap denormalize_adc(const std::vector<double>& adc_norm, std::size_t h, std::size_t w, const NormStats& s) {
  if (adc_norm.size() != h * w) throw DataError("denormalize: size mismatch");
  AdcMap out(h, w);
  for (std::size_t p = 0; p < h * w; ++p) {
    out.values[p] = adc_norm[p] / s.adc_scale;
    out.valid[p] = 1;
  }
  return out;
}

struct LossWeights {
  double alpha = 1.0, beta = 0.1, gamma = 0.1;
};

struct LossTerms {
  double adc = 0.0, s0 = 0.0, dwi = 0.0;
};

inline double total_loss(const LossTerms& t, const LossWeights& w) { return w.alpha * t.adc + w.beta * t.s0 + w.gamma * t.dwi; }

/// Training preset: which input channels the backbone sees, which loss terms are active, and
/// whether the bottleneck uses self-attention.
struct Preset {
  std::string name;
  nn::InputMode input_mode = nn::InputMode::adc_plus_dwi;
  bool use_adc = true, use_s0 = true, use_dwi = true;
  bool attention = true;
};

inline const std::vector<Preset>& presets() {
  using nn::InputMode;
  static const std::vector<Preset> all{
      {"DenseU-Net", InputMode::adc_only, true, false, false, false},
      {"DenseU-ADC", InputMode::adc_plus_dwi, true, false, false, false},
      {"DenseU-DWI", InputMode::adc_plus_dwi, false, false, true, false},
      {"DenseU-ADC-DWI", InputMode::adc_plus_dwi, true, true, true, false},
      {"DeepADC-Net", InputMode::adc_plus_dwi, true, true, true, true},
  };
  return all;
}

inline const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  throw ConfigError("unknown preset '" + name + "'");
}

/// Applies the preset's axes to the model configuration and zeroes inactive loss weights.
inline void apply_preset(const Preset& p, nn::ModelConfig& model, LossWeights& weights) {
  model.input_mode = p.input_mode;
  model.attention_enabled = p.attention;
  if (!p.use_adc) weights.alpha = 0.0;
  if (!p.use_s0) weights.beta = 0.0;
  if (!p.use_dwi) weights.gamma = 0.0;
}

struct TrainConfig {
  LossWeights weights;
  double lr = 1e-5;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  std::size_t epochs = 10;
  std::size_t batch = 1;
  std::uint64_t seed = 1;  // shuffling
  std::size_t eval_every = 1;

  void validate() const {
    if (weights.alpha < 0 || weights.beta < 0 || weights.gamma < 0) throw ConfigError("loss weights must be >= 0");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("lr and weight_decay must be >= 0");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  }
};

struct AdamConfig {
  double lr = 1e-5;
  double weight_decay = 1e-4;
  bool decoupled = false;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One bias-corrected Adam update from the gradients accumulated on each parameter (absent
/// gradients count as zero). Coupled weight decay adds wd * theta to the gradient before the
/// moment updates; decoupled decay subtracts lr * wd * theta after the Adam update.
template <class T>
void adam_step(std::vector<nn::Parameter<T>>& params, const AdamConfig& c, std::size_t step) {
  if (step < 1) throw ConfigError("adam step index starts at 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (auto& p : params) {
    auto& theta = p.values();
    const auto& grad = p.var->grad;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      const double th = static_cast<double>(theta[i]);
      if (!c.decoupled) g += c.weight_decay * th;
      const double m = c.beta1 * static_cast<double>(p.moment1[i]) + (1.0 - c.beta1) * g;
      const double v = c.beta2 * static_cast<double>(p.moment2[i]) + (1.0 - c.beta2) * g * g;
      p.moment1[i] = static_cast<T>(m);
      p.moment2[i] = static_cast<T>(v);
      double next = th - c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
      if (c.decoupled) next -= c.lr * c.weight_decay * th;
      theta[i] = static_cast<T>(next);
    }
  }
}

/// One training pair in normalized units. Truths come from the fully sampled reconstruction and
/// are scaled with the accelerated input's clip value so prediction and target share units.
struct TrainExample {
  nn::Shape input_shape;
  std::vector<float> input;    // 1 x (n_b + 1) x H x W
  std::vector<float> adc;      // 1 x 1 x H x W, ADC / 0.0032
  std::vector<float> s0;       // 1 x 1 x H x W
  std::vector<float> dwi;      // 1 x n_b x H x W
  AdcMap truth_adc;            // physical units, for evaluation
  Mask mask;                   // pixels scored during checkpoint selection
  NormStats stats;
};

inline TrainExample make_example(const DwiStack& dwi_us, const AdcMap& adc_us, const DwiStack& dwi_full,
                                 const FitResult& fit_full, const Mask& mask) {
  dwi_full.validate();
  const auto norm = normalize(dwi_us, adc_us);
  const std::size_t plane = adc_us.values.size();
  if (dwi_full.images.size() != dwi_us.images.size() || !dwi_full.images.front().same_shape(adc_us.values) ||
      !fit_full.adc.values.same_shape(adc_us.values) || !mask.same_shape(adc_us.values))
    throw DataError("training pair geometry mismatch");
  TrainExample e;
  e.input_shape = norm.shape;
  e.input.assign(norm.values.begin(), norm.values.end());
  e.stats = norm.stats;
  const double clip = norm.stats.dwi_clip;
  e.adc.resize(plane);
  e.s0.resize(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    e.adc[p] = static_cast<float>(fit_full.adc.values[p] * norm.stats.adc_scale);
    e.s0[p] = static_cast<float>(fit_full.s0.values[p] / clip);
  }
  for (const auto& im : dwi_full.images)
    for (double v : im) e.dwi.push_back(static_cast<float>(v / clip));
  e.truth_adc = fit_full.adc;
  e.mask = mask;
  return e;
}

/// The three loss terms as graph nodes. Inactive terms are still computed so curves stay comparable.
template <class T>
struct LossNodes {
  nn::Var<T> adc, s0, dwi;
};

template <class T>
LossNodes<T> losses(nn::Graph<T>& g, const nn::ModelOutput<T>& out, const nn::Var<T>& adc_truth, const nn::Var<T>& s0_truth,
                    const nn::Var<T>& dwi_truth) {
  return {nn::l1_loss(g, out.adc, adc_truth), nn::l1_loss(g, out.s0, s0_truth), nn::l1_loss(g, out.dwi_hat, dwi_truth)};
}

template <class T>
nn::Var<T> total_loss(nn::Graph<T>& g, const LossNodes<T>& l, const LossWeights& w) {
  return nn::weighted_sum<T>(g, {{static_cast<T>(w.alpha), l.adc}, {static_cast<T>(w.beta), l.s0}, {static_cast<T>(w.gamma), l.dwi}});
}

/// Normalized-unit ADC prediction for one example, without recording gradients.
inline std::vector<double> predict_adc_norm(const nn::DeepAdcNet<float>& model, const nn::Shape& shape,
                                            const std::vector<float>& input) {
  nn::Graph<float> g(false);
  auto out = model.forward(g, nn::constant<float>(shape, input));
  return {out.adc->value.begin(), out.adc->value.end()};
}

/// Mean CC over examples with a defined correlation; NaN when none is defined.
inline double mean_training_cc(const nn::DeepAdcNet<float>& model, const std::vector<TrainExample>& data) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& e : data) {
    const auto pred = denormalize_adc(predict_adc_norm(model, e.input_shape, e.input), e.truth_adc.height(),
                                      e.truth_adc.width(), e.stats);
    if (count(e.mask) < 2) continue;
    if (auto cc = pearson_cc(pred, e.truth_adc, e.mask)) {
      s += *cc;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

struct LossRow {
  std::size_t step;
  LossTerms terms;
  double total;
};

struct TrainResult {
  std::vector<LossRow> curve;
  std::size_t steps = 0;
  std::size_t best_step = 0;                 // step of the kept parameters (0 = initialization)
  double best_cc = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> epoch_cc;              // training-set CC after each evaluated epoch
};

/// Trains in place. Each epoch visits the examples in a seeded permutation; each step averages
/// the loss over `batch` examples. After every `eval_every` epochs the training-set CC is
/// measured and the best parameters (and their Adam state) are kept; the model ends holding them.
inline TrainResult train_loop(nn::DeepAdcNet<float>& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                              const std::function<void(const LossRow&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  for (const auto& e : data)
    if (e.input_shape.c != model.config().input_channels() || e.input_shape.h != model.config().height ||
        e.input_shape.w != model.config().width)
      throw DataError("training data does not match the model's input channels or geometry");

  TrainResult result;
  const AdamConfig adam{cfg.lr, cfg.weight_decay, cfg.decoupled_weight_decay};
  struct Snapshot {
    std::vector<std::vector<float>> values, m1, m2;
  };
  auto snapshot = [&]() {
    Snapshot s;
    for (const auto& p : model.parameters()) {
      s.values.push_back(p.values());
      s.m1.push_back(p.moment1);
      s.m2.push_back(p.moment2);
    }
    return s;
  };
  std::optional<Snapshot> best;
  const SeededRng shuffle_root(cfg.seed, 0x5348554646ULL);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch);

  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SeededRng rng = shuffle_root.fork(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      model.zero_grad();
      LossRow row{result.steps + 1, {}, 0.0};
      for (std::size_t k = start; k < end; ++k) {
        const auto& e = data[order[k]];
        const nn::Shape plane{1, 1, e.input_shape.h, e.input_shape.w};
        nn::Graph<float> g;
        auto out = model.forward(g, nn::constant<float>(e.input_shape, e.input));
        auto l = losses(g, out, nn::constant<float>(plane, e.adc), nn::constant<float>(plane, e.s0),
                        nn::constant<float>(out.dwi_hat->shape, e.dwi));
        const LossWeights scaled{cfg.weights.alpha * inv_batch, cfg.weights.beta * inv_batch, cfg.weights.gamma * inv_batch};
        auto total = total_loss(g, l, scaled);
        g.backward(total);
        row.terms.adc += l.adc->item();
        row.terms.s0 += l.s0->item();
        row.terms.dwi += l.dwi->item();
      }
      const double n = static_cast<double>(end - start);
      row.terms.adc /= n;
      row.terms.s0 /= n;
      row.terms.dwi /= n;
      row.total = total_loss(row.terms, cfg.weights);
      if (!std::isfinite(row.total)) throw NumericalError("non-finite loss at step " + std::to_string(row.step));
      ++result.steps;
      adam_step(model.parameters(), adam, result.steps);
      result.curve.push_back(row);
      if (on_step) on_step(row);
    }

    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      const double cc = mean_training_cc(model, data);
      result.epoch_cc.push_back(cc);
      if (std::isfinite(cc) && (!best || !(cc <= result.best_cc))) {
        result.best_cc = cc;
        result.best_step = result.steps;
        best = snapshot();
      }
    }
  }
  if (best) {
    auto& ps = model.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ps[i].values() = best->values[i];
      ps[i].moment1 = best->m1[i];
      ps[i].moment2 = best->m2[i];
    }
  }
  return result;
}

/// Network ADC estimate in mm^2/s for an accelerated stack and its fitted ADC.
inline AdcMap infer(const nn::DeepAdcNet<float>& model, const DwiStack& dwi_us, const AdcMap& adc_us) {
  const auto& c = model.config();
  if (dwi_us.protocol.b_values() != c.b_values) throw DataError("inference b-values differ from the model's");
  if (adc_us.height() != c.height || adc_us.width() != c.width) throw DataError("inference geometry differs from the model's");
  const auto norm = normalize(dwi_us, adc_us);
  const std::vector<float> in(norm.values.begin(), norm.values.end());
  auto pred = denormalize_adc(predict_adc_norm(model, norm.shape, in), c.height, c.width, norm.stats);
  for (double& v : pred.values) v = std::clamp(v, c.adc_min, c.adc_max);
  return pred;
}

}  // namespace rdwi
