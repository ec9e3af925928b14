#pragma once

// Dense encoder-decoder with a self-attention bottleneck, bounded ADC / S0 heads and a
// monoexponential output layer.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rdwi/core/hash.hpp"
#include "rdwi/core/rng.hpp"
#include "rdwi/core/types.hpp"
#include "rdwi/nn/mhsa.hpp"
#include "rdwi/nn/ops.hpp"

namespace rdwi::nn {

enum class InputMode { adc_only, adc_plus_dwi };

inline InputMode parse_input_mode(const std::string& s) {
  if (s == "adc_only") return InputMode::adc_only;
  if (s == "adc_plus_dwi") return InputMode::adc_plus_dwi;
  throw ConfigError("unknown input mode '" + s + "'");
}

inline std::string to_string(InputMode m) { return m == InputMode::adc_only ? "adc_only" : "adc_plus_dwi"; }

struct ModelConfig {
  std::vector<double> b_values{10.0, 535.0, 1070.0, 1479.0, 2141.0};
  std::size_t height = 64, width = 64;
  std::size_t filters = 64;
  std::size_t blocks = 5;
  std::size_t convs_per_block = 3;
  std::size_t heads = 4;
  bool attention_enabled = true;
  double adc_min = kAdcMin, adc_max = kAdcMax;  // mm^2/s
  InputMode input_mode = InputMode::adc_plus_dwi;
  std::uint64_t init_seed = 1;

  std::size_t num_b() const noexcept { return b_values.size(); }
  /// Channels of the normalized input tensor: [S_1 .. S_n, ADC].
  std::size_t input_channels() const noexcept { return num_b() + 1; }
  /// Channels the backbone consumes.
  std::size_t backbone_channels() const noexcept { return input_mode == InputMode::adc_only ? 1 : num_b() + 1; }
  std::size_t bottleneck_height() const noexcept { return height >> (blocks - 1); }
  std::size_t bottleneck_width() const noexcept { return width >> (blocks - 1); }

  void validate() const {
    if (b_values.size() < 2) throw ConfigError("model needs at least two b-values");
    if (blocks < 1 || blocks > 16) throw ConfigError("blocks must be in [1, 16]");
    if (convs_per_block < 1) throw ConfigError("convs_per_block must be >= 1");
    if (heads < 1 || filters < heads) throw ConfigError("filters must be >= heads >= 1");
    if (filters % heads != 0) throw ConfigError("filters must be divisible by heads");
    const std::size_t div = std::size_t{1} << (blocks - 1);
    if (height == 0 || width == 0 || height % div != 0 || width % div != 0)
      throw ConfigError("input size must be divisible by 2^(blocks-1) = " + std::to_string(div));
    if (!(adc_min >= 0.0 && adc_min < adc_max)) throw ConfigError("ADC bounds must satisfy 0 <= min < max");
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Network outputs. adc is in normalized units (mm^2/s divided by 0.0032); s0 and dwi_hat share
/// the DWI normalization of the input.
template <class T>
struct ModelOutput {
  Var<T> adc;      // N x 1 x H x W
  Var<T> s0;       // N x 1 x H x W
  Var<T> dwi_hat;  // N x n_b x H x W
};

template <class T>
class DeepAdcNet {
 public:
  explicit DeepAdcNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

  Parameter<T>& parameter(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("no parameter named '" + name + "'");
    return params_[it->second];
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.shape().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
  }

  /// input: N x (n_b + 1) x H x W in normalized units, channels [S_1 .. S_n, ADC].
  ModelOutput<T> forward(Graph<T>& g, const Var<T>& input) const {
    const Shape s = input->shape;
    if (s.c != cfg_.input_channels()) throw DataError("model expects " + std::to_string(cfg_.input_channels()) + " input channels");
    if (s.h != cfg_.height || s.w != cfg_.width) throw DataError("model geometry mismatch: input " + s.str());
    const std::size_t nb = cfg_.num_b(), L = cfg_.blocks;

    Var<T> x = cfg_.input_mode == InputMode::adc_only ? channel_slice(g, input, nb, 1) : input;
    std::vector<Var<T>> skips;
    for (std::size_t l = 0; l < L; ++l) {
      if (l > 0) x = unit(g, x, "down" + std::to_string(l), 2);
      x = dense_block(g, x, "enc" + std::to_string(l), cfg_.convs_per_block);
      check_finite(x, "enc" + std::to_string(l));
      skips.push_back(x);
    }

    x = bottleneck(g, x);
    check_finite(x, "mid");

    for (std::size_t l = L; l-- > 0;) {
      if (l + 1 < L) x = unit(g, upsample2x(g, x), "up" + std::to_string(l), 1);
      x = dense_block(g, concat<T>(g, {x, skips[l]}), "dec" + std::to_string(l), cfg_.convs_per_block);
      check_finite(x, "dec" + std::to_string(l));
    }

    ModelOutput<T> out;
    const T lo = static_cast<T>(cfg_.adc_min / kAdcMax), hi = static_cast<T>(cfg_.adc_max / kAdcMax);
    out.adc = scaled_sigmoid_head(g, conv2d(g, x, w("head_adc.w"), w("head_adc.b")), lo, hi);
    auto s1 = channel_slice(g, input, 0, 1);
    out.s0 = s0_head(g, conv2d(g, x, w("head_s0.w"), w("head_s0.b")), s1);
    out.dwi_hat = mono_layer(g, out.adc, out.s0, cfg_.b_values, kAdcMax);
    check_finite(out.dwi_hat, "mono");
    return out;
  }

 private:
  const Var<T>& w(const std::string& name) const { return params_[index_.at(name)].var; }

  // conv -> instance norm -> SiLU
  Var<T> unit(Graph<T>& g, const Var<T>& x, const std::string& p, std::size_t stride) const {
    auto y = conv2d(g, x, w(p + ".w"), w(p + ".b"), stride);
    y = instance_norm(g, y, w(p + ".norm.g"), w(p + ".norm.b"));
    return silu(g, y);
  }

  Var<T> dense_block(Graph<T>& g, const Var<T>& x, const std::string& p, std::size_t convs) const {
    std::vector<Var<T>> feats{x};
    for (std::size_t j = 0; j < convs; ++j)
      feats.push_back(unit(g, feats.size() == 1 ? x : concat(g, feats), p + ".conv" + std::to_string(j), 1));
    return conv2d(g, concat(g, feats), w(p + ".proj.w"), w(p + ".proj.b"));
  }

  MhsaParams<T> attention_params(const std::string& p) const {
    return MhsaParams<T>{w(p + ".wq"), w(p + ".wk"), w(p + ".wv"), w(p + ".wo"), w(p + ".bo"),
                         w(p + ".rel_h"), w(p + ".rel_w"), cfg_.heads};
  }

  // Three densely connected convs; attention (residual) after the first and second.
  Var<T> bottleneck(Graph<T>& g, const Var<T>& x) const {
    std::vector<Var<T>> feats{x};
    for (std::size_t j = 0; j < 3; ++j) {
      auto y = unit(g, feats.size() == 1 ? x : concat(g, feats), "mid.conv" + std::to_string(j), 1);
      if (cfg_.attention_enabled && j < 2) y = add(g, y, mhsa(g, y, attention_params("mid.att" + std::to_string(j))));
      feats.push_back(y);
    }
    return conv2d(g, concat(g, feats), w("mid.proj.w"), w("mid.proj.b"));
  }

  void add_param(const std::string& name, Shape s, double bound, double fill = 0.0) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    Parameter<T> p(name, s);
    if (bound > 0.0) {
      // Keyed by name so a parameter starts identical across configs that share it.
      SeededRng rng = SeededRng(cfg_.init_seed).fork(fnv1a64(name));
      for (auto& v : p.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    } else {
      for (auto& v : p.values()) v = static_cast<T>(fill);
    }
    index_[name] = params_.size();
    params_.push_back(std::move(p));
  }

  void add_conv(const std::string& p, std::size_t cin, std::size_t cout, std::size_t k, bool activated) {
    const double fan_in = static_cast<double>(cin * k * k);
    add_param(p + ".w", Shape{cout, cin, k, k}, std::sqrt((activated ? 6.0 : 3.0) / fan_in));
    add_param(p + ".b", Shape{1, cout, 1, 1}, 0.0);
  }

  void add_unit(const std::string& p, std::size_t cin, std::size_t cout) {
    add_conv(p, cin, cout, 3, true);
    add_param(p + ".norm.g", Shape{1, cout, 1, 1}, 0.0, 1.0);
    add_param(p + ".norm.b", Shape{1, cout, 1, 1}, 0.0);
  }

  void add_dense(const std::string& p, std::size_t cin, std::size_t convs) {
    const std::size_t f = cfg_.filters;
    for (std::size_t j = 0; j < convs; ++j) add_unit(p + ".conv" + std::to_string(j), cin + j * f, f);
    add_conv(p + ".proj", cin + convs * f, f, 1, false);
  }

  void add_attention(const std::string& p) {
    const std::size_t f = cfg_.filters, d = f / cfg_.heads;
    const double b = std::sqrt(3.0 / static_cast<double>(f));
    for (const char* n : {".wq", ".wk", ".wv", ".wo"}) add_param(p + n, Shape{f, f, 1, 1}, b);
    add_param(p + ".bo", Shape{1, f, 1, 1}, 0.0);
    const double rb = std::sqrt(3.0 / static_cast<double>(d));
    add_param(p + ".rel_h", Shape{1, d, cfg_.bottleneck_height(), 1}, rb);
    add_param(p + ".rel_w", Shape{1, d, 1, cfg_.bottleneck_width()}, rb);
  }

  void build() {
    const std::size_t f = cfg_.filters, L = cfg_.blocks;
    for (std::size_t l = 0; l < L; ++l) {
      if (l > 0) add_unit("down" + std::to_string(l), f, f);
      add_dense("enc" + std::to_string(l), l == 0 ? cfg_.backbone_channels() : f, cfg_.convs_per_block);
    }
    for (std::size_t j = 0; j < 3; ++j) {
      add_unit("mid.conv" + std::to_string(j), f + j * f, f);
      if (cfg_.attention_enabled && j < 2) add_attention("mid.att" + std::to_string(j));
    }
    add_conv("mid.proj", 4 * f, f, 1, false);
    for (std::size_t l = L; l-- > 0;) {
      if (l + 1 < L) add_unit("up" + std::to_string(l), f, f);
      add_dense("dec" + std::to_string(l), 2 * f, cfg_.convs_per_block);
    }
    add_conv("head_adc", f, 1, 1, false);
    add_conv("head_s0", f, 1, 1, false);
  }

  ModelConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Copies parameter values between models of identical configuration.
template <class To, class From>
void copy_parameters(DeepAdcNet<To>& dst, const DeepAdcNet<From>& src) {
  if (!(dst.config() == src.config())) throw ConfigError("copy_parameters needs identical model configs");
  for (std::size_t i = 0; i < src.parameters().size(); ++i) {
    const auto& s = src.parameters()[i].values();
    auto& d = dst.parameters()[i].values();
    for (std::size_t j = 0; j < s.size(); ++j) d[j] = static_cast<To>(s[j]);
  }
}

}  // namespace rdwi::nn
