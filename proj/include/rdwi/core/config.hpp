#pragma once

// Run configuration: `section.key = value` lines, `#` comments.
// Every key has a default; absent keys resolve to it.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rdwi/core/errors.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi {

/// Standard gridding shape parameter for an unoversampled grid: pi * sqrt((W/2)^2 - 0.8).
inline double default_kernel_beta(double width) { return std::numbers::pi * std::sqrt(0.25 * width * width - 0.8); }

struct RunConfig {
  std::uint64_t seed = 1;
  std::vector<double> b_values{10.0, 535.0, 1070.0, 1479.0, 2141.0};

  std::size_t grid_size = 64;
  double fov_mm = 32.0;

  std::size_t train_slices = 40;
  std::size_t test_slices = 30;

  std::size_t views = 403;
  int factor = 4;
  std::string scheme = "uniform";
  double noise_sigma = 0.0;

  int kernel_width = 4;
  double kernel_beta = default_kernel_beta(4);

  int cs_iterations = 50;
  double cs_step = 1.0;
  double cs_tv_weight = 0.01;

  std::size_t filters = 64;
  std::size_t blocks = 5;
  std::size_t convs = 3;
  std::size_t heads = 4;
  bool attention = true;
  double adc_min = kAdcMin;
  double adc_max = kAdcMax;
  std::string input_mode = "adc_plus_dwi";

  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 0.1;

  double lr = 1e-5;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  std::size_t epochs = 10;
  std::size_t batch = 1;
  std::uint64_t train_seed = 1;
  std::string preset = "DeepADC-Net";
  std::size_t eval_every = 1;

  std::vector<std::string> ablate_presets{"DenseU-Net", "DenseU-ADC", "DenseU-DWI", "DenseU-ADC-DWI", "DeepADC-Net"};
  std::string ablate_sweep = "presets";
  std::size_t ablate_seeds = 1;

  std::vector<std::string> rois{"tumor", "muscle", "kidney"};

  BProtocol protocol() const { return BProtocol(b_values); }
  Grid2D grid() const { return Grid2D{grid_size, grid_size, fov_mm}; }

  /// Cross-field constraints. Throws ConfigError.
  void validate() const {
    (void)protocol();
    grid().validate();
    if (views < 1) throw ConfigError("acquire.views must be >= 1");
    if (factor != 1 && factor != 4 && factor != 8) throw ConfigError("acquire.factor must be 1, 4 or 8");
    if (scheme != "uniform" && scheme != "block_random") throw ConfigError("acquire.scheme must be uniform or block_random");
    if (noise_sigma < 0.0) throw ConfigError("acquire.noise_sigma must be >= 0");
    if (kernel_width < 2) throw ConfigError("recon.kernel_width must be >= 2");
    if (!(kernel_beta > 0.0)) throw ConfigError("recon.kernel_beta must be > 0");
    if (cs_iterations < 1) throw ConfigError("cs.iterations must be >= 1");
    if (!(cs_step > 0.0)) throw ConfigError("cs.step must be > 0");
    if (cs_tv_weight < 0.0) throw ConfigError("cs.tv_weight must be >= 0");
    if (blocks < 1) throw ConfigError("model.blocks must be >= 1");
    if (convs < 1) throw ConfigError("model.convs must be >= 1");
    if (heads < 1 || filters < heads || filters % heads != 0)
      throw ConfigError("model.filters must be a positive multiple of model.heads");
    if (!(adc_min < adc_max) || adc_min < 0.0 || adc_max > kAdcMax)
      throw ConfigError("model ADC bounds must satisfy 0 <= adc_min < adc_max <= 0.0032");
    if (input_mode != "adc_only" && input_mode != "adc_plus_dwi")
      throw ConfigError("model.input_mode must be adc_only or adc_plus_dwi");
    if (grid_size % (std::size_t{1} << (blocks - 1)) != 0)
      throw ConfigError("grid.size must be divisible by 2^(model.blocks-1)");
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw ConfigError("loss weights must be >= 0");
    if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("train.lr and train.weight_decay must be >= 0");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
    if (ablate_seeds < 1) throw ConfigError("ablate.seeds must be >= 1");
    if (ablate_sweep != "presets" && ablate_sweep != "loss_weights" && ablate_sweep != "filters" && ablate_sweep != "convs")
      throw ConfigError("ablate.sweep must be presets, loss_weights, filters or convs");
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse '" + v + "' as a number for " + key);
  }
}

template <class Int>
inline Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw ConfigError("cannot parse '" + v + "' as an integer for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("cannot parse '" + v + "' as a boolean for " + key);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

inline std::string fmt_double(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

struct ConfigKey {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define RDWI_KEY_D(name, field)                                                                     \
  ConfigKey {                                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); },              \
        [](const RunConfig& c) { return fmt_double(c.field); }                                      \
  }
#define RDWI_KEY_I(name, field)                                                                     \
  ConfigKey {                                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_int<decltype(c.field)>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                  \
  }
#define RDWI_KEY_B(name, field)                                                                     \
  ConfigKey {                                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); },                \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }                  \
  }
#define RDWI_KEY_S(name, field)                                                                     \
  ConfigKey {                                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = v; },                                  \
        [](const RunConfig& c) { return c.field; }                                                  \
  }
#define RDWI_KEY_L(name, field)                                                                     \
  ConfigKey {                                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = split_list(v); },                      \
        [](const RunConfig& c) { return join(c.field); }                                            \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      RDWI_KEY_I("run.seed", seed),
      ConfigKey{"protocol.b_values",
                [](RunConfig& c, const std::string& v) {
                  c.b_values.clear();
                  for (const auto& s : split_list(v)) c.b_values.push_back(parse_double("protocol.b_values", s));
                },
                [](const RunConfig& c) {
                  std::vector<std::string> s;
                  for (double b : c.b_values) s.push_back(fmt_double(b));
                  return join(s);
                }},
      RDWI_KEY_I("grid.size", grid_size),
      RDWI_KEY_D("grid.fov_mm", fov_mm),
      RDWI_KEY_I("data.train_slices", train_slices),
      RDWI_KEY_I("data.test_slices", test_slices),
      RDWI_KEY_I("acquire.views", views),
      RDWI_KEY_I("acquire.factor", factor),
      RDWI_KEY_S("acquire.scheme", scheme),
      RDWI_KEY_D("acquire.noise_sigma", noise_sigma),
      RDWI_KEY_I("recon.kernel_width", kernel_width),
      RDWI_KEY_D("recon.kernel_beta", kernel_beta),
      RDWI_KEY_I("cs.iterations", cs_iterations),
      RDWI_KEY_D("cs.step", cs_step),
      RDWI_KEY_D("cs.tv_weight", cs_tv_weight),
      RDWI_KEY_I("model.filters", filters),
      RDWI_KEY_I("model.blocks", blocks),
      RDWI_KEY_I("model.convs", convs),
      RDWI_KEY_I("model.heads", heads),
      RDWI_KEY_B("model.attention", attention),
      RDWI_KEY_D("model.adc_min", adc_min),
      RDWI_KEY_D("model.adc_max", adc_max),
      RDWI_KEY_S("model.input_mode", input_mode),
      RDWI_KEY_D("loss.alpha", alpha),
      RDWI_KEY_D("loss.beta", beta),
      RDWI_KEY_D("loss.gamma", gamma),
      RDWI_KEY_D("train.lr", lr),
      RDWI_KEY_D("train.weight_decay", weight_decay),
      RDWI_KEY_B("train.decoupled_weight_decay", decoupled_weight_decay),
      RDWI_KEY_I("train.epochs", epochs),
      RDWI_KEY_I("train.batch", batch),
      RDWI_KEY_I("train.seed", train_seed),
      RDWI_KEY_S("train.preset", preset),
      RDWI_KEY_I("train.eval_every", eval_every),
      RDWI_KEY_L("ablate.presets", ablate_presets),
      RDWI_KEY_S("ablate.sweep", ablate_sweep),
      RDWI_KEY_I("ablate.seeds", ablate_seeds),
      RDWI_KEY_L("evaluate.rois", rois),
  };
  return keys;
}

#undef RDWI_KEY_D
#undef RDWI_KEY_I
#undef RDWI_KEY_B
#undef RDWI_KEY_S
#undef RDWI_KEY_L

inline std::string canonical_key(std::string key) {
  // Bare aliases for the most common keys.
  if (key == "b_values") return "protocol.b_values";
  if (key == "seed") return "run.seed";
  return key;
}

}  // namespace detail

/// Sets one key. Throws ConfigError on unknown keys or unparsable values.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto k = detail::canonical_key(key);
  for (const auto& entry : detail::config_keys()) {
    if (k == entry.name) {
      const bool beta_follows_width = k == "recon.kernel_width" && cfg.kernel_beta == default_kernel_beta(cfg.kernel_width);
      entry.set(cfg, value);
      if (beta_follows_width) cfg.kernel_beta = default_kernel_beta(cfg.kernel_width);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Parses config text on top of `base` (defaults when omitted) and validates the result.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Fully resolved text form; parse_config(to_text(c)) == c.
inline std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& entry : detail::config_keys()) out += std::string(entry.name) + " = " + entry.get(cfg) + "\n";
  return out;
}

}  // namespace rdwi
