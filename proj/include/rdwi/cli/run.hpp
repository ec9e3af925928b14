#pragma once

// Artifact-level pipeline stages behind the command-line tool. A run directory holds QDWI
// tensors, JSON sidecars, CSV reports and manifest.json. Every stage reads only the config, its
// seeds and upstream artifacts, and the manifest records content hashes of both.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdwi/core/hash.hpp"
#include "rdwi/metrics.hpp"
#include "rdwi/nn/checkpoint.hpp"
#include "rdwi/pipeline.hpp"

namespace rdwi::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string hash_bytes(std::span<const std::uint8_t> bytes) { return hex64(fnv1a64(bytes)); }

/// "full" for factor 1, otherwise e.g. "x4_block_random".
inline std::string acquisition_tag(int factor, const std::string& scheme) {
  return factor == 1 ? "full" : "x" + std::to_string(factor) + "_" + scheme;
}

inline std::string acquisition_tag(const RunConfig& c) { return acquisition_tag(c.factor, c.scheme); }

inline std::string model_name(const std::string& preset, const RunConfig& c, std::uint64_t seed) {
  return preset + "_" + acquisition_tag(c) + "_seed" + std::to_string(seed);
}

/// A run directory and its manifest. Stages bracket their work with begin() and commit();
/// reads are checked against the hashes the manifest recorded when the artifact was written.
class Run {
 public:
  Run(fs::path root, RunConfig cfg, std::ostream* log = &std::cerr) : root_(std::move(root)), cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    fs::create_directories(root_);
    const fs::path m = root_ / "manifest.json";
    if (fs::exists(m)) {
      const auto bytes = read_bytes(m);
      try {
        manifest_ = json::parse(bytes.begin(), bytes.end());
      } catch (const json::exception& e) {
        throw DataError("unreadable run manifest: " + std::string(e.what()));
      }
      if (manifest_.value("format", "") != "rdwi-run") throw DataError("not a run manifest: " + m.string());
    } else {
      manifest_ = {{"format", "rdwi-run"},
                   {"version", 1},
                   {"run_id", hex64(fnv1a64(to_text(cfg_)))},
                   {"stages", json::object()},
                   {"artifacts", json::object()}};
    }
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const fs::path& root() const noexcept { return root_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }
  bool exists(const std::string& rel) const { return fs::exists(path(rel)); }
  const json& manifest() const noexcept { return manifest_; }

  /// Recorded content hash of an artifact, if any.
  std::optional<std::string> recorded_hash(const std::string& rel) const {
    const auto& a = manifest_.at("artifacts");
    if (!a.contains(rel)) return std::nullopt;
    return a.at(rel).at("hash").get<std::string>();
  }

  void begin(const std::string& stage, std::uint64_t stage_seed) {
    stage_ = stage;
    stage_seed_ = stage_seed;
    inputs_ = json::object();
    outputs_ = json::object();
    start_ = std::chrono::steady_clock::now();
    say("start");
  }

  void say(const std::string& msg) const {
    if (log_) *log_ << "[" << stage_ << "] " << msg << std::endl;
  }

  std::vector<std::uint8_t> read_raw(const std::string& rel) {
    if (!exists(rel)) throw DataError("missing artifact '" + rel + "'");
    auto bytes = read_bytes(path(rel));
    const auto h = hash_bytes(bytes);
    if (const auto want = recorded_hash(rel); want && *want != h)
      throw DataError("hash mismatch for '" + rel + "': manifest " + *want + ", file " + h);
    inputs_[rel] = h;
    return bytes;
  }

  NdArray read(const std::string& rel) {
    const auto bytes = read_raw(rel);
    return decode_tensor(bytes);
  }

  json read_json(const std::string& rel) {
    const auto bytes = read_raw(rel);
    try {
      return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw DataError("unreadable JSON artifact '" + rel + "': " + e.what());
    }
  }

  void write(const std::string& rel, const NdArray& a) { write_raw(rel, encode_tensor(a)); }

  void write_text(const std::string& rel, const std::string& text) {
    write_raw(rel, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  void write_json(const std::string& rel, const json& j) { write_text(rel, j.dump(2) + "\n"); }

  /// Hashes a file some other writer produced inside the run directory.
  void record_output(const std::string& rel) {
    const auto h = hash_bytes(read_bytes(path(rel)));
    outputs_[rel] = h;
    manifest_["artifacts"][rel] = {{"hash", h}, {"stage", stage_}};
  }

  void commit() {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    manifest_["stages"][stage_] = {{"config", to_text(cfg_)},
                                   {"config_hash", hex64(fnv1a64(to_text(cfg_)))},
                                   {"seed", cfg_.seed},
                                   {"stage_seed", stage_seed_},
                                   {"inputs", inputs_},
                                   {"outputs", outputs_},
                                   {"seconds", secs}};
    const std::string text = manifest_.dump(2) + "\n";
    write_bytes(root_ / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    say("done in " + format_number(secs) + " s");
  }

 private:
  void write_raw(const std::string& rel, std::span<const std::uint8_t> bytes) {
    fs::create_directories(path(rel).parent_path());
    write_bytes(path(rel), bytes);
    const auto h = hash_bytes(bytes);
    outputs_[rel] = h;
    manifest_["artifacts"][rel] = {{"hash", h}, {"stage", stage_}};
  }

  fs::path root_;
  RunConfig cfg_;
  std::ostream* log_;
  json manifest_;
  std::string stage_;
  std::uint64_t stage_seed_ = 0;
  json inputs_, outputs_;
  std::chrono::steady_clock::time_point start_;
};

namespace detail {

inline std::uint32_t u32(std::size_t v) { return static_cast<std::uint32_t>(v); }

inline NdArray stack_images(const std::vector<Image>& ims, std::vector<std::uint32_t> lead, DType t = DType::f64) {
  const std::size_t h = ims.empty() ? 0 : ims.front().height(), w = ims.empty() ? 0 : ims.front().width();
  std::vector<double> all;
  all.reserve(ims.size() * h * w);
  for (const auto& im : ims) {
    if (im.height() != h || im.width() != w) throw DataError("cannot stack images of different shapes");
    all.insert(all.end(), im.begin(), im.end());
  }
  lead.push_back(u32(h));
  lead.push_back(u32(w));
  if (t == DType::f64) return NdArray(std::move(lead), std::move(all));
  return NdArray(std::move(lead), std::vector<float>(all.begin(), all.end()));
}

inline std::vector<Image> images_of(const NdArray& a, std::size_t ndim, const std::string& what) {
  if (a.ndim() != ndim) throw DataError(what + ": expected " + std::to_string(ndim) + " dims");
  return unstack_images(a);
}

inline Image mask_image(const Mask& m) {
  Image im(m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) im[i] = m[i] ? 1.0 : 0.0;
  return im;
}

inline Mask image_mask(const Image& im) {
  Mask m(im.height(), im.width());
  for (std::size_t i = 0; i < im.size(); ++i) m[i] = im[i] != 0.0 ? 1 : 0;
  return m;
}

inline void check_grid(const Image& im, const RunConfig& cfg, const std::string& what) {
  if (im.height() != cfg.grid_size || im.width() != cfg.grid_size)
    throw DataError(what + ": geometry " + std::to_string(im.height()) + "x" + std::to_string(im.width()) +
                    " does not match grid.size " + std::to_string(cfg.grid_size));
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Artifact readers.

inline std::string phantom_rel(Split s, const std::string& what) { return "phantom/" + to_string(s) + "_" + what; }
inline std::string kspace_rel(Split s, const std::string& tag) { return "kspace/" + to_string(s) + "_" + tag + ".qdwi"; }
inline std::string views_rel(Split s, const std::string& tag) { return "kspace/" + to_string(s) + "_" + tag + "_views.qdwi"; }
inline std::string recon_rel(Split s, const std::string& tag, ReconMethod m, const std::string& ext = ".qdwi") {
  return "recon/" + to_string(s) + "_" + tag + "_" + to_string(m) + ext;
}
inline std::string fit_rel(Split s, const std::string& tag, ReconMethod m, const std::string& what) {
  return "fits/" + to_string(s) + "_" + tag + "_" + to_string(m) + "_" + what + ".qdwi";
}
inline std::string pred_rel(Split s, const std::string& model) { return "preds/" + to_string(s) + "_" + model + ".qdwi"; }

inline std::vector<Phantom> load_phantoms(Run& run, Split split) {
  const auto& cfg = run.config();
  const auto labels = detail::images_of(run.read(phantom_rel(split, "labels.qdwi")), 3, "labels");
  const auto adc = detail::images_of(run.read(phantom_rel(split, "adc_truth.qdwi")), 3, "adc_truth");
  const auto s0 = detail::images_of(run.read(phantom_rel(split, "s0_truth.qdwi")), 3, "s0_truth");
  const auto names = run.read_json(phantom_rel(split, "label_names.json"));
  if (adc.size() != labels.size() || s0.size() != labels.size() || names.size() != labels.size())
    throw DataError("phantom artifacts disagree on slice count");
  std::vector<Phantom> out;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    detail::check_grid(labels[s], cfg, "phantom");
    Phantom ph;
    ph.grid = cfg.grid();
    ph.label_names = names[s].get<std::vector<std::string>>();
    ph.labels = Array2<int>(labels[s].height(), labels[s].width(), 0);
    ph.adc_truth = AdcMap(labels[s].height(), labels[s].width());
    ph.adc_truth.values = adc[s];
    ph.s0_truth.values = s0[s];
    for (std::size_t i = 0; i < ph.labels.size(); ++i) {
      ph.labels[i] = static_cast<int>(labels[s][i]);
      ph.adc_truth.valid[i] = ph.labels[i] > 0 ? 1 : 0;
    }
    out.push_back(std::move(ph));
  }
  return out;
}

/// Per-slice k-space stacks of one acquisition.
inline std::vector<std::vector<RadialKSpace>> load_kspace(Run& run, Split split, const std::string& tag) {
  const auto& cfg = run.config();
  const NdArray a = run.read(kspace_rel(split, tag));
  if (a.dtype() != DType::c64 || a.ndim() != 4) throw DataError("k-space artifact must be c64 [S, nb, V, R]");
  const auto& d = a.dims();
  if (d[1] != cfg.b_values.size() || d[3] != cfg.grid_size) throw DataError("k-space artifact does not match the protocol or grid");
  std::optional<std::vector<double>> views;
  if (tag != "full") {
    const NdArray v = run.read(views_rel(split, tag));
    if (v.ndim() != 2 || v.dims()[0] != d[0] || v.dims()[1] != d[2]) throw DataError("view index artifact shape mismatch");
    views = v.to_f64();
  } else if (d[2] != cfg.views) {
    throw DataError("full k-space view count does not match acquire.views");
  }
  const RadialTrajectory ref = make_trajectory(cfg.views, cfg.grid_size);
  const auto& raw = a.as<std::complex<float>>();
  std::vector<std::vector<RadialKSpace>> out(d[0]);
  const std::size_t per_b = std::size_t{d[2]} * d[3];
  for (std::size_t s = 0; s < d[0]; ++s) {
    RadialTrajectory t = ref;
    if (views) {
      t.angles.clear();
      t.view_indices.clear();
      for (std::size_t v = 0; v < d[2]; ++v) {
        const double idx = (*views)[s * d[2] + v];
        if (!(idx >= 0.0) || idx >= static_cast<double>(cfg.views)) throw DataError("view index out of range");
        const auto i = static_cast<std::size_t>(idx);
        t.angles.push_back(ref.angles[i]);
        t.view_indices.push_back(i);
      }
    }
    for (std::size_t b = 0; b < d[1]; ++b) {
      RadialKSpace ks;
      ks.trajectory = t;
      ks.b_index = b;
      const auto* p = raw.data() + (s * d[1] + b) * per_b;
      ks.samples.assign(p, p + per_b);
      out[s].push_back(std::move(ks));
    }
  }
  return out;
}

inline std::vector<DwiStack> load_stacks(Run& run, const std::string& rel) {
  const auto& cfg = run.config();
  const NdArray a = run.read(rel);
  if (a.ndim() != 4 || a.dims()[1] != cfg.b_values.size()) throw DataError("'" + rel + "' must be [S, nb, H, W]");
  const auto ims = unstack_images(a);
  std::vector<DwiStack> out(a.dims()[0]);
  for (std::size_t s = 0; s < out.size(); ++s) {
    out[s].protocol = cfg.protocol();
    for (std::size_t b = 0; b < cfg.b_values.size(); ++b) {
      detail::check_grid(ims[s * cfg.b_values.size() + b], cfg, rel);
      out[s].images.push_back(ims[s * cfg.b_values.size() + b]);
    }
    out[s].validate();
  }
  return out;
}

inline std::vector<FitResult> load_fits(Run& run, Split split, const std::string& tag, ReconMethod m) {
  const auto adc = detail::images_of(run.read(fit_rel(split, tag, m, "adc")), 3, "fit adc");
  const auto valid = detail::images_of(run.read(fit_rel(split, tag, m, "valid")), 3, "fit valid");
  const auto s0 = detail::images_of(run.read(fit_rel(split, tag, m, "s0")), 3, "fit s0");
  const auto res = detail::images_of(run.read(fit_rel(split, tag, m, "residual")), 3, "fit residual");
  if (valid.size() != adc.size() || s0.size() != adc.size() || res.size() != adc.size()) throw DataError("fit artifacts disagree");
  std::vector<FitResult> out(adc.size());
  for (std::size_t s = 0; s < adc.size(); ++s) {
    out[s].adc.values = adc[s];
    out[s].adc.valid = detail::image_mask(valid[s]);
    out[s].s0.values = s0[s];
    out[s].residual = res[s];
  }
  return out;
}

/// Everything a training or evaluation stage needs for one split at the configured acceleration.
struct SplitData {
  std::vector<Phantom> phantoms;
  std::vector<DwiStack> full, accel;
  std::vector<FitResult> fit_full, fit_accel;
  std::vector<Mask> eval_masks;

  std::size_t size() const noexcept { return phantoms.size(); }

  std::vector<TrainExample> examples() const {
    std::vector<TrainExample> out;
    for (std::size_t s = 0; s < size(); ++s)
      out.push_back(make_example(accel[s], fit_accel[s].adc, full[s], fit_full[s], eval_masks[s]));
    return out;
  }
};

inline SplitData load_split(Run& run, Split split) {
  const std::string tag = acquisition_tag(run.config());
  SplitData d;
  d.phantoms = load_phantoms(run, split);
  d.full = load_stacks(run, recon_rel(split, "full", ReconMethod::gridding));
  d.fit_full = load_fits(run, split, "full", ReconMethod::gridding);
  d.accel = tag == "full" ? d.full : load_stacks(run, recon_rel(split, tag, ReconMethod::gridding));
  d.fit_accel = tag == "full" ? d.fit_full : load_fits(run, split, tag, ReconMethod::gridding);
  if (d.full.size() != d.size() || d.accel.size() != d.size() || d.fit_full.size() != d.size() || d.fit_accel.size() != d.size())
    throw DataError("artifacts of split '" + to_string(split) + "' disagree on slice count");
  for (std::size_t s = 0; s < d.size(); ++s) d.eval_masks.push_back(evaluation_mask(d.phantoms[s], d.full[s], d.fit_full[s]));
  return d;
}

/// Evaluation scopes of each slice: "whole" plus every requested ROI label the slice contains,
/// each intersected with the evaluation mask.
inline std::vector<SliceScopes> evaluation_scopes(const SplitData& d, const std::vector<std::string>& rois) {
  std::vector<SliceScopes> out(d.size());
  for (std::size_t s = 0; s < d.size(); ++s) {
    out[s].emplace_back("whole", d.eval_masks[s]);
    for (const auto& roi : rois) {
      const auto& names = d.phantoms[s].label_names;
      if (std::find(names.begin(), names.end(), roi) == names.end()) continue;
      Mask m = roi_mask(d.phantoms[s], roi);
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = m[i] && d.eval_masks[s][i];
      out[s].emplace_back(roi, std::move(m));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Stages.

inline const std::vector<Split>& both_splits() {
  static const std::vector<Split> s{Split::train, Split::test};
  return s;
}

inline void cmd_phantom(Run& run) {
  const auto& cfg = run.config();
  run.begin("phantom", cfg.seed);
  for (Split split : both_splits()) {
    std::vector<Image> labels, adc, s0;
    json names = json::array();
    for (std::size_t i = 0; i < split_size(cfg, split); ++i) {
      const Phantom ph = simulate_phantom(cfg, split, i);
      Image lab(ph.labels.height(), ph.labels.width());
      for (std::size_t p = 0; p < lab.size(); ++p) lab[p] = ph.labels[p];
      labels.push_back(std::move(lab));
      adc.push_back(ph.adc_truth.values);
      s0.push_back(ph.s0_truth.values);
      names.push_back(ph.label_names);
    }
    const std::vector<std::uint32_t> lead{detail::u32(labels.size())};
    run.write(phantom_rel(split, "labels.qdwi"), detail::stack_images(labels, lead, DType::f32));
    run.write(phantom_rel(split, "adc_truth.qdwi"), detail::stack_images(adc, lead));
    run.write(phantom_rel(split, "s0_truth.qdwi"), detail::stack_images(s0, lead));
    run.write_json(phantom_rel(split, "label_names.json"), names);
  }
  run.commit();
}

/// Writes the fully sampled k-space and, for factor 4/8, the decimated views and their indices.
inline void cmd_acquire(Run& run) {
  const auto& cfg = run.config();
  const std::string tag = acquisition_tag(cfg);
  run.begin("acquire/" + tag, cfg.seed);
  for (Split split : both_splits()) {
    const auto phantoms = load_phantoms(run, split);
    std::vector<std::complex<float>> full_raw, acc_raw;
    std::vector<double> kept;
    std::size_t acc_views = 0;
    for (std::size_t s = 0; s < phantoms.size(); ++s) {
      const SeededRng root = slice_rng(cfg, split, s);
      const auto full = acquire_full(phantoms[s], cfg, root);
      for (const auto& ks : full) full_raw.insert(full_raw.end(), ks.samples.begin(), ks.samples.end());
      if (cfg.factor == 1) continue;
      const auto acc = decimate_stack(full, cfg.factor, parse_view_scheme(cfg.scheme), root);
      acc_views = acc.front().trajectory.num_views();
      for (std::size_t v : acc.front().trajectory.view_indices) kept.push_back(static_cast<double>(v));
      for (const auto& ks : acc) acc_raw.insert(acc_raw.end(), ks.samples.begin(), ks.samples.end());
    }
    const auto S = detail::u32(phantoms.size()), nb = detail::u32(cfg.b_values.size()), R = detail::u32(cfg.grid_size);
    run.write(kspace_rel(split, "full"), NdArray({S, nb, detail::u32(cfg.views), R}, std::move(full_raw)));
    if (cfg.factor != 1) {
      const auto V = detail::u32(acc_views);
      run.write(kspace_rel(split, tag), NdArray({S, nb, V, R}, std::move(acc_raw)));
      run.write(views_rel(split, tag), NdArray({S, V}, std::move(kept)));
    }
  }
  run.commit();
}

/// Gridding reconstructs the full and the configured accelerated acquisition; CS only the latter.
inline void cmd_recon(Run& run, ReconMethod method) {
  const auto& cfg = run.config();
  const std::string tag = acquisition_tag(cfg);
  run.begin("recon/" + tag + "/" + to_string(method), cfg.seed);
  std::vector<std::string> tags{tag};
  if (method == ReconMethod::gridding && tag != "full") tags.insert(tags.begin(), "full");
  for (Split split : both_splits())
    for (const auto& t : tags) {
      const auto ks = load_kspace(run, split, t);
      std::vector<Image> ims;
      for (std::size_t s = 0; s < ks.size(); ++s) {
        const auto stack = reconstruct_stack(ks[s], method, cfg);
        ims.insert(ims.end(), stack.images.begin(), stack.images.end());
        if (method == ReconMethod::cs) run.say(to_string(split) + " slice " + std::to_string(s + 1) + "/" + std::to_string(ks.size()));
      }
      run.write(recon_rel(split, t, method),
                detail::stack_images(ims, {detail::u32(ks.size()), detail::u32(cfg.b_values.size())}));
      const bool full = t == "full";
      run.write_json(recon_rel(split, t, method, ".json"), {{"method", to_string(method)},
                                                            {"kernel_width", cfg.kernel_width},
                                                            {"beta", cfg.kernel_beta},
                                                            {"factor", full ? 1 : cfg.factor},
                                                            {"scheme", full ? "full" : cfg.scheme},
                                                            {"iterations", cfg.cs_iterations},
                                                            {"tv_weight", cfg.cs_tv_weight},
                                                            {"b_values", cfg.b_values}});
    }
  run.commit();
}

/// Least-squares fits of the reconstructions cmd_recon produced for the same method.
inline void cmd_fit(Run& run, ReconMethod method) {
  const auto& cfg = run.config();
  const std::string tag = acquisition_tag(cfg);
  run.begin("fit/" + tag + "/" + to_string(method), cfg.seed);
  std::vector<std::string> tags{tag};
  if (method == ReconMethod::gridding && tag != "full") tags.insert(tags.begin(), "full");
  for (Split split : both_splits())
    for (const auto& t : tags) {
      const auto stacks = load_stacks(run, recon_rel(split, t, method));
      std::vector<Image> adc, valid, s0, res;
      for (const auto& st : stacks) {
        const auto f = fit_lsq(st);
        adc.push_back(f.adc.values);
        valid.push_back(detail::mask_image(f.adc.valid));
        s0.push_back(f.s0.values);
        res.push_back(f.residual);
      }
      const std::vector<std::uint32_t> lead{detail::u32(stacks.size())};
      run.write(fit_rel(split, t, method, "adc"), detail::stack_images(adc, lead));
      run.write(fit_rel(split, t, method, "valid"), detail::stack_images(valid, lead, DType::f32));
      run.write(fit_rel(split, t, method, "s0"), detail::stack_images(s0, lead));
      run.write(fit_rel(split, t, method, "residual"), detail::stack_images(res, lead));
    }
  run.commit();
}

inline std::string loss_csv(const TrainResult& r) {
  std::ostringstream out;
  out << "step,adc,s0,dwi,total\n";
  for (const auto& row : r.curve)
    out << row.step << ',' << format_number(row.terms.adc) << ',' << format_number(row.terms.s0) << ','
        << format_number(row.terms.dwi) << ',' << format_number(row.total) << '\n';
  return out.str();
}

inline void cmd_train(Run& run, const std::string& preset, std::uint64_t train_seed) {
  const auto& cfg = run.config();
  const std::string name = model_name(preset, cfg, train_seed);
  run.begin("train/" + name, train_seed);
  const auto setup = training_setup(cfg, preset, train_seed);
  const auto data = load_split(run, Split::train).examples();
  nn::DeepAdcNet<float> model(setup.model);
  const std::size_t every = std::max<std::size_t>(1, data.size());
  const auto result = train_loop(model, data, setup.train, [&](const LossRow& row) {
    if (row.step % every == 0) run.say("step " + std::to_string(row.step) + " loss " + format_number(row.total));
  });
  const std::string dir = "models/" + name;
  nn::save_checkpoint(run.path(dir), model, result.steps);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(run.path(dir))) files.push_back(e.path().filename().string());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) run.record_output(dir + "/" + f);
  run.write_text(dir + "/loss.csv", loss_csv(result));
  run.write_json(dir + "/summary.json", {{"preset", preset},
                                         {"seed", train_seed},
                                         {"steps", result.steps},
                                         {"best_step", result.best_step},
                                         {"best_cc", result.best_cc},
                                         {"epoch_cc", result.epoch_cc}});
  run.commit();
}

inline void cmd_infer(Run& run, const std::string& preset, std::uint64_t train_seed, Split split) {
  const auto& cfg = run.config();
  const std::string name = model_name(preset, cfg, train_seed);
  run.begin("infer/" + to_string(split) + "/" + name, train_seed);
  const std::string dir = "models/" + name;
  // Verify every checkpoint file before loading it.
  const json ck_manifest = run.read_json(dir + "/manifest.json");
  for (const auto& p : ck_manifest.at("parameters"))
    for (const char* key : {"file", "moment1", "moment2"}) (void)run.read_raw(dir + "/" + p.at(key).get<std::string>());
  const auto ck = nn::load_checkpoint<float>(run.path(dir));
  const auto d = load_split(run, split);
  std::vector<Image> preds;
  for (std::size_t s = 0; s < d.size(); ++s) preds.push_back(infer(ck.model, d.accel[s], d.fit_accel[s].adc).values);
  run.write(pred_rel(split, name), detail::stack_images(preds, {detail::u32(preds.size())}));
  run.commit();
}

enum class TruthSource { full_fit, phantom };

inline TruthSource parse_truth_source(const std::string& s) {
  if (s == "full_fit") return TruthSource::full_fit;
  if (s == "phantom") return TruthSource::phantom;
  throw ConfigError("unknown truth source '" + s + "'");
}

/// Metrics of LSQ, CS (when fitted) and every inferred model of this acceleration against the
/// reference ADC. Writes reports/metrics_{split}_{tag}.csv and returns the reports.
inline std::vector<MetricsReport> cmd_evaluate(Run& run, Split split, const std::vector<std::string>& rois,
                                               TruthSource truth = TruthSource::full_fit) {
  const auto& cfg = run.config();
  const std::string tag = acquisition_tag(cfg);
  run.begin("evaluate/" + to_string(split) + "/" + tag, cfg.seed);
  const auto d = load_split(run, split);
  const auto scopes = evaluation_scopes(d, rois);
  std::vector<AdcMap> truths;
  for (std::size_t s = 0; s < d.size(); ++s)
    truths.push_back(truth == TruthSource::full_fit ? d.fit_full[s].adc : d.phantoms[s].adc_truth);

  std::vector<MetricsReport> reports;
  std::vector<AdcMap> lsq;
  for (const auto& f : d.fit_accel) lsq.push_back(f.adc);
  reports.push_back(evaluate("LSQ", lsq, truths, scopes));
  if (tag != "full" && run.exists(fit_rel(split, tag, ReconMethod::cs, "adc"))) {
    std::vector<AdcMap> cs;
    for (const auto& f : load_fits(run, split, tag, ReconMethod::cs)) cs.push_back(f.adc);
    reports.push_back(evaluate("CS", cs, truths, scopes));
  }
  std::vector<std::string> models;
  const std::string prefix = to_string(split) + "_", infix = "_" + tag + "_seed";
  if (run.exists("preds"))
    for (const auto& e : fs::directory_iterator(run.path("preds"))) {
      const std::string f = e.path().filename().string();
      if (f.rfind(prefix, 0) == 0 && f.find(infix) != std::string::npos && e.path().extension() == ".qdwi")
        models.push_back(f.substr(prefix.size(), f.size() - prefix.size() - 5));
    }
  std::sort(models.begin(), models.end());
  for (const auto& m : models) {
    const auto ims = detail::images_of(run.read(pred_rel(split, m)), 3, "prediction");
    if (ims.size() != d.size()) throw DataError("prediction '" + m + "' has the wrong slice count");
    std::vector<AdcMap> preds(ims.size());
    for (std::size_t s = 0; s < ims.size(); ++s) preds[s].values = ims[s];
    reports.push_back(evaluate(m, preds, truths, scopes));
  }
  run.write_text("reports/metrics_" + to_string(split) + "_" + tag + ".csv", to_csv(reports));
  run.commit();
  return reports;
}

// ---------------------------------------------------------------------------------------------
// Ablation.

struct AblationVariant {
  std::string name;
  std::string preset;
  RunConfig cfg;
};

/// Variants of the configured sweep: the listed presets, or one axis swept on cfg.preset.
inline std::vector<AblationVariant> ablation_variants(const RunConfig& cfg) {
  std::vector<AblationVariant> out;
  if (cfg.ablate_sweep == "presets") {
    if (cfg.ablate_presets.empty()) throw ConfigError("ablate.presets is empty");
    for (const auto& p : cfg.ablate_presets) {
      (void)find_preset(p);
      out.push_back({p, p, cfg});
    }
  } else if (cfg.ablate_sweep == "loss_weights") {
    for (double w : {0.0, 0.1, 0.5, 1.0}) {
      RunConfig c = cfg;
      c.beta = c.gamma = w;
      out.push_back({cfg.preset + " beta=gamma=" + format_number(w), cfg.preset, c});
    }
  } else if (cfg.ablate_sweep == "filters") {
    for (std::size_t f : {64, 128, 196, 256}) {
      RunConfig c = cfg;
      c.filters = f;
      out.push_back({cfg.preset + " filters=" + std::to_string(f), cfg.preset, c});
    }
  } else {
    for (std::size_t n : {3, 5}) {
      RunConfig c = cfg;
      c.convs = n;
      out.push_back({cfg.preset + " convs=" + std::to_string(n), cfg.preset, c});
    }
  }
  for (const auto& v : out) v.cfg.validate();
  return out;
}

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  MetricsReport report;  // whole-image scope on the test split
};

/// Trains every variant under each shared seed and scores it on the test data.
inline std::vector<AblationRun> run_ablation(const std::vector<AblationVariant>& variants, const std::vector<std::uint64_t>& seeds,
                                             const std::vector<TrainExample>& train, const SplitData& test,
                                             const std::function<void(const std::string&)>& progress = {}) {
  std::vector<AdcMap> truths;
  std::vector<SliceScopes> scopes;
  for (std::size_t s = 0; s < test.size(); ++s) {
    truths.push_back(test.fit_full[s].adc);
    scopes.push_back({{"whole", test.eval_masks[s]}});
  }
  std::vector<AblationRun> out;
  for (const auto& v : variants)
    for (std::uint64_t seed : seeds) {
      const auto setup = training_setup(v.cfg, v.preset, seed);
      nn::DeepAdcNet<float> model(setup.model);
      (void)train_loop(model, train, setup.train);
      std::vector<AdcMap> preds;
      for (std::size_t s = 0; s < test.size(); ++s) preds.push_back(infer(model, test.accel[s], test.fit_accel[s].adc));
      out.push_back({v.name, seed, evaluate(v.name, preds, truths, scopes)});
      if (progress) progress(v.name + " seed " + std::to_string(seed) + " CC " + format_number(out.back().report.summary("whole", "CC").mean));
    }
  return out;
}

/// One row per variant; slices of all seeds are pooled.
inline std::string ablation_csv(const std::vector<AblationVariant>& variants, const std::vector<AblationRun>& runs) {
  std::ostringstream out;
  out << "# dynamic_range=0.0032 (fixed; PSNR peak and SSIM L); whole-image scope, test split\n";
  out << "variant";
  for (const auto& m : metric_names()) out << ',' << m << "_mean," << m << "_std";
  out << ",n_seeds,n_slices,n_excluded\n";
  for (const auto& v : variants) {
    out << v.name;
    std::size_t seeds = 0, slices = 0, excluded = 0;
    for (const auto& m : metric_names()) {
      std::vector<std::optional<double>> pooled;
      seeds = 0;
      for (const auto& r : runs)
        if (r.variant == v.name) {
          const auto& vals = r.report.per_slice.at({"whole", m});
          pooled.insert(pooled.end(), vals.begin(), vals.end());
          ++seeds;
        }
      const auto a = aggregate(pooled);
      out << ',' << format_number(a.mean) << ',' << format_number(a.std);
      if (m == "CC") {
        slices = a.n_slices;
        excluded = a.n_excluded;
      }
    }
    out << ',' << seeds << ',' << slices << ',' << excluded << '\n';
  }
  return out.str();
}

/// Per-seed slice means, for ordering checks across shared seeds.
inline std::string ablation_seed_csv(const std::vector<AblationRun>& runs) {
  std::ostringstream out;
  out << "variant,seed";
  for (const auto& m : metric_names()) out << ',' << m;
  out << '\n';
  for (const auto& r : runs) {
    out << r.variant << ',' << r.seed;
    for (const auto& m : metric_names()) out << ',' << format_number(r.report.summary("whole", m).mean);
    out << '\n';
  }
  return out.str();
}

inline std::vector<std::uint64_t> ablation_seeds(const RunConfig& cfg) {
  std::vector<std::uint64_t> s;
  for (std::size_t k = 0; k < cfg.ablate_seeds; ++k) s.push_back(cfg.train_seed + k);
  return s;
}

inline std::vector<AblationRun> cmd_ablate(Run& run) {
  const auto& cfg = run.config();
  const std::string tag = acquisition_tag(cfg);
  run.begin("ablate/" + tag + "/" + cfg.ablate_sweep, cfg.train_seed);
  const auto variants = ablation_variants(cfg);
  const auto train = load_split(run, Split::train).examples();
  const auto test = load_split(run, Split::test);
  const auto runs = run_ablation(variants, ablation_seeds(cfg), train, test, [&](const std::string& m) { run.say(m); });
  run.write_text("reports/ablation_" + tag + "_" + cfg.ablate_sweep + ".csv", ablation_csv(variants, runs));
  run.write_text("reports/ablation_" + tag + "_" + cfg.ablate_sweep + "_seeds.csv", ablation_seed_csv(runs));
  run.commit();
  return runs;
}

// ---------------------------------------------------------------------------------------------
// Error maps.

/// |pred - truth| clipped at clip_fraction * (max difference). With a ROI, pixels outside it are
/// zero and the maximum is taken inside it.
inline Image error_map(const Image& pred, const Image& truth, const Mask* roi, double clip_fraction) {
  if (!pred.same_shape(truth) || (roi && !roi->same_shape(pred))) throw DataError("error map inputs differ in shape");
  if (!(clip_fraction > 0.0) || clip_fraction > 1.0) throw ConfigError("clip fraction must be in (0, 1]");
  Image d(pred.height(), pred.width(), 0.0);
  double peak = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (roi && !(*roi)[i]) continue;
    d[i] = std::abs(pred[i] - truth[i]);
    peak = std::max(peak, d[i]);
  }
  const double cap = clip_fraction * peak;
  for (double& v : d) v = std::min(v, cap);
  return d;
}

inline std::string grid_csv(const Image& im) {
  std::ostringstream out;
  for (std::size_t y = 0; y < im.height(); ++y) {
    for (std::size_t x = 0; x < im.width(); ++x) out << (x ? "," : "") << format_number(im(y, x));
    out << '\n';
  }
  return out.str();
}

inline Image slice_of(const NdArray& a, std::size_t slice, const std::string& what) {
  if (a.ndim() == 2) {
    if (slice != 0) throw DataError(what + " holds a single image");
    return unstack_images(a).front();
  }
  if (a.ndim() != 3) throw DataError(what + " must be [H, W] or [S, H, W]");
  if (slice >= a.dims()[0]) throw DataError(what + " has no slice " + std::to_string(slice));
  return unstack_images(a)[slice];
}

struct ErrorMapRequest {
  fs::path pred, truth, csv;
  std::size_t slice = 0;
  std::string roi;  // empty = no ROI
  Split split = Split::test;
  double clip_fraction = 0.75;
};

/// The ROI label is resolved against the run's phantom of the requested split and slice.
inline Image cmd_errormap(Run& run, const ErrorMapRequest& req) {
  run.begin("errormap", run.config().seed);
  const Image pred = slice_of(load_tensor(req.pred), req.slice, req.pred.string());
  const Image truth = slice_of(load_tensor(req.truth), req.slice, req.truth.string());
  std::optional<Mask> roi;
  if (!req.roi.empty()) {
    const auto phantoms = load_phantoms(run, req.split);
    if (req.slice >= phantoms.size()) throw DataError("phantom split has no slice " + std::to_string(req.slice));
    roi = roi_mask(phantoms[req.slice], req.roi);
  }
  const Image map = error_map(pred, truth, roi ? &*roi : nullptr, req.clip_fraction);
  fs::path csv = req.csv;
  if (csv.empty())
    csv = run.path("reports/errormap_" + to_string(req.split) + "_s" + std::to_string(req.slice) + (req.roi.empty() ? "" : "_" + req.roi) + ".csv");
  const std::string text = grid_csv(map);
  fs::create_directories(csv.parent_path().empty() ? fs::path(".") : csv.parent_path());
  write_bytes(csv, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  run.commit();
  return map;
}

}  // namespace rdwi::cli
