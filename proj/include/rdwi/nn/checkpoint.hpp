#pragma once

// Checkpoint directory: one QDWI tensor per parameter and per Adam moment, plus manifest.json
// holding the model configuration, the step count and the file index.

#include <filesystem>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "rdwi/core/tensor_io.hpp"
#include "rdwi/nn/model.hpp"

namespace rdwi::nn {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"b_values", c.b_values},
          {"height", c.height},
          {"width", c.width},
          {"filters", c.filters},
          {"blocks", c.blocks},
          {"convs_per_block", c.convs_per_block},
          {"heads", c.heads},
          {"attention_enabled", c.attention_enabled},
          {"adc_min", c.adc_min},
          {"adc_max", c.adc_max},
          {"input_mode", to_string(c.input_mode)},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.b_values = j.at("b_values").get<std::vector<double>>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.filters = j.at("filters").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.convs_per_block = j.at("convs_per_block").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.attention_enabled = j.at("attention_enabled").get<bool>();
    c.adc_min = j.at("adc_min").get<double>();
    c.adc_max = j.at("adc_max").get<double>();
    c.input_mode = parse_input_mode(j.at("input_mode").get<std::string>());
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
}

namespace detail {

template <class T>
NdArray param_tensor(const Shape& s, const std::vector<T>& v) {
  return NdArray({static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                  static_cast<std::uint32_t>(s.w)},
                 v);
}

template <class T>
void read_param_tensor(const std::filesystem::path& path, const Shape& s, std::vector<T>& out) {
  const NdArray a = load_tensor(path);
  const std::vector<std::uint32_t> want{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                        static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  if (a.dims() != want) throw DataError("checkpoint tensor shape mismatch: " + path.string());
  const auto v = a.to_f64();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const DeepAdcNet<T>& model, std::size_t step) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::filesystem::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    const std::string base = p.name;
    save_tensor(dir / (base + ".qdwi"), detail::param_tensor(p.shape(), p.values()));
    save_tensor(dir / (base + ".m1.qdwi"), detail::param_tensor(p.shape(), p.moment1));
    save_tensor(dir / (base + ".m2.qdwi"), detail::param_tensor(p.shape(), p.moment2));
    params.push_back({{"name", p.name},
                      {"file", base + ".qdwi"},
                      {"moment1", base + ".m1.qdwi"},
                      {"moment2", base + ".m2.qdwi"},
                      {"shape", {p.shape().n, p.shape().c, p.shape().h, p.shape().w}}});
  }
  const nlohmann::json manifest{{"format", "rdwi-checkpoint"},
                                {"version", 1},
                                {"dtype", std::is_same_v<T, float> ? "f32" : "f64"},
                                {"step", step},
                                {"config", to_json(model.config())},
                                {"parameters", params}};
  const std::string text = manifest.dump(2) + "\n";
  write_bytes(dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <class T>
struct Checkpoint {
  DeepAdcNet<T> model;
  std::size_t step = 0;
};

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto bytes = read_bytes(dir / "manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("unreadable checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "rdwi-checkpoint") throw DataError("not a checkpoint: " + dir.string());
  Checkpoint<T> ck{DeepAdcNet<T>(model_config_from_json(manifest.at("config"))), manifest.at("step").get<std::size_t>()};
  const auto& entries = manifest.at("parameters");
  if (entries.size() != ck.model.parameters().size()) throw DataError("checkpoint parameter count mismatch");
  for (const auto& e : entries) {
    auto& p = ck.model.parameter(e.at("name").get<std::string>());
    detail::read_param_tensor(dir / e.at("file").get<std::string>(), p.shape(), p.values());
    detail::read_param_tensor(dir / e.at("moment1").get<std::string>(), p.shape(), p.moment1);
    detail::read_param_tensor(dir / e.at("moment2").get<std::string>(), p.shape(), p.moment2);
  }
  return ck;
}

}  // namespace rdwi::nn
