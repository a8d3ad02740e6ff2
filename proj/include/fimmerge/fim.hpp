#pragma once

// Data-free diagonal Fisher information: squared gradients of the mean NLL on
// uniform-random token sequences, averaged over samples, plus per-layer
// scalar reductions and the JSON interchange format.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimmerge/common.hpp"
#include "fimmerge/micro_model.hpp"
#include "fimmerge/tensor_archive.hpp"
#include "fimmerge/topology.hpp"

namespace fimmerge {

enum class LayerReduction { mean, sum };

inline std::string to_string(LayerReduction r) { return r == LayerReduction::mean ? "mean" : "sum"; }

inline LayerReduction parse_reduction(const std::string& s) {
  if (s == "mean") return LayerReduction::mean;
  if (s == "sum") return LayerReduction::sum;
  throw FormatError("unknown per-layer reduction '" + s + "'");
}

struct FimMeta {
  int n_samples = 0;
  int seq_len = 0;
  std::uint64_t seed = 0;
  std::string model_id;
  LayerReduction reduction = LayerReduction::mean;

  friend bool operator==(const FimMeta&, const FimMeta&) = default;
};

struct FimScores {
  // Absent when only per-layer values were imported (large models).
  std::optional<TensorArchive> elementwise;
  std::map<int, double> per_layer;
  FimMeta meta;

  friend bool operator==(const FimScores&, const FimScores&) = default;
};

struct FimOptions {
  int n_samples = 8;
  int seq_len = 64;
  std::uint64_t seed = 42;
};

// Per-layer mean (or sum) of elementwise values over coefficient-set params.
inline std::map<int, double> per_layer_values(const TensorArchive& elementwise,
                                              const ModelTopology& topology,
                                              LayerReduction reduction) {
  std::map<int, double> sums;
  std::map<int, std::size_t> counts;
  for (const auto& [name, t] : elementwise) {
    const auto& rec = topology.at(name);
    if (!rec.in_coefficient_set) continue;
    double s = 0.0;
    for (float x : t.data) s += x;
    sums[*rec.layer_index] += s;
    counts[*rec.layer_index] += t.numel();
  }
  if (reduction == LayerReduction::mean) {
    for (auto& [l, s] : sums) s /= static_cast<double>(counts[l]);
  }
  return sums;
}

inline FimScores reduce_per_layer(FimScores scores, const ModelTopology& topology,
                                  LayerReduction reduction = LayerReduction::mean) {
  if (!scores.elementwise) throw ValidationError("reduce_per_layer needs elementwise FIM values");
  scores.per_layer = per_layer_values(*scores.elementwise, topology, reduction);
  scores.meta.reduction = reduction;
  return scores;
}

inline FimScores estimate_fim(const MicroModel& model, const FimOptions& opts = {},
                              const NamingScheme& scheme = {}) {
  if (opts.n_samples < 1) throw ValidationError("estimate_fim: n_samples must be >= 1");
  if (opts.seq_len < 2) throw ValidationError("estimate_fim: seq_len must be >= 2");
  model.validate();
  MicroNet net(model.config);
  const auto theta = net.layout().flatten(model.parameters);
  const auto samples =
      uniform_token_sequences(model.config.vocab_size, opts.n_samples, opts.seq_len, opts.seed);

  std::vector<std::vector<double>> grads(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    grads[i].assign(theta.size(), 0.0);
    net.evaluate(theta, samples[i], grads[i]);
  });

  std::vector<double> acc(theta.size(), 0.0);
  const double inv_n = 1.0 / opts.n_samples;
  for (const auto& g : grads) {
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += g[p] * g[p] * inv_n;
  }

  FimScores scores;
  scores.elementwise = net.layout().unflatten(acc);
  scores.meta = {opts.n_samples, opts.seq_len, opts.seed, archive_digest(model.parameters),
                 LayerReduction::mean};
  return reduce_per_layer(std::move(scores), parse_topology(model.parameters, scheme));
}

// ---- interchange JSON ----

inline nlohmann::json fim_to_json(const FimScores& s, const std::string& elementwise_path = {}) {
  nlohmann::json per_layer = nlohmann::json::object();
  for (const auto& [l, v] : s.per_layer) per_layer[std::to_string(l)] = v;
  nlohmann::json j = {{"meta",
                       {{"n_samples", s.meta.n_samples},
                        {"seq_len", s.meta.seq_len},
                        {"seed", s.meta.seed},
                        {"model_id", s.meta.model_id},
                        {"reduction", to_string(s.meta.reduction)}}},
                      {"per_layer", per_layer}};
  if (!elementwise_path.empty()) j["elementwise_archive"] = elementwise_path;
  return j;
}

// Writes `path` and, when elementwise values exist, a sibling
// "<stem>.elementwise.safetensors" referenced by relative file name.
inline void export_fim(const FimScores& s, const std::filesystem::path& path) {
  std::string rel;
  if (s.elementwise) {
    rel = path.stem().string() + ".elementwise.safetensors";
    write_archive(*s.elementwise, path.parent_path() / rel);
  }
  write_file_atomic(path, fim_to_json(s, rel).dump(2) + "\n");
}

inline FimScores import_fim(const std::filesystem::path& path, const NamingScheme& scheme = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("FIM file " + path.string() + " is not valid JSON: " + e.what());
  }
  auto fail = [&](const std::string& msg) -> FormatError {
    return FormatError("FIM file " + path.string() + ": " + msg);
  };
  if (!j.is_object()) throw fail("top level must be an object");
  if (!j.contains("meta") || !j["meta"].is_object()) throw fail("missing meta");
  const auto& m = j["meta"];
  FimScores s;
  try {
    for (const char* key : {"n_samples", "seq_len", "seed", "model_id"}) {
      if (!m.contains(key)) throw fail(std::string("meta.") + key + " missing");
    }
    s.meta.n_samples = m.at("n_samples").get<int>();
    s.meta.seq_len = m.at("seq_len").get<int>();
    s.meta.seed = m.at("seed").get<std::uint64_t>();
    s.meta.model_id = m.at("model_id").get<std::string>();
    s.meta.reduction = m.contains("reduction")
                           ? parse_reduction(m.at("reduction").get<std::string>())
                           : LayerReduction::mean;
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad meta: ") + e.what());
  }
  if (s.meta.n_samples < 1) throw fail("meta.n_samples must be >= 1");

  if (!j.contains("per_layer") || !j["per_layer"].is_object()) throw fail("missing per_layer");
  for (const auto& [key, val] : j["per_layer"].items()) {
    int layer = 0;
    try {
      std::size_t used = 0;
      layer = std::stoi(key, &used);
      if (used != key.size() || layer < 0) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw fail("per_layer key '" + key + "' is not a layer index");
    }
    if (!val.is_number()) throw fail("per_layer[" + key + "] is not a number");
    const double v = val.get<double>();
    if (!std::isfinite(v) || v < 0.0) throw fail("per_layer[" + key + "] is negative or non-finite");
    s.per_layer[layer] = v;
  }

  if (j.contains("elementwise_archive") && !j["elementwise_archive"].is_null()) {
    std::filesystem::path ew = j["elementwise_archive"].get<std::string>();
    if (ew.is_relative()) ew = path.parent_path() / ew;
    auto archive = load_archive(ew);
    for (const auto& [name, t] : archive) {
      for (float x : t.data) {
        if (x < 0.0f) throw fail("negative elementwise value in " + name);
      }
    }
    const auto recomputed =
        per_layer_values(archive, parse_topology(archive, scheme), s.meta.reduction);
    if (recomputed.size() != s.per_layer.size()) {
      throw fail("per_layer layers do not match the elementwise archive");
    }
    for (const auto& [l, v] : recomputed) {
      auto it = s.per_layer.find(l);
      if (it == s.per_layer.end()) throw fail("per_layer lacks layer " + std::to_string(l));
      const double denom = std::max(std::abs(v), 1e-300);
      if (std::abs(it->second - v) / denom > 1e-7 && std::abs(it->second - v) > 0.0) {
        throw fail("per_layer[" + std::to_string(l) + "] inconsistent with elementwise values");
      }
    }
    s.elementwise = std::move(archive);
  }
  return s;
}

}  // namespace fimmerge
