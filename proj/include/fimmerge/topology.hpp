#pragma once

// Classification of parameter names into transformer layers and categories.

#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimmerge/common.hpp"
#include "fimmerge/tensor_archive.hpp"

namespace fimmerge {

enum class Category { attention, mlp, gate_projection, layernorm, embedding, lm_head, other };

inline std::string to_string(Category c) {
  switch (c) {
    case Category::attention: return "attention";
    case Category::mlp: return "mlp";
    case Category::gate_projection: return "gate_projection";
    case Category::layernorm: return "layernorm";
    case Category::embedding: return "embedding";
    case Category::lm_head: return "lm_head";
    case Category::other: return "other";
  }
  return "other";
}

// Name-matching rules. Keyword lists are substring matches, checked in the
// order embedding, lm_head, gate, norm, attention, mlp.
struct NamingScheme {
  std::string layer_pattern = R"((?:^|\.)layers\.(\d+)\.)";
  std::vector<std::string> embedding_keywords{"embed"};
  std::vector<std::string> lm_head_keywords{"lm_head"};
  std::vector<std::string> gate_keywords{"gate_proj"};
  std::vector<std::string> norm_keywords{"norm"};
  std::vector<std::string> attention_keywords{"self_attn", "attn", "attention"};
  std::vector<std::string> mlp_keywords{"mlp", "up_proj", "down_proj"};

  static NamingScheme from_json(const nlohmann::json& j) {
    NamingScheme s;
    auto read_list = [&](const char* key, std::vector<std::string>& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::vector<std::string>>();
    };
    try {
      if (j.contains("layer_pattern")) s.layer_pattern = j.at("layer_pattern").get<std::string>();
      read_list("embedding_keywords", s.embedding_keywords);
      read_list("lm_head_keywords", s.lm_head_keywords);
      read_list("gate_keywords", s.gate_keywords);
      read_list("norm_keywords", s.norm_keywords);
      read_list("attention_keywords", s.attention_keywords);
      read_list("mlp_keywords", s.mlp_keywords);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad naming scheme: ") + e.what());
    }
    return s;
  }

  nlohmann::json to_json() const {
    return {{"layer_pattern", layer_pattern},
            {"embedding_keywords", embedding_keywords},
            {"lm_head_keywords", lm_head_keywords},
            {"gate_keywords", gate_keywords},
            {"norm_keywords", norm_keywords},
            {"attention_keywords", attention_keywords},
            {"mlp_keywords", mlp_keywords}};
  }
};

struct ParamRecord {
  std::optional<int> layer_index;
  Category category = Category::other;
  bool in_coefficient_set = false;
};

struct ModelTopology {
  std::map<std::string, ParamRecord> records;
  std::vector<std::string> warnings;

  const ParamRecord& at(const std::string& name) const {
    auto it = records.find(name);
    if (it == records.end()) throw ValidationError("topology has no record for " + name);
    return it->second;
  }

  // Layers that own at least one coefficient-set parameter, ascending.
  std::vector<int> coefficient_layers() const {
    std::vector<int> out;
    for (const auto& [_, r] : records) {
      if (r.in_coefficient_set) out.push_back(*r.layer_index);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  std::vector<std::string> params_in_layer(int layer, bool coefficient_set_only) const {
    std::vector<std::string> out;
    for (const auto& [name, r] : records) {
      if (r.layer_index == layer && (!coefficient_set_only || r.in_coefficient_set)) {
        out.push_back(name);
      }
    }
    return out;
  }
};

namespace detail {
inline bool contains_any(const std::string& s, const std::vector<std::string>& keys) {
  for (const auto& k : keys) {
    if (!k.empty() && s.find(k) != std::string::npos) return true;
  }
  return false;
}
}  // namespace detail

inline ParamRecord classify_parameter(const std::string& name, const NamingScheme& scheme,
                                      const std::regex& layer_re, bool* matched = nullptr) {
  ParamRecord rec;
  std::smatch m;
  if (std::regex_search(name, m, layer_re) && m.size() > 1) {
    rec.layer_index = std::stoi(m[1].str());
  }
  bool hit = true;
  if (detail::contains_any(name, scheme.embedding_keywords)) {
    rec.category = Category::embedding;
  } else if (detail::contains_any(name, scheme.lm_head_keywords)) {
    rec.category = Category::lm_head;
  } else if (detail::contains_any(name, scheme.gate_keywords)) {
    rec.category = Category::gate_projection;
  } else if (detail::contains_any(name, scheme.norm_keywords)) {
    rec.category = Category::layernorm;
  } else if (detail::contains_any(name, scheme.attention_keywords)) {
    rec.category = Category::attention;
  } else if (detail::contains_any(name, scheme.mlp_keywords)) {
    rec.category = Category::mlp;
  } else {
    rec.category = Category::other;
    hit = false;
  }
  // Per-layer norms stay out of the statistics set but keep their layer
  // index, so the merge still applies the host layer's coefficient.
  rec.in_coefficient_set = rec.layer_index.has_value() &&
                           (rec.category == Category::attention ||
                            rec.category == Category::mlp ||
                            rec.category == Category::gate_projection);
  if (matched) *matched = hit;
  return rec;
}

inline std::regex compile_layer_pattern(const NamingScheme& scheme) {
  try {
    return std::regex(scheme.layer_pattern);
  } catch (const std::regex_error& e) {
    throw ValidationError("bad layer_pattern '" + scheme.layer_pattern + "': " + e.what());
  }
}

inline ParamRecord classify_parameter(const std::string& name, const NamingScheme& scheme = {}) {
  return classify_parameter(name, scheme, compile_layer_pattern(scheme));
}

inline ModelTopology parse_topology(const TensorArchive& archive,
                                    const NamingScheme& scheme = {}) {
  const auto layer_re = compile_layer_pattern(scheme);
  ModelTopology topo;
  for (const auto& [name, _] : archive) {
    bool matched = false;
    topo.records.emplace(name, classify_parameter(name, scheme, layer_re, &matched));
    if (!matched) {
      topo.warnings.push_back("unmatched parameter '" + name +
                              "' classified as 'other' (merged with fallback alpha)");
    }
  }
  return topo;
}

inline nlohmann::json topology_to_json(const ModelTopology& topo) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, r] : topo.records) {
    params[name] = {{"layer_index", r.layer_index ? nlohmann::json(*r.layer_index) : nlohmann::json(nullptr)},
                    {"category", to_string(r.category)},
                    {"in_coefficient_set", r.in_coefficient_set}};
  }
  return {{"parameters", params}, {"warnings", topo.warnings}};
}

}  // namespace fimmerge
