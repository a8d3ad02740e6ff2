#pragma once

// Per-layer importance -> merge coefficient:
//   s = log(raw), s~ = s - median(s), theta = 1 / range(s~),
//   alpha = 1 - sigmoid(theta * (s~ - max s~)).
// The most important layer gets 0.5, the least important 1 - sigmoid(-1).

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimmerge/common.hpp"
#include "fimmerge/fim.hpp"
#include "fimmerge/stats.hpp"
#include "fimmerge/tensor_archive.hpp"
#include "fimmerge/topology.hpp"

namespace fimmerge {

inline constexpr double kScoreFloor = 1e-30;
inline constexpr double kDegenerateRange = 1e-12;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class SignalKind { fim_times_delta_sq, fim_only, delta_norm_only };

inline std::string to_string(SignalKind k) {
  switch (k) {
    case SignalKind::fim_times_delta_sq: return "fim_x_delta";
    case SignalKind::fim_only: return "fim_only";
    case SignalKind::delta_norm_only: return "delta_norm";
  }
  return "fim_x_delta";
}

inline SignalKind parse_signal(const std::string& s) {
  if (s == "fim_x_delta" || s == "fim_times_delta_sq") return SignalKind::fim_times_delta_sq;
  if (s == "fim_only") return SignalKind::fim_only;
  if (s == "delta_norm" || s == "delta_norm_only") return SignalKind::delta_norm_only;
  throw ValidationError("unknown importance signal '" + s + "'");
}

struct ImportanceSignal {
  SignalKind kind = SignalKind::fim_times_delta_sq;
  std::map<int, double> per_layer_raw;  // clamped to >= kScoreFloor
};

struct LayerDiagnostics {
  double s = 0.0, s_tilde = 0.0, t = 0.0;
};

struct AlphaAssignment {
  std::map<int, double> per_layer;
  double fallback_alpha = 0.5;
  double theta_adapt = 0.0;
  bool theta_overridden = false;
  std::map<int, LayerDiagnostics> diagnostics;

  // Coefficient for a layer; layers without an entry get the fallback.
  double alpha_for(std::optional<int> layer) const {
    if (!layer) return fallback_alpha;
    auto it = per_layer.find(*layer);
    return it == per_layer.end() ? fallback_alpha : it->second;
  }

  // A fixed assignment (every layer and the fallback equal to `alpha`).
  static AlphaAssignment constant(const std::vector<int>& layers, double alpha) {
    AlphaAssignment a;
    for (int l : layers) a.per_layer[l] = alpha;
    a.fallback_alpha = alpha;
    return a;
  }
};

// Per-layer mean of squared task-vector entries over coefficient-set params.
inline std::map<int, double> delta_layer_norms(const TensorArchive& delta,
                                               const ModelTopology& topology) {
  std::map<int, double> sums;
  std::map<int, std::size_t> counts;
  for (const auto& [name, t] : delta) {
    const auto& rec = topology.at(name);
    if (!rec.in_coefficient_set) continue;
    double s = 0.0;
    for (float x : t.data) s += double(x) * double(x);
    sums[*rec.layer_index] += s;
    counts[*rec.layer_index] += t.numel();
  }
  for (auto& [l, s] : sums) s /= static_cast<double>(counts[l]);
  return sums;
}

// Per-layer Frobenius norm of the task vector over coefficient-set params.
inline std::map<int, double> delta_layer_frobenius(const TensorArchive& delta,
                                                   const ModelTopology& topology) {
  std::map<int, double> sums;
  for (const auto& [name, t] : delta) {
    const auto& rec = topology.at(name);
    if (!rec.in_coefficient_set) continue;
    for (float x : t.data) sums[*rec.layer_index] += double(x) * double(x);
  }
  for (auto& [_, s] : sums) s = std::sqrt(s);
  return sums;
}

inline ImportanceSignal build_signal(SignalKind kind, const std::map<int, double>& fim_per_layer,
                                     const TensorArchive& delta, const ModelTopology& topology) {
  ImportanceSignal sig;
  sig.kind = kind;
  const auto layers = topology.coefficient_layers();
  if (layers.empty()) throw ValidationError("no transformer layers in the coefficient set");
  std::map<int, double> dn;
  if (kind == SignalKind::delta_norm_only) {
    dn = delta_layer_frobenius(delta, topology);
  } else if (kind == SignalKind::fim_times_delta_sq) {
    dn = delta_layer_norms(delta, topology);
  }
  for (int l : layers) {
    double raw = 1.0;
    if (kind != SignalKind::delta_norm_only) {
      auto it = fim_per_layer.find(l);
      if (it == fim_per_layer.end()) {
        throw ValidationError("FIM scores lack layer " + std::to_string(l));
      }
      raw = it->second;
    }
    if (kind != SignalKind::fim_only) raw *= dn.at(l);
    sig.per_layer_raw[l] = std::max(raw, kScoreFloor);
  }
  return sig;
}

inline AlphaAssignment assign_alphas(const ImportanceSignal& signal,
                                     std::optional<double> sigmoid_theta = std::nullopt) {
  if (signal.per_layer_raw.empty()) throw ValidationError("assign_alphas: empty coefficient set");
  std::vector<double> s;
  for (const auto& [_, raw] : signal.per_layer_raw) {
    s.push_back(std::log(std::max(raw, kScoreFloor)));
  }
  const double med = stats::median(s);
  std::vector<double> st(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) st[i] = s[i] - med;
  const double hi = *std::max_element(st.begin(), st.end());
  const double lo = *std::min_element(st.begin(), st.end());
  const bool degenerate = (hi - lo) <= kDegenerateRange;

  AlphaAssignment a;
  a.theta_overridden = sigmoid_theta.has_value();
  a.theta_adapt = sigmoid_theta ? *sigmoid_theta : (degenerate ? 0.0 : 1.0 / (hi - lo));
  double sum = 0.0;
  std::size_t i = 0;
  for (const auto& [l, _] : signal.per_layer_raw) {
    const double t = degenerate ? 0.5 : sigmoid(a.theta_adapt * (st[i] - hi));
    a.per_layer[l] = 1.0 - t;
    a.diagnostics[l] = {s[i], st[i], t};
    sum += 1.0 - t;
    ++i;
  }
  a.fallback_alpha = sum / static_cast<double>(a.per_layer.size());
  return a;
}

inline nlohmann::json alphas_to_json(const AlphaAssignment& a) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [l, alpha] : a.per_layer) {
    nlohmann::json e = {{"alpha", alpha}};
    if (auto it = a.diagnostics.find(l); it != a.diagnostics.end()) {
      e["s"] = it->second.s;
      e["s_tilde"] = it->second.s_tilde;
      e["t"] = it->second.t;
    }
    layers[std::to_string(l)] = e;
  }
  return {{"per_layer", layers},
          {"fallback_alpha", a.fallback_alpha},
          {"theta_adapt", a.theta_adapt},
          {"theta_overridden", a.theta_overridden}};
}

inline AlphaAssignment alphas_from_json(const nlohmann::json& j) {
  AlphaAssignment a;
  try {
    for (const auto& [key, e] : j.at("per_layer").items()) {
      const int l = std::stoi(key);
      if (e.is_number()) {
        a.per_layer[l] = e.get<double>();
      } else {
        a.per_layer[l] = e.at("alpha").get<double>();
        if (e.contains("s")) {
          a.diagnostics[l] = {e.at("s").get<double>(), e.at("s_tilde").get<double>(),
                              e.at("t").get<double>()};
        }
      }
    }
    a.fallback_alpha = j.at("fallback_alpha").get<double>();
    if (j.contains("theta_adapt")) a.theta_adapt = j.at("theta_adapt").get<double>();
    if (j.contains("theta_overridden")) a.theta_overridden = j.at("theta_overridden").get<bool>();
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad alpha assignment JSON: ") + e.what());
  }
  return a;
}

}  // namespace fimmerge
