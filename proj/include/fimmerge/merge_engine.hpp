#pragma once

// Task-vector merging: FIM-weighted trimming, per-layer coefficients with
// gate protection, and probe-based output-norm calibration.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimmerge/alpha_policy.hpp"
#include "fimmerge/common.hpp"
#include "fimmerge/fim.hpp"
#include "fimmerge/tensor_archive.hpp"
#include "fimmerge/topology.hpp"

namespace fimmerge {

enum class MergeMethod { fim_ta, fim_ties };
enum class TrimMode { per_tensor, pooled };

inline std::string to_string(MergeMethod m) { return m == MergeMethod::fim_ta ? "fim_ta" : "fim_ties"; }
inline std::string to_string(TrimMode m) { return m == TrimMode::per_tensor ? "per_tensor" : "pooled"; }

inline MergeMethod parse_method(const std::string& s) {
  if (s == "ta" || s == "fim_ta") return MergeMethod::fim_ta;
  if (s == "ties" || s == "fim_ties") return MergeMethod::fim_ties;
  throw ValidationError("unknown merge method '" + s + "'");
}

inline TrimMode parse_trim_mode(const std::string& s) {
  if (s == "per_tensor") return TrimMode::per_tensor;
  if (s == "pooled") return TrimMode::pooled;
  throw ValidationError("unknown trim mode '" + s + "'");
}

struct MergePlan {
  MergeMethod method = MergeMethod::fim_ties;
  AlphaAssignment alphas;
  double trim_ratio = 0.2;
  double gate_factor = 0.7;
  double norm_threshold = 0.05;  // +inf disables calibration
  std::uint64_t probe_seed = 42;
  int probe_count = 8;
  TrimMode trim_mode = TrimMode::per_tensor;

  void validate() const {
    if (!(trim_ratio > 0.0 && trim_ratio <= 1.0)) {
      throw ValidationError("trim ratio must lie in (0, 1], got " + std::to_string(trim_ratio));
    }
    if (!(gate_factor > 0.0 && gate_factor <= 1.0)) {
      throw ValidationError("gate factor must lie in (0, 1], got " + std::to_string(gate_factor));
    }
    if (!(norm_threshold >= 0.0)) throw ValidationError("norm threshold must be >= 0");
    if (probe_count < 1) throw ValidationError("probe_count must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"method", to_string(method)},
            {"alphas", alphas_to_json(alphas)},
            {"trim_ratio", trim_ratio},
            {"gate_factor", gate_factor},
            {"norm_threshold", std::isinf(norm_threshold) ? nlohmann::json("inf")
                                                          : nlohmann::json(norm_threshold)},
            {"probe_seed", probe_seed},
            {"probe_count", probe_count},
            {"trim_mode", to_string(trim_mode)}};
  }

  std::string hash() const { return digest_hex(to_json().dump()); }
};

// Number of survivors for ratio r over n entries: ceil(r n), with products
// that are integral up to rounding noise (0.2 * 10) treated as integral.
inline std::size_t survivor_count(double r, std::size_t n) {
  const double x = r * static_cast<double>(n);
  const double nearest = std::round(x);
  const double k = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(k));
}

// Keep-mask of the top-k entries by weight; ties go to the lower index.
inline std::vector<char> top_k_mask(std::span<const double> w, std::size_t k) {
  std::vector<char> keep(w.size(), 0);
  if (k >= w.size()) {
    std::fill(keep.begin(), keep.end(), 1);
    return keep;
  }
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [&](std::size_t a, std::size_t b) { return w[a] > w[b] || (w[a] == w[b] && a < b); };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  for (std::size_t i = 0; i < k; ++i) keep[idx[i]] = 1;
  return keep;
}

struct TrimStats {
  std::size_t retained = 0;
  std::size_t total = 0;
};

struct TrimResult {
  TensorArchive trimmed;
  std::map<std::string, std::vector<char>> masks;  // trimmed tensors only
  std::map<std::string, TrimStats> stats;           // per tensor
  bool used_fallback_weights = false;
};

// Zeroes task-vector entries whose importance w = F * |delta| falls outside
// the top ceil(r n) of their group. Non-coefficient-set tensors pass through.
inline TrimResult trim_task_vector(const TensorArchive& delta, const FimScores& fim,
                                   const ModelTopology& topology, double r,
                                   TrimMode mode = TrimMode::per_tensor,
                                   bool allow_fallback = true) {
  if (!(r > 0.0 && r <= 1.0)) throw ValidationError("trim ratio must lie in (0, 1]");
  TrimResult res;
  res.trimmed = delta;
  res.used_fallback_weights = !fim.elementwise.has_value();
  if (res.used_fallback_weights && !allow_fallback) {
    throw ValidationError("trimming needs elementwise FIM values (fallback disabled)");
  }

  auto weights = [&](const std::string& name, const Tensor& d) {
    std::vector<double> w(d.numel());
    if (fim.elementwise) {
      const auto& f = fim.elementwise->at(name);
      if (f.shape != d.shape) throw ValidationError("FIM shape mismatch for " + name);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = double(f.data[i]) * std::abs(double(d.data[i]));
    } else {
      // rank-equivalent to per_layer scalar * |delta| within a group
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::abs(double(d.data[i]));
    }
    return w;
  };

  std::map<int, std::vector<std::string>> groups;
  for (const auto& [name, d] : delta) {
    const auto& rec = topology.at(name);
    if (!rec.in_coefficient_set) continue;
    if (mode == TrimMode::per_tensor) {
      auto w = weights(name, d);
      res.masks[name] = top_k_mask(w, survivor_count(r, w.size()));
    } else {
      groups[*rec.layer_index].push_back(name);
    }
  }
  for (const auto& [layer, names] : groups) {
    std::vector<double> w;
    for (const auto& name : names) {
      auto part = weights(name, delta.at(name));
      w.insert(w.end(), part.begin(), part.end());
    }
    const auto keep = top_k_mask(w, survivor_count(r, w.size()));
    std::size_t off = 0;
    for (const auto& name : names) {
      const auto n = delta.at(name).numel();
      res.masks[name].assign(keep.begin() + static_cast<std::ptrdiff_t>(off),
                             keep.begin() + static_cast<std::ptrdiff_t>(off + n));
      off += n;
    }
  }
  for (const auto& [name, mask] : res.masks) {
    auto& t = res.trimmed.at(name);
    TrimStats st{0, mask.size()};
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) {
        ++st.retained;
      } else {
        t.data[i] = 0.0f;
      }
    }
    res.stats[name] = st;
  }
  return res;
}

inline void check_aligned(const TensorArchive& base, const TensorArchive& tuned) {
  std::vector<std::string> bad;
  for (const auto& [name, t] : base) {
    if (!tuned.contains(name)) {
      bad.push_back(name + " (missing in tuned)");
    } else if (tuned.at(name).shape != t.shape) {
      bad.push_back(name + " (shape " + shape_string(t.shape) + " vs " +
                    shape_string(tuned.at(name).shape) + ")");
    }
  }
  for (const auto& [name, _] : tuned) {
    if (!base.contains(name)) bad.push_back(name + " (missing in base)");
  }
  if (!bad.empty()) {
    std::string msg = "base/tuned archives are not aligned:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
}

inline TensorArchive task_vector(const TensorArchive& base, const TensorArchive& tuned) {
  check_aligned(base, tuned);
  TensorArchive delta;
  for (const auto& [name, b] : base) {
    const auto& t = tuned.at(name);
    Tensor d(b.shape, std::vector<float>(b.numel()));
    for (std::size_t i = 0; i < d.numel(); ++i) d.data[i] = t.data[i] - b.data[i];
    delta.insert(name, std::move(d));
  }
  return delta;
}

struct CalibrationResult {
  Tensor weights;
  double factor = 1.0;
  double base_norm = 0.0;
  double pre_norm = 0.0;   // merged, before rescaling
  double post_norm = 0.0;  // merged, after rescaling
  bool degenerate = false;  // zero base norm: skipped
};

// RMS over probes of ||W x||_2 for standard-normal x of the input dimension.
inline double probe_output_norm(const Tensor& w, const std::vector<std::vector<double>>& probes) {
  const auto rows = static_cast<std::size_t>(w.rows()), cols = static_cast<std::size_t>(w.cols());
  double total = 0.0;
  for (const auto& x : probes) {
    for (std::size_t i = 0; i < rows; ++i) {
      double y = 0.0;
      for (std::size_t j = 0; j < cols; ++j) y += double(w.data[i * cols + j]) * x[j];
      total += y * y;
    }
  }
  return std::sqrt(total / static_cast<double>(probes.size()));
}

inline std::vector<std::vector<double>> normal_probes(std::size_t dim, int count,
                                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<std::vector<double>> probes(static_cast<std::size_t>(count), std::vector<double>(dim));
  for (auto& p : probes) {
    for (auto& x : p) x = dist(rng);
  }
  return probes;
}

inline CalibrationResult norm_calibrate(const Tensor& merged, const Tensor& base, double eps,
                                        std::uint64_t probe_seed, int probe_count) {
  if (!merged.is_matrix() || merged.shape != base.shape) {
    throw ValidationError("norm calibration needs two matrices of equal shape");
  }
  const auto probes = normal_probes(static_cast<std::size_t>(base.cols()), probe_count, probe_seed);
  CalibrationResult r{merged};
  r.base_norm = probe_output_norm(base, probes);
  r.pre_norm = probe_output_norm(merged, probes);
  r.post_norm = r.pre_norm;
  if (r.base_norm <= 0.0 || r.pre_norm <= 0.0) {
    r.degenerate = true;
    return r;
  }
  if (std::abs(r.pre_norm / r.base_norm - 1.0) > eps) {
    r.factor = r.base_norm / r.pre_norm;
    for (auto& x : r.weights.data) x = static_cast<float>(double(x) * r.factor);
    r.post_norm = probe_output_norm(r.weights, probes);
  }
  return r;
}

struct TensorMergeRecord {
  std::string name;
  std::optional<int> layer;
  Category category = Category::other;
  double alpha = 0.0;
  bool gate_scaled = false;
  std::optional<TrimStats> trim;
  std::optional<CalibrationResult> calibration;  // weights field left empty
};

struct MergeReport {
  MergePlan plan;
  std::string base_digest, tuned_digest, merged_digest;
  std::string fim_model_id;
  bool trim_fallback = false;
  std::vector<TensorMergeRecord> tensors;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [l, a] : plan.alphas.per_layer) layers[std::to_string(l)] = {{"alpha", a}};
    nlohmann::json ts = nlohmann::json::array();
    for (const auto& t : tensors) {
      nlohmann::json e = {{"name", t.name},
                          {"layer", t.layer ? nlohmann::json(*t.layer) : nlohmann::json(nullptr)},
                          {"category", to_string(t.category)},
                          {"alpha_applied", t.alpha},
                          {"gate_scaled", t.gate_scaled}};
      if (t.trim) e["trim"] = {{"retained", t.trim->retained}, {"total", t.trim->total}};
      if (t.calibration) {
        const auto& c = *t.calibration;
        e["calibration"] = {{"base_norm", c.base_norm},
                            {"pre_norm", c.pre_norm},
                            {"post_norm", c.post_norm},
                            {"rescale_factor", c.factor},
                            {"rescaled", c.factor != 1.0},
                            {"degenerate", c.degenerate}};
      }
      ts.push_back(e);
    }
    return {{"method", to_string(plan.method)},
            {"plan", plan.to_json()},
            {"plan_hash", plan.hash()},
            {"inputs", {{"base", base_digest}, {"tuned", tuned_digest}, {"fim_model_id", fim_model_id}}},
            {"merged_digest", merged_digest},
            {"trim_weight_fallback", trim_fallback},
            {"layers", layers},
            {"fallback_alpha", plan.alphas.fallback_alpha},
            {"tensors", ts},
            {"warnings", warnings}};
  }
};

struct MergeResult {
  TensorArchive merged;
  MergeReport report;
};

// Coefficient for one parameter before gate scaling. Per-layer tensors
// (including their norms) use the layer's alpha; embedding, lm_head,
// final norm and unmatched names use the fallback.
inline double base_alpha_for(const ParamRecord& rec, const AlphaAssignment& a) {
  if (rec.category == Category::embedding || rec.category == Category::lm_head ||
      rec.category == Category::other || !rec.layer_index) {
    return a.fallback_alpha;
  }
  return a.alpha_for(rec.layer_index);
}

inline MergeResult merge(const TensorArchive& base, const TensorArchive& tuned,
                         const MergePlan& plan, const FimScores& fim,
                         const ModelTopology& topology) {
  plan.validate();
  const auto delta = task_vector(base, tuned);
  MergeResult out;
  auto& rep = out.report;
  rep.plan = plan;
  rep.base_digest = archive_digest(base);
  rep.tuned_digest = archive_digest(tuned);
  rep.fim_model_id = fim.meta.model_id;
  rep.warnings = topology.warnings;

  std::optional<TrimResult> trim;
  if (plan.method == MergeMethod::fim_ties) {
    trim = trim_task_vector(delta, fim, topology, plan.trim_ratio, plan.trim_mode);
    rep.trim_fallback = trim->used_fallback_weights;
    if (rep.trim_fallback) {
      rep.warnings.push_back(
          "elementwise FIM unavailable: trimming ranked by |delta| (per-layer FIM fallback)");
    }
  }
  for (int l : topology.coefficient_layers()) {
    if (!plan.alphas.per_layer.count(l)) {
      rep.warnings.push_back("layer " + std::to_string(l) + " has no alpha; using fallback");
    }
  }

  const auto names = base.names();
  std::vector<Tensor> merged(names.size());
  std::vector<TensorMergeRecord> records(names.size());
  parallel_for(names.size(), [&](std::size_t k) {
    const auto& name = names[k];
    const auto& rec = topology.at(name);
    const auto& b = base.at(name);
    const auto& t = tuned.at(name);
    auto& r = records[k];
    r.name = name;
    r.layer = rec.layer_index;
    r.category = rec.category;
    r.alpha = base_alpha_for(rec, plan.alphas);
    if (rec.category == Category::gate_projection) {
      r.alpha *= plan.gate_factor;
      r.gate_scaled = true;
    }
    const std::vector<char>* mask = nullptr;
    if (trim) {
      if (auto it = trim->masks.find(name); it != trim->masks.end()) {
        mask = &it->second;
        r.trim = trim->stats.at(name);
      }
    }
    // theta0 + alpha * delta, evaluated as lerp so alpha = 0 / 1 reproduce
    // the endpoints bit-exactly
    Tensor m(b.shape, std::vector<float>(b.numel()));
    for (std::size_t i = 0; i < m.numel(); ++i) {
      m.data[i] = (mask && !(*mask)[i])
                      ? b.data[i]
                      : static_cast<float>(std::lerp(double(b.data[i]), double(t.data[i]), r.alpha));
    }
    if (m.is_matrix() && std::isfinite(plan.norm_threshold)) {
      auto cal = norm_calibrate(m, b, plan.norm_threshold, plan.probe_seed, plan.probe_count);
      m = std::move(cal.weights);
      cal.weights = Tensor{};
      r.calibration = std::move(cal);
    }
    merged[k] = std::move(m);
  });
  for (std::size_t k = 0; k < names.size(); ++k) out.merged.insert(names[k], std::move(merged[k]));
  rep.tensors = std::move(records);
  rep.merged_digest = archive_digest(out.merged);
  return out;
}

}  // namespace fimmerge
