#pragma once

// A small decoder language model with exact reverse-mode gradients.
//
// Block structure (pre-norm, single attention head, no positional table):
//   a  = rms(h) * g_in
//   h += o_proj( causal_softmax(q k^T / sqrt(D)) v )
//   b  = rms(h) * g_post
//   h += down_proj( silu(gate_proj b) * up_proj b )
// followed by a final RMS norm and lm_head. Parameters are stored as f32 in
// a TensorArchive; every computation runs in f64 on a flat copy.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fimmerge/common.hpp"
#include "fimmerge/tensor_archive.hpp"

namespace fimmerge {

using TokenSeq = std::vector<int>;

struct MicroModelConfig {
  int vocab_size = 64;
  int seq_len = 64;
  int n_layers = 4;
  int hidden_dim = 16;
  int mlp_dim = 32;
  std::uint64_t seed = 42;
  double init_scale = 1.0;

  void validate() const {
    if (vocab_size < 2 || seq_len < 2 || n_layers < 1 || hidden_dim < 1 || mlp_dim < 1) {
      throw ValidationError("micro model config: sizes must be positive (vocab, seq_len >= 2)");
    }
    if (!(init_scale > 0.0)) throw ValidationError("micro model config: init_scale must be > 0");
  }

  std::size_t parameter_count() const {
    const std::size_t v = vocab_size, d = hidden_dim, f = mlp_dim;
    return 2 * v * d + d + static_cast<std::size_t>(n_layers) * (2 * d + 4 * d * d + 3 * d * f);
  }

  friend bool operator==(const MicroModelConfig&, const MicroModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const MicroModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"seq_len", c.seq_len},     {"n_layers", c.n_layers},
       {"hidden_dim", c.hidden_dim}, {"mlp_dim", c.mlp_dim},     {"seed", c.seed},
       {"init_scale", c.init_scale}};
}

inline void from_json(const nlohmann::json& j, MicroModelConfig& c) {
  c = MicroModelConfig{};
  if (j.contains("vocab_size")) j.at("vocab_size").get_to(c.vocab_size);
  if (j.contains("seq_len")) j.at("seq_len").get_to(c.seq_len);
  if (j.contains("n_layers")) j.at("n_layers").get_to(c.n_layers);
  if (j.contains("hidden_dim")) j.at("hidden_dim").get_to(c.hidden_dim);
  if (j.contains("mlp_dim")) j.at("mlp_dim").get_to(c.mlp_dim);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("init_scale")) j.at("init_scale").get_to(c.init_scale);
  c.validate();
}

namespace micro_names {
inline const std::string embed = "model.embed_tokens.weight";
inline const std::string final_norm = "model.norm.weight";
inline const std::string lm_head = "lm_head.weight";
inline std::string layer(int l, const char* suffix) {
  return "model.layers." + std::to_string(l) + "." + suffix;
}
}  // namespace micro_names

// Flat f64 layout of the parameter archive, in archive (name) order.
struct ParamSlot {
  std::string name;
  std::vector<std::int64_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(const TensorArchive& shapes) {
    for (const auto& [name, t] : shapes) {
      slots_.push_back({name, t.shape, total_, t.numel()});
      total_ += t.numel();
    }
  }

  std::size_t total() const { return total_; }
  const std::vector<ParamSlot>& slots() const { return slots_; }

  const ParamSlot& slot(const std::string& name) const {
    for (const auto& s : slots_) {
      if (s.name == name) return s;
    }
    throw ValidationError("layout has no parameter " + name);
  }

  std::vector<double> flatten(const TensorArchive& archive) const {
    std::vector<double> out(total_);
    for (const auto& s : slots_) {
      const auto& t = archive.at(s.name);
      if (t.shape != s.shape) throw ValidationError("shape mismatch for " + s.name);
      std::copy(t.data.begin(), t.data.end(), out.begin() + static_cast<std::ptrdiff_t>(s.offset));
    }
    return out;
  }

  TensorArchive unflatten(std::span<const double> flat) const {
    if (flat.size() != total_) throw ValidationError("flat parameter vector has wrong length");
    TensorArchive out;
    for (const auto& s : slots_) {
      std::vector<float> data(s.size);
      for (std::size_t i = 0; i < s.size; ++i) data[i] = static_cast<float>(flat[s.offset + i]);
      out.insert(s.name, Tensor(s.shape, std::move(data)));
    }
    return out;
  }

  // Name of the parameter holding flat coordinate `index`.
  const ParamSlot& owner(std::size_t index) const {
    for (const auto& s : slots_) {
      if (index >= s.offset && index < s.offset + s.size) return s;
    }
    throw ValidationError("flat index out of range: " + std::to_string(index));
  }

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

inline TensorArchive micro_parameter_shapes(const MicroModelConfig& c) {
  const std::int64_t v = c.vocab_size, d = c.hidden_dim, f = c.mlp_dim;
  TensorArchive a;
  a.insert(micro_names::embed, Tensor::zeros({v, d}));
  a.insert(micro_names::final_norm, Tensor::zeros({d}));
  a.insert(micro_names::lm_head, Tensor::zeros({v, d}));
  for (int l = 0; l < c.n_layers; ++l) {
    using micro_names::layer;
    a.insert(layer(l, "input_layernorm.weight"), Tensor::zeros({d}));
    a.insert(layer(l, "post_attention_layernorm.weight"), Tensor::zeros({d}));
    a.insert(layer(l, "self_attn.q_proj.weight"), Tensor::zeros({d, d}));
    a.insert(layer(l, "self_attn.k_proj.weight"), Tensor::zeros({d, d}));
    a.insert(layer(l, "self_attn.v_proj.weight"), Tensor::zeros({d, d}));
    a.insert(layer(l, "self_attn.o_proj.weight"), Tensor::zeros({d, d}));
    a.insert(layer(l, "mlp.gate_proj.weight"), Tensor::zeros({f, d}));
    a.insert(layer(l, "mlp.up_proj.weight"), Tensor::zeros({f, d}));
    a.insert(layer(l, "mlp.down_proj.weight"), Tensor::zeros({d, f}));
  }
  return a;
}

struct MicroModel {
  MicroModelConfig config;
  TensorArchive parameters;

  // Deterministic initialization from config.seed.
  static MicroModel init(const MicroModelConfig& config) {
    config.validate();
    MicroModel m{config, micro_parameter_shapes(config)};
    std::mt19937_64 rng(config.seed);
    for (auto& [name, t] : m.parameters) {
      if (name.find("norm") != std::string::npos) {
        std::fill(t.data.begin(), t.data.end(), 1.0f);
        continue;
      }
      double stddev = 1.0;
      if (name != micro_names::embed) stddev = config.init_scale / std::sqrt(double(t.cols()));
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& x : t.data) x = static_cast<float>(dist(rng));
    }
    return m;
  }

  // Checks that the archive matches the configured architecture.
  void validate() const {
    config.validate();
    const auto expected = micro_parameter_shapes(config);
    if (expected.size() != parameters.size()) {
      throw ValidationError("micro model archive has " + std::to_string(parameters.size()) +
                            " tensors, config implies " + std::to_string(expected.size()));
    }
    for (const auto& [name, t] : expected) {
      if (!parameters.contains(name)) throw ValidationError("micro model archive lacks " + name);
      if (parameters.at(name).shape != t.shape) {
        throw ValidationError("micro model tensor " + name + " has shape " +
                              shape_string(parameters.at(name).shape) + ", expected " +
                              shape_string(t.shape));
      }
    }
  }
};

class MicroNet {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::VectorXd;

  explicit MicroNet(const MicroModelConfig& config)
      : config_(config), layout_(micro_parameter_shapes(config)) {
    config.validate();
    embed_ = layout_.slot(micro_names::embed).offset;
    final_norm_ = layout_.slot(micro_names::final_norm).offset;
    lm_head_ = layout_.slot(micro_names::lm_head).offset;
    for (int l = 0; l < config.n_layers; ++l) {
      using micro_names::layer;
      layers_.push_back({layout_.slot(layer(l, "input_layernorm.weight")).offset,
                         layout_.slot(layer(l, "self_attn.q_proj.weight")).offset,
                         layout_.slot(layer(l, "self_attn.k_proj.weight")).offset,
                         layout_.slot(layer(l, "self_attn.v_proj.weight")).offset,
                         layout_.slot(layer(l, "self_attn.o_proj.weight")).offset,
                         layout_.slot(layer(l, "post_attention_layernorm.weight")).offset,
                         layout_.slot(layer(l, "mlp.gate_proj.weight")).offset,
                         layout_.slot(layer(l, "mlp.up_proj.weight")).offset,
                         layout_.slot(layer(l, "mlp.down_proj.weight")).offset});
    }
  }

  const MicroModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t parameter_count() const { return layout_.total(); }

  void check_tokens(std::span<const int> tokens) const {
    if (tokens.size() < 2) throw ValidationError("token sequence needs at least 2 tokens");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
        throw ValidationError("token out of range at position " + std::to_string(i) + ": " +
                              std::to_string(tokens[i]) + " (vocab_size " +
                              std::to_string(config_.vocab_size) + ")");
      }
    }
  }

  // Weighted next-token NLL sum_t w_t * -log p(x_{t+1} | x_<=t). Default
  // weights are 1/(T-1), i.e. the mean NLL. When `grad` is non-empty,
  // grad += grad_scale * dLoss/dtheta.
  double evaluate(std::span<const double> theta, std::span<const int> tokens,
                  std::span<double> grad = {}, double grad_scale = 1.0,
                  std::span<const double> weights = {}) const {
    check_tokens(tokens);
    if (theta.size() != layout_.total()) throw ValidationError("theta has wrong length");
    if (!grad.empty() && grad.size() != layout_.total()) {
      throw ValidationError("gradient buffer has wrong length");
    }
    const int n_pred = static_cast<int>(tokens.size()) - 1;
    if (!weights.empty() && static_cast<int>(weights.size()) != n_pred) {
      throw ValidationError("position weights must have length T-1");
    }
    auto weight = [&](int t) { return weights.empty() ? 1.0 / n_pred : weights[t]; };

    Trace tr;
    forward(theta, tokens, tr);
    double loss = 0.0;
    for (int t = 0; t < n_pred; ++t) loss -= weight(t) * tr.logp(t, tokens[t + 1]);
    if (grad.empty()) return loss;

    const int T = static_cast<int>(tokens.size());
    RowMat dlogits = RowMat::Zero(T, config_.vocab_size);
    for (int t = 0; t < n_pred; ++t) {
      dlogits.row(t) = tr.logp.row(t).array().exp() * weight(t);
      dlogits(t, tokens[t + 1]) -= weight(t);
    }
    backward(theta, tokens, tr, dlogits, grad, grad_scale);
    return loss;
  }

  // log p(x_{t+1} | x_<=t) for t = 0..T-2.
  std::vector<double> token_log_probs(std::span<const double> theta,
                                      std::span<const int> tokens) const {
    check_tokens(tokens);
    Trace tr;
    forward(theta, tokens, tr);
    std::vector<double> out(tokens.size() - 1);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) out[t] = tr.logp(t, tokens[t + 1]);
    return out;
  }

  // Full log-softmax rows, one per position.
  RowMat log_softmax_rows(std::span<const double> theta, std::span<const int> tokens) const {
    check_tokens(tokens);
    Trace tr;
    forward(theta, tokens, tr);
    return tr.logp;
  }

 private:
  static constexpr double kEps = 1e-6;

  struct LayerOffsets {
    std::size_t ln_in, q, k, v, o, ln_post, gate, up, down;
  };

  struct LayerTrace {
    RowMat h_in, a, q, k, v, p, c, h_mid, b, g, u, sig, m;
    Vec inv_r1, inv_r2;
  };

  struct Trace {
    std::vector<LayerTrace> layers;
    RowMat h_out, n, logp;
    Vec inv_rf;
  };

  Eigen::Map<const RowMat> mat(std::span<const double> theta, std::size_t off, int rows,
                               int cols) const {
    return Eigen::Map<const RowMat>(theta.data() + off, rows, cols);
  }
  Eigen::Map<const Vec> vec(std::span<const double> theta, std::size_t off, int n) const {
    return Eigen::Map<const Vec>(theta.data() + off, n);
  }

  static void rms_forward(const RowMat& h, const Eigen::Map<const Vec>& g, RowMat& y, Vec& inv_r) {
    const auto d = static_cast<double>(h.cols());
    y.resize(h.rows(), h.cols());
    inv_r.resize(h.rows());
    for (Eigen::Index t = 0; t < h.rows(); ++t) {
      inv_r[t] = 1.0 / std::sqrt(h.row(t).squaredNorm() / d + kEps);
      y.row(t) = h.row(t).cwiseProduct(g.transpose()) * inv_r[t];
    }
  }

  static void rms_backward(const RowMat& h, const Eigen::Map<const Vec>& g, const Vec& inv_r,
                           const RowMat& dy, RowMat& dh, Vec& dg) {
    const auto d = static_cast<double>(h.cols());
    dg = Vec::Zero(h.cols());
    for (Eigen::Index t = 0; t < h.rows(); ++t) {
      const double ir = inv_r[t];
      dg += (dy.row(t).cwiseProduct(h.row(t)) * ir).transpose();
      const double dot = dy.row(t).cwiseProduct(g.transpose()).dot(h.row(t));
      dh.row(t) += ir * dy.row(t).cwiseProduct(g.transpose()) - h.row(t) * (ir * ir * ir * dot / d);
    }
  }

  void forward(std::span<const double> theta, std::span<const int> tokens, Trace& tr) const {
    const int T = static_cast<int>(tokens.size());
    const int D = config_.hidden_dim, F = config_.mlp_dim, V = config_.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    const auto E = mat(theta, embed_, V, D);

    RowMat h(T, D);
    for (int t = 0; t < T; ++t) h.row(t) = E.row(tokens[t]);

    tr.layers.resize(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& o = layers_[l];
      auto& c = tr.layers[l];
      c.h_in = h;
      rms_forward(h, vec(theta, o.ln_in, D), c.a, c.inv_r1);
      c.q = c.a * mat(theta, o.q, D, D).transpose();
      c.k = c.a * mat(theta, o.k, D, D).transpose();
      c.v = c.a * mat(theta, o.v, D, D).transpose();
      c.p = RowMat::Zero(T, T);
      for (int t = 0; t < T; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int u = 0; u <= t; ++u) {
          c.p(t, u) = c.q.row(t).dot(c.k.row(u)) * scale;
          mx = std::max(mx, c.p(t, u));
        }
        double z = 0.0;
        for (int u = 0; u <= t; ++u) {
          c.p(t, u) = std::exp(c.p(t, u) - mx);
          z += c.p(t, u);
        }
        for (int u = 0; u <= t; ++u) c.p(t, u) /= z;
      }
      c.c = c.p * c.v;
      h += c.c * mat(theta, o.o, D, D).transpose();
      c.h_mid = h;
      rms_forward(h, vec(theta, o.ln_post, D), c.b, c.inv_r2);
      c.g = c.b * mat(theta, o.gate, F, D).transpose();
      c.u = c.b * mat(theta, o.up, F, D).transpose();
      c.sig = (1.0 + (-c.g.array()).exp()).inverse().matrix();
      c.m = (c.g.array() * c.sig.array() * c.u.array()).matrix();
      h += c.m * mat(theta, o.down, D, F).transpose();
    }
    tr.h_out = h;
    rms_forward(h, vec(theta, final_norm_, D), tr.n, tr.inv_rf);
    RowMat logits = tr.n * mat(theta, lm_head_, V, D).transpose();
    tr.logp.resize(T, V);
    for (int t = 0; t < T; ++t) {
      const double mx = logits.row(t).maxCoeff();
      const double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
      tr.logp.row(t) = logits.row(t).array() - lse;
    }
  }

  void backward(std::span<const double> theta, std::span<const int> tokens, const Trace& tr,
                const RowMat& dlogits, std::span<double> grad, double gs) const {
    const int T = static_cast<int>(tokens.size());
    const int D = config_.hidden_dim, F = config_.mlp_dim, V = config_.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    auto acc = [&](std::size_t off, const RowMat& dw) {
      Eigen::Map<RowMat>(grad.data() + off, dw.rows(), dw.cols()) += gs * dw;
    };
    auto acc_vec = [&](std::size_t off, const Vec& dv) {
      Eigen::Map<Vec>(grad.data() + off, dv.size()) += gs * dv;
    };

    const auto Wlm = mat(theta, lm_head_, V, D);
    acc(lm_head_, dlogits.transpose() * tr.n);
    RowMat dn = dlogits * Wlm;
    RowMat dh = RowMat::Zero(T, D);
    Vec dg;
    rms_backward(tr.h_out, vec(theta, final_norm_, D), tr.inv_rf, dn, dh, dg);
    acc_vec(final_norm_, dg);

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& o = layers_[li];
      const auto& c = tr.layers[li];
      // MLP: h_out = h_mid + m Wd^T
      const auto Wd = mat(theta, o.down, D, F);
      acc(o.down, dh.transpose() * c.m);
      const RowMat dm = dh * Wd;
      const RowMat dgate =
          (dm.array() * c.u.array() * c.sig.array() *
           (1.0 + c.g.array() * (1.0 - c.sig.array())))
              .matrix();
      const RowMat dup = (dm.array() * c.g.array() * c.sig.array()).matrix();
      acc(o.gate, dgate.transpose() * c.b);
      acc(o.up, dup.transpose() * c.b);
      const RowMat db = dgate * mat(theta, o.gate, F, D) + dup * mat(theta, o.up, F, D);
      rms_backward(c.h_mid, vec(theta, o.ln_post, D), c.inv_r2, db, dh, dg);
      acc_vec(o.ln_post, dg);

      // attention: h_mid = h_in + c Wo^T
      acc(o.o, dh.transpose() * c.c);
      const RowMat dc = dh * mat(theta, o.o, D, D);
      const RowMat dp = dc * c.v.transpose();
      const RowMat dv = c.p.transpose() * dc;
      RowMat ds = RowMat::Zero(T, T);
      for (int t = 0; t < T; ++t) {
        double row = 0.0;
        for (int u = 0; u <= t; ++u) row += dp(t, u) * c.p(t, u);
        for (int u = 0; u <= t; ++u) ds(t, u) = c.p(t, u) * (dp(t, u) - row) * scale;
      }
      const RowMat dq = ds * c.k;
      const RowMat dk = ds.transpose() * c.q;
      acc(o.q, dq.transpose() * c.a);
      acc(o.k, dk.transpose() * c.a);
      acc(o.v, dv.transpose() * c.a);
      const RowMat da = dq * mat(theta, o.q, D, D) + dk * mat(theta, o.k, D, D) +
                        dv * mat(theta, o.v, D, D);
      rms_backward(c.h_in, vec(theta, o.ln_in, D), c.inv_r1, da, dh, dg);
      acc_vec(o.ln_in, dg);
    }
    for (int t = 0; t < T; ++t) {
      Eigen::Map<Vec>(grad.data() + embed_ + static_cast<std::size_t>(tokens[t]) * D, D) +=
          gs * dh.row(t).transpose();
    }
  }

  MicroModelConfig config_;
  ParamLayout layout_;
  std::size_t embed_ = 0, final_norm_ = 0, lm_head_ = 0;
  std::vector<LayerOffsets> layers_;
};

// ---- archive-level operations ----

inline double forward_nll(const MicroModel& model, std::span<const int> tokens) {
  MicroNet net(model.config);
  const auto theta = net.layout().flatten(model.parameters);
  return net.evaluate(theta, tokens);
}

// Exact gradient of the mean NLL, shaped like the parameter archive.
inline TensorArchive backward_nll(const MicroModel& model, std::span<const int> tokens) {
  MicroNet net(model.config);
  const auto theta = net.layout().flatten(model.parameters);
  std::vector<double> grad(theta.size(), 0.0);
  net.evaluate(theta, tokens, grad);
  return net.layout().unflatten(grad);
}

// Scalar summary f(theta): mean log-probability over the probe sequences,
// i.e. the negated average of the per-probe mean NLL.
class ProbeObjective {
 public:
  ProbeObjective(const MicroNet& net, std::vector<TokenSeq> probes)
      : net_(&net), probes_(std::move(probes)) {
    if (probes_.empty()) throw ValidationError("scalar output needs at least one probe");
    for (const auto& p : probes_) net.check_tokens(p);
  }

  std::size_t dimension() const { return net_->parameter_count(); }

  double value(std::span<const double> theta) const {
    double s = 0.0;
    for (const auto& p : probes_) s += net_->evaluate(theta, p);
    return -s / static_cast<double>(probes_.size());
  }

  void gradient(std::span<const double> theta, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    const double w = -1.0 / static_cast<double>(probes_.size());
    for (const auto& p : probes_) net_->evaluate(theta, p, out, w);
  }

  const std::vector<TokenSeq>& probes() const { return probes_; }

 private:
  const MicroNet* net_;
  std::vector<TokenSeq> probes_;
};

inline double scalar_output(const MicroModel& model, const std::vector<TokenSeq>& probes) {
  MicroNet net(model.config);
  ProbeObjective f(net, probes);
  return f.value(net.layout().flatten(model.parameters));
}

// ---- token sources ----

inline std::vector<TokenSeq> uniform_token_sequences(int vocab_size, int count, int length,
                                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, vocab_size - 1);
  std::vector<TokenSeq> out(static_cast<std::size_t>(count), TokenSeq(length));
  for (auto& s : out) {
    for (auto& tok : s) tok = dist(rng);
  }
  return out;
}

// Sequences from a random sparse first-order Markov chain: each token has
// `branching` successors with Dirichlet-like random weights.
inline std::vector<TokenSeq> markov_corpus(int vocab_size, int count, int length,
                                           std::uint64_t seed, int branching = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, vocab_size - 1);
  std::exponential_distribution<double> weight(1.0);
  std::vector<std::discrete_distribution<int>> next(static_cast<std::size_t>(vocab_size));
  std::vector<std::vector<int>> succ(static_cast<std::size_t>(vocab_size));
  for (int v = 0; v < vocab_size; ++v) {
    std::vector<double> w;
    for (int b = 0; b < branching; ++b) {
      succ[v].push_back(pick(rng));
      w.push_back(weight(rng));
    }
    next[v] = std::discrete_distribution<int>(w.begin(), w.end());
  }
  std::vector<TokenSeq> out(static_cast<std::size_t>(count), TokenSeq(length));
  for (auto& s : out) {
    s[0] = pick(rng);
    for (int t = 1; t < length; ++t) s[t] = succ[s[t - 1]][next[s[t - 1]](rng)];
  }
  return out;
}

// ---- training ----

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

struct TrainResult {
  MicroModel model;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  int steps_run = 0;
};

inline double corpus_loss_and_grad(const MicroNet& net, std::span<const double> theta,
                                   const std::vector<TokenSeq>& corpus, std::span<double> grad) {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  const double w = 1.0 / static_cast<double>(corpus.size());
  double loss = 0.0;
  for (const auto& s : corpus) loss += w * net.evaluate(theta, s, grad, w);
  return loss;
}

// Full-batch gradient descent on the corpus mean NLL, fixed learning rate.
// Stops early once the gradient norm drops below grad_tol (if > 0).
inline TrainResult train_to_convergence(const MicroModel& model,
                                        const std::vector<TokenSeq>& corpus, int steps,
                                        double lr, double grad_tol = 0.0) {
  if (corpus.empty()) throw ValidationError("training corpus is empty");
  model.validate();
  MicroNet net(model.config);
  auto theta = net.layout().flatten(model.parameters);
  std::vector<double> grad(theta.size());

  TrainResult res{model};
  double loss = corpus_loss_and_grad(net, theta, corpus, grad);
  res.initial_loss = loss;
  auto norm = [&] {
    double s = 0.0;
    for (double g : grad) s += g * g;
    return std::sqrt(s);
  };
  int step = 0;
  for (; step < steps; ++step) {
    if (grad_tol > 0.0 && norm() < grad_tol) break;
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
    loss = corpus_loss_and_grad(net, theta, corpus, grad);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged(step, "training diverged at step " + std::to_string(step) +
                                       " (loss is not finite)");
    }
  }
  res.model.parameters = net.layout().unflatten(theta);
  // Report at the stored (f32-rounded) parameters.
  const auto stored = net.layout().flatten(res.model.parameters);
  res.final_loss = corpus_loss_and_grad(net, stored, corpus, grad);
  res.final_grad_norm = norm();
  res.steps_run = step;
  return res;
}

}  // namespace fimmerge
