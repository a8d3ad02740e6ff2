#pragma once

// Command-line front end. Kept in a header so the acceptance suite can drive
// it in-process; tools/fimmerge.cpp only forwards argv.
//
// Exit codes: 0 success, 1 validation or assertion failure, 2 I/O or format
// error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "fimmerge/fimmerge.hpp"

namespace fimmerge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kValidation = 1, kIo = 2 };

class AssertionFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  std::uint64_t seed = 42;
  std::string report_dir = ".";
  std::string log_level = "info";
};

inline std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::stderr_color_mt("fimmerge");
    l->set_pattern("[%l] %v");
    return l;
  }();
  return log;
}

// Records effective parameters and file digests of one run.
class Manifest {
 public:
  Manifest(std::string subcommand, std::vector<std::string> argv)
      : subcommand_(std::move(subcommand)), argv_(std::move(argv)) {}

  json& parameters() { return params_; }
  json& results() { return results_; }

  void input(const fs::path& p) { inputs_[p.string()] = digest_hex(read_file(p)); }
  void output(const fs::path& p) { outputs_[p.string()] = digest_hex(read_file(p)); }

  void write(const GlobalOptions& g) const {
    fs::create_directories(g.report_dir);
    json j = {{"tool", "fimmerge"},
              {"version", FIMMERGE_VERSION},
              {"subcommand", subcommand_},
              {"argv", argv_},
              {"global", {{"seed", g.seed}, {"report_dir", g.report_dir}, {"log_level", g.log_level}}},
              {"parameters", params_},
              {"inputs", inputs_},
              {"outputs", outputs_},
              {"results", results_}};
    write_file_atomic(fs::path(g.report_dir) / (subcommand_ + ".manifest.json"), j.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  std::vector<std::string> argv_;
  json params_ = json::object();
  json results_ = json::object();
  json inputs_ = json::object();
  json outputs_ = json::object();
};

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2) + "\n");
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + " is not valid JSON: " + e.what());
  }
}

inline fs::path default_arch_config(const fs::path& model) {
  auto p = model;
  p.replace_extension(".arch.json");
  return p;
}

inline MicroModel load_micro(const fs::path& model_path, const std::string& arch_path,
                             Manifest& man) {
  const fs::path arch = arch_path.empty() ? default_arch_config(model_path) : fs::path(arch_path);
  MicroModel m;
  try {
    m.config = read_json(arch).get<MicroModelConfig>();
  } catch (const json::exception& e) {
    throw FormatError("bad micro model config " + arch.string() + ": " + e.what());
  }
  std::vector<std::string> notes;
  m.parameters = load_archive(model_path, &notes);
  for (const auto& n : notes) logger()->warn("{}", n);
  m.validate();
  man.input(model_path);
  man.input(arch);
  return m;
}

inline NamingScheme load_naming(const std::string& path, Manifest& man) {
  if (path.empty()) return {};
  man.input(path);
  return NamingScheme::from_json(read_json(path));
}

inline double parse_eps(const std::string& s) {
  if (s == "inf" || s == "infinity" || s == "none") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("bad norm threshold '" + s + "'");
  }
}

// ---------------------------------------------------------------- make-pair

struct MakePairArgs {
  std::string out_dir = ".";
  std::string arch_config;
  int base_steps = 300;
  int tune_steps = 150;
  double lr = 0.5;
};

inline void cmd_make_pair(const MakePairArgs& a, const GlobalOptions& g, Manifest& man) {
  theory::MicroPairOptions o;
  if (!a.arch_config.empty()) {
    o.config = read_json(a.arch_config).get<MicroModelConfig>();
    man.input(a.arch_config);
  }
  o.base_steps = a.base_steps;
  o.tune_steps = a.tune_steps;
  o.lr = a.lr;
  o.seed = g.seed;
  const auto pair = theory::train_micro_pair(o);
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  for (const auto& [name, model] : {std::pair{"base", &pair.base}, std::pair{"tuned", &pair.tuned}}) {
    const auto archive = dir / (std::string(name) + ".safetensors");
    write_archive(model->parameters, archive);
    write_json(default_arch_config(archive), json(model->config));
    man.output(archive);
    man.output(default_arch_config(archive));
  }
  json corpus = {{"base_corpus", pair.base_corpus}, {"tune_corpus", pair.tune_corpus}};
  write_json(dir / "corpora.json", corpus);
  man.output(dir / "corpora.json");
  man.parameters() = {{"out_dir", a.out_dir},
                      {"config", json(pair.base.config)},
                      {"base_steps", a.base_steps},
                      {"tune_steps", a.tune_steps},
                      {"lr", a.lr},
                      {"corpus_size", o.corpus_size},
                      {"corpus_len", o.corpus_len}};
  man.results() = {{"base_final_loss", pair.base_training.final_loss},
                   {"base_grad_norm", pair.base_training.final_grad_norm},
                   {"tuned_final_loss", pair.tune_training.final_loss},
                   {"tuned_grad_norm", pair.tune_training.final_grad_norm}};
  logger()->info("base loss {:.4f} (|g| {:.3g}), tuned loss {:.4f} (|g| {:.3g})",
                 pair.base_training.final_loss, pair.base_training.final_grad_norm,
                 pair.tune_training.final_loss, pair.tune_training.final_grad_norm);
}

// ---------------------------------------------------------------------- fim

struct FimArgs {
  std::string model;
  std::string arch_config;
  int n = 8;
  int seq_len = 64;
  std::string out = "fim.json";
  std::string naming;
  std::string reduction = "mean";
};

inline void cmd_fim(const FimArgs& a, const GlobalOptions& g, Manifest& man) {
  const auto model = load_micro(a.model, a.arch_config, man);
  const auto scheme = load_naming(a.naming, man);
  auto scores = estimate_fim(model, {a.n, a.seq_len, g.seed}, scheme);
  scores = reduce_per_layer(std::move(scores), parse_topology(model.parameters, scheme),
                            parse_reduction(a.reduction));
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  export_fim(scores, out);
  man.output(out);
  man.output(out.parent_path() / (out.stem().string() + ".elementwise.safetensors"));
  man.parameters() = {{"model", a.model},   {"n", a.n},     {"seq_len", a.seq_len},
                      {"seed", g.seed},     {"out", a.out}, {"reduction", a.reduction}};
  json per_layer = json::object();
  for (const auto& [l, v] : scores.per_layer) per_layer[std::to_string(l)] = v;
  man.results() = {{"per_layer", per_layer}};
  for (const auto& [l, v] : scores.per_layer) logger()->info("layer {}: F = {:.6g}", l, v);
}

// -------------------------------------------------------------------- merge

struct MergeArgs {
  std::string base, tuned, fim, out = "merged.safetensors", report = "merge_report.json";
  std::string plan_file, naming, alphas_file;
  std::string method = "ties";
  double trim_ratio = 0.2;
  double gate_factor = 0.7;
  std::string norm_eps = "0.05";
  std::string signal = "fim_x_delta";
  std::optional<double> alpha_theta;
  std::string trim_mode = "per_tensor";
  std::uint64_t probe_seed = 42;
  int probe_count = 8;
  // which options were given on the command line (they override the plan file)
  std::set<std::string> explicit_flags;
};

inline void cmd_merge(MergeArgs a, const GlobalOptions&, Manifest& man) {
  auto given = [&](const char* f) { return a.explicit_flags.count(f) > 0; };
  std::optional<AlphaAssignment> fixed_alphas;
  if (!a.plan_file.empty()) {
    man.input(a.plan_file);
    const auto p = read_json(a.plan_file);
    try {
      if (!given("method") && p.contains("method")) a.method = p["method"].get<std::string>();
      if (!given("trim-ratio") && p.contains("trim_ratio")) a.trim_ratio = p["trim_ratio"].get<double>();
      if (!given("gate-factor") && p.contains("gate_factor")) a.gate_factor = p["gate_factor"].get<double>();
      if (!given("norm-eps") && p.contains("norm_threshold")) {
        const auto& v = p["norm_threshold"];
        a.norm_eps = v.is_null() ? "inf" : v.is_string() ? v.get<std::string>() : std::to_string(v.get<double>());
        if (v.is_number()) a.norm_eps = json(v.get<double>()).dump();
      }
      if (!given("signal") && p.contains("signal")) a.signal = p["signal"].get<std::string>();
      if (!given("alpha-theta") && p.contains("alpha_theta") && !p["alpha_theta"].is_null()) {
        a.alpha_theta = p["alpha_theta"].get<double>();
      }
      if (!given("trim-mode") && p.contains("trim_mode")) a.trim_mode = p["trim_mode"].get<std::string>();
      if (!given("probe-seed") && p.contains("probe_seed")) a.probe_seed = p["probe_seed"].get<std::uint64_t>();
      if (!given("probe-count") && p.contains("probe_count")) a.probe_count = p["probe_count"].get<int>();
      if (!given("alphas") && p.contains("alphas")) fixed_alphas = alphas_from_json(p["alphas"]);
    } catch (const json::exception& e) {
      throw FormatError("bad plan file " + a.plan_file + ": " + e.what());
    }
  }
  if (!a.alphas_file.empty()) {
    man.input(a.alphas_file);
    fixed_alphas = alphas_from_json(read_json(a.alphas_file));
  }

  std::vector<std::string> notes;
  const auto base = load_archive(a.base, &notes);
  const auto tuned = load_archive(a.tuned, &notes);
  for (const auto& n : notes) logger()->warn("{}", n);
  man.input(a.base);
  man.input(a.tuned);
  const auto scheme = load_naming(a.naming, man);
  const auto fim = import_fim(a.fim, scheme);
  man.input(a.fim);
  const auto topo = parse_topology(base, scheme);
  for (const auto& w : topo.warnings) logger()->warn("{}", w);

  MergePlan plan;
  plan.method = parse_method(a.method);
  plan.trim_ratio = a.trim_ratio;
  plan.gate_factor = a.gate_factor;
  plan.norm_threshold = parse_eps(a.norm_eps);
  plan.probe_seed = a.probe_seed;
  plan.probe_count = a.probe_count;
  plan.trim_mode = parse_trim_mode(a.trim_mode);
  plan.validate();

  const auto kind = parse_signal(a.signal);
  json signal_json = nullptr;
  if (fixed_alphas) {
    plan.alphas = *fixed_alphas;
  } else {
    const auto sig = build_signal(kind, fim.per_layer, task_vector(base, tuned), topo);
    plan.alphas = assign_alphas(sig, a.alpha_theta);
    signal_json = json::object();
    for (const auto& [l, v] : sig.per_layer_raw) signal_json[std::to_string(l)] = v;
  }

  auto result = merge(base, tuned, plan, fim, topo);
  const fs::path out(a.out), report(a.report);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_archive(result.merged, out);
  auto rj = result.report.to_json();
  rj["signal"] = {{"kind", to_string(kind)}, {"per_layer_raw", signal_json}};
  write_json(report, rj);
  man.output(out);
  man.output(report);
  man.parameters() = {{"base", a.base},
                      {"tuned", a.tuned},
                      {"fim", a.fim},
                      {"plan", plan.to_json()},
                      {"signal", to_string(kind)},
                      {"alpha_theta", a.alpha_theta ? json(*a.alpha_theta) : json(nullptr)},
                      {"out", a.out},
                      {"report", a.report}};
  man.results() = {{"plan_hash", plan.hash()}, {"merged_digest", result.report.merged_digest}};
  for (const auto& [l, alpha] : plan.alphas.per_layer) logger()->info("layer {}: alpha = {:.6f}", l, alpha);
  logger()->info("fallback alpha {:.6f}; merged archive written to {}", plan.alphas.fallback_alpha, a.out);
}

// ------------------------------------------------------------------- verify

struct VerifyArgs {
  std::string mode = "bound";
  int trials = 20;
  std::optional<double> delta_scale;
  std::string report = "verify_report.json";
};

inline void cmd_verify(const VerifyArgs& a, const GlobalOptions& g, Manifest& man) {
  json rep = {{"mode", a.mode}, {"seed", g.seed}};
  std::vector<std::string> failures;
  const fs::path report(a.report);
  auto csv_path = report;
  csv_path.replace_extension(".csv");

  if (a.mode == "bound") {
    const double scale = a.delta_scale.value_or(0.1);
    const auto results = theory::verify_bound(a.trials, scale, g.seed);
    json list = json::array();
    std::ostringstream csv;
    csv << "trial,seed,delta_norm_sq,sup_hessian_norm,cubic_slack,max_error_over_bound,passed\n";
    int passed = 0;
    for (const auto& r : results) {
      list.push_back(theory::to_json(r));
      double worst = 0.0;
      for (std::size_t i = 0; i < r.bound.size(); ++i) {
        if (r.bound[i] > 0.0) worst = std::max(worst, r.measured_error[i] / r.bound[i]);
      }
      csv << r.trial << "," << r.seed << "," << json(r.delta_norm_sq).dump() << ","
          << json(r.sup_hessian_norm).dump() << "," << json(r.cubic_slack_estimate).dump() << ","
          << json(worst).dump() << "," << (r.passed ? 1 : 0) << "\n";
      passed += r.passed;
      if (!r.passed) failures.push_back("bound violated in trial " + std::to_string(r.trial));
    }
    rep["trials"] = a.trials;
    rep["delta_scale"] = scale;
    rep["results"] = list;
    rep["passed"] = passed;
    write_file_atomic(csv_path, csv.str());
    logger()->info("bound held in {}/{} trials", passed, a.trials);
  } else if (a.mode == "quadratic") {
    const double scale = a.delta_scale.value_or(0.01);
    // analytic fixture: H = diag(1..8) + coupling, delta random
    const int n = 8;
    theory::QuadraticObjective q{Eigen::MatrixXd::Identity(n, n), Eigen::VectorXd::LinSpaced(n, -1, 1), 0.3};
    for (int i = 0; i < n; ++i) q.a(i, i) = 1.0 + i;
    std::vector<double> x0(n, 0.25), d(n);
    for (int i = 0; i < n; ++i) d[i] = std::sin(1.0 + i);
    const double dq = theory::quadratic_coefficient_check(q, x0, d);
    // micro model, random direction over all coordinates scaled to `scale`
    MicroModelConfig cfg;
    cfg.seed = g.seed;
    const auto model = MicroModel::init(cfg);
    MicroNet net(cfg);
    ProbeObjective f(net, uniform_token_sequences(cfg.vocab_size, 4, 32, g.seed + 1));
    const auto theta = net.layout().flatten(model.parameters);
    std::mt19937_64 rng(g.seed + 2);
    std::normal_distribution<double> normal;
    std::vector<double> dm(theta.size());
    for (auto& v : dm) v = normal(rng);
    const double nrm = std::sqrt(theory::squared_norm(dm));
    for (auto& v : dm) v *= scale / nrm;
    const double dmicro = theory::quadratic_coefficient_check(f, theta, dm);
    rep["quadratic_fixture_deviation"] = dq;
    rep["micro_model_deviation"] = dmicro;
    rep["delta_scale"] = scale;
    if (!(dq < 1e-9)) failures.push_back("quadratic fixture profile deviation " + std::to_string(dq));
    if (!(dmicro < 0.05)) failures.push_back("micro model profile deviation " + std::to_string(dmicro));
    std::ostringstream csv;
    csv << "case,deviation\nquadratic_fixture," << json(dq).dump() << "\nmicro_model,"
        << json(dmicro).dump() << "\n";
    write_file_atomic(csv_path, csv.str());
    logger()->info("alpha(1-alpha) profile deviation: fixture {:.3g}, micro {:.3g}", dq, dmicro);
  } else if (a.mode == "fisher") {
    const auto toy = theory::make_softmax_toy(3, 4, 60, g.seed);
    const auto tr = theory::toy_fisher_hessian(toy);
    rep["softmax_toy_max_gap"] = tr.max_gap;
    if (!(tr.max_gap < 1e-3)) failures.push_back("softmax toy gap " + std::to_string(tr.max_gap));

    theory::MicroPairOptions o;
    o.seed = g.seed;
    const auto pair = theory::train_micro_pair(o);
    MicroNet net(o.config);
    const auto coords = theory::sample_layer_coordinates(net, 64, g.seed);
    const auto trained = theory::fisher_hessian_check(
        net, net.layout().flatten(pair.base.parameters), pair.base_corpus, coords);
    auto init_cfg = o.config;
    init_cfg.seed = g.seed;
    const auto control = theory::fisher_hessian_check(
        net, net.layout().flatten(MicroModel::init(init_cfg).parameters), pair.base_corpus, coords);
    rep["trained"] = theory::to_json(trained);
    rep["untrained_control"] = theory::to_json(control);
    if (!(trained.rank_correlation >= 0.8)) {
      failures.push_back("trained per-layer rank correlation " + std::to_string(trained.rank_correlation));
    }
    std::ostringstream csv;
    csv << "model,layer,fisher_mean,hessian_mean\n";
    for (const auto& [label, res] : {std::pair{"trained", &trained}, std::pair{"untrained", &control}}) {
      for (const auto& l : res->layers) {
        csv << label << "," << l.layer << "," << json(l.fisher_mean).dump() << ","
            << json(l.hessian_mean).dump() << "\n";
      }
    }
    write_file_atomic(csv_path, csv.str());
    logger()->info("softmax toy gap {:.3g}; trained rank corr {:.3f}; untrained {:.3f}", tr.max_gap,
                   trained.rank_correlation, control.rank_correlation);
  } else {
    throw ValidationError("unknown verify mode '" + a.mode + "'");
  }
  rep["failures"] = failures;
  write_json(report, rep);
  man.output(report);
  man.output(csv_path);
  man.parameters() = {{"mode", a.mode}, {"trials", a.trials},
                      {"delta_scale", a.delta_scale ? json(*a.delta_scale) : json(nullptr)},
                      {"report", a.report}};
  man.results() = {{"failures", failures}};
  if (!failures.empty()) {
    std::string msg;
    for (const auto& f : failures) msg += f + "; ";
    throw AssertionFailed(msg);
  }
}

// --------------------------------------------------------------- analyze-nl

struct AnalyzeNlArgs {
  std::string base, tuned, arch_config;
  double alpha = 0.5;
  int probes = 8;
  std::string out = "nl.csv";
  std::string eval_corpus;
};

inline void cmd_analyze_nl(const AnalyzeNlArgs& a, const GlobalOptions& g, Manifest& man) {
  const auto base = load_micro(a.base, a.arch_config, man);
  const auto tuned = load_micro(a.tuned, a.arch_config.empty() ? "" : a.arch_config, man);
  std::vector<TokenSeq> evals;
  if (!a.eval_corpus.empty()) {
    man.input(a.eval_corpus);
    const auto j = read_json(a.eval_corpus);
    try {
      evals = (j.is_object() ? j.at("tune_corpus") : j).get<std::vector<TokenSeq>>();
    } catch (const json::exception& e) {
      throw FormatError("bad evaluation corpus " + a.eval_corpus + ": " + e.what());
    }
  } else {
    evals = uniform_token_sequences(base.config.vocab_size, a.probes, base.config.seq_len, g.seed + 1);
  }
  const auto res = theory::nl_analysis(base, tuned, a.alpha, a.probes, g.seed, evals);
  std::ostringstream csv;
  csv << "layer,nl_score,relative_error\n";
  auto num = [](const std::optional<double>& v) { return v ? json(*v).dump() : std::string("undefined"); };
  for (const auto& r : res.records) {
    csv << r.layer_index << "," << num(r.nl_score) << "," << num(r.relative_merge_error) << "\n";
  }
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_atomic(out, csv.str());
  man.output(out);
  man.parameters() = {{"base", a.base}, {"tuned", a.tuned}, {"alpha", a.alpha},
                      {"probes", a.probes}, {"seed", g.seed}, {"out", a.out},
                      {"eval_corpus", a.eval_corpus.empty() ? json("uniform_random") : json(a.eval_corpus)},
                      {"output_function", "per-position token log-probabilities"},
                      {"relative_error_definition",
                       "||stacked interpolation error|| / ||stacked output change|| over evaluation sequences"}};
  man.results() = {{"pearson_r", res.pearson_r ? json(*res.pearson_r) : json(nullptr)}};
  logger()->info("Pearson r(NL, relative error) = {}", num(res.pearson_r));
}

// ---------------------------------------------------------------------- run

int run(const std::vector<std::string>& argv);

inline int run_replay(const std::string& manifest_path) {
  const auto j = read_json(manifest_path);
  if (!j.contains("argv")) throw FormatError("manifest has no argv");
  return run(j.at("argv").get<std::vector<std::string>>());
}

inline int run(const std::vector<std::string>& argv) {
  CLI::App app{"fimmerge: Fisher-guided layer-adaptive model merging", "fimmerge"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--report-dir", g.report_dir, "directory for the run manifest")->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  MakePairArgs pair_args;
  auto* pair = app.add_subcommand("make-pair", "train a micro base/tuned checkpoint pair");
  pair->add_option("--out-dir", pair_args.out_dir)->capture_default_str();
  pair->add_option("--arch-config", pair_args.arch_config, "micro model config JSON");
  pair->add_option("--steps", pair_args.base_steps, "base training steps")->capture_default_str();
  pair->add_option("--tune-steps", pair_args.tune_steps)->capture_default_str();
  pair->add_option("--lr", pair_args.lr)->capture_default_str();

  FimArgs fim_args;
  auto* fim = app.add_subcommand("fim", "estimate data-free diagonal FIM of a micro checkpoint");
  fim->add_option("--model", fim_args.model)->required();
  fim->add_option("--arch-config", fim_args.arch_config, "defaults to <model>.arch.json");
  fim->add_option("--n", fim_args.n, "random sequences")->capture_default_str();
  fim->add_option("--seq-len", fim_args.seq_len)->capture_default_str();
  fim->add_option("--out", fim_args.out)->capture_default_str();
  fim->add_option("--naming", fim_args.naming, "naming scheme JSON");
  fim->add_option("--reduction", fim_args.reduction, "mean|sum")->capture_default_str();

  MergeArgs merge_args;
  auto* mrg = app.add_subcommand("merge", "merge base and tuned checkpoints");
  mrg->add_option("--base", merge_args.base)->required();
  mrg->add_option("--tuned", merge_args.tuned)->required();
  mrg->add_option("--fim", merge_args.fim)->required();
  mrg->add_option("--method", merge_args.method, "ta|ties")->capture_default_str();
  mrg->add_option("--trim-ratio", merge_args.trim_ratio)->capture_default_str();
  mrg->add_option("--gate-factor", merge_args.gate_factor)->capture_default_str();
  mrg->add_option("--norm-eps", merge_args.norm_eps, "number or 'inf'")->capture_default_str();
  mrg->add_option("--signal", merge_args.signal, "fim_x_delta|fim_only|delta_norm")->capture_default_str();
  mrg->add_option("--alpha-theta", merge_args.alpha_theta, "fixed sigmoid sharpness");
  mrg->add_option("--trim-mode", merge_args.trim_mode, "per_tensor|pooled")->capture_default_str();
  mrg->add_option("--probe-seed", merge_args.probe_seed)->capture_default_str();
  mrg->add_option("--probe-count", merge_args.probe_count)->capture_default_str();
  mrg->add_option("--plan", merge_args.plan_file, "JSON plan file");
  mrg->add_option("--alphas", merge_args.alphas_file, "fixed alpha assignment JSON");
  mrg->add_option("--naming", merge_args.naming, "naming scheme JSON");
  mrg->add_option("--out", merge_args.out)->capture_default_str();
  mrg->add_option("--report", merge_args.report)->capture_default_str();

  VerifyArgs verify_args;
  auto* ver = app.add_subcommand("verify", "numerical verification of the theory");
  ver->add_option("--mode", verify_args.mode, "bound|fisher|quadratic")->capture_default_str();
  ver->add_option("--trials", verify_args.trials)->capture_default_str();
  ver->add_option("--delta-scale", verify_args.delta_scale);
  ver->add_option("--report", verify_args.report)->capture_default_str();

  AnalyzeNlArgs nl_args;
  auto* nl = app.add_subcommand("analyze-nl", "per-layer nonlinearity scores");
  nl->add_option("--base", nl_args.base)->required();
  nl->add_option("--tuned", nl_args.tuned)->required();
  nl->add_option("--arch-config", nl_args.arch_config);
  nl->add_option("--alpha", nl_args.alpha)->capture_default_str();
  nl->add_option("--probes", nl_args.probes)->capture_default_str();
  nl->add_option("--eval-corpus", nl_args.eval_corpus, "JSON token sequences");
  nl->add_option("--out", nl_args.out)->capture_default_str();

  std::string manifest_path;
  auto* replay = app.add_subcommand("replay", "rerun a command from its manifest");
  replay->add_option("--manifest", manifest_path)->required();

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }

  logger()->set_level(spdlog::level::from_str(g.log_level));
  auto* sub = app.get_subcommands().front();
  Manifest man(sub->get_name(), argv);
  try {
    if (sub == replay) return run_replay(manifest_path);
    if (sub == pair) cmd_make_pair(pair_args, g, man);
    if (sub == fim) cmd_fim(fim_args, g, man);
    if (sub == mrg) {
      for (const char* f : {"method", "trim-ratio", "gate-factor", "norm-eps", "signal", "alpha-theta",
                            "trim-mode", "probe-seed", "probe-count", "alphas"}) {
        if (mrg->get_option(std::string("--") + f)->count() > 0) merge_args.explicit_flags.insert(f);
      }
      cmd_merge(merge_args, g, man);
    }
    if (sub == ver) cmd_verify(verify_args, g, man);
    if (sub == nl) cmd_analyze_nl(nl_args, g, man);
    man.write(g);
  } catch (const AssertionFailed& e) {
    man.write(g);
    logger()->error("assertion failed: {}", e.what());
    return kValidation;
  } catch (const ValidationError& e) {
    logger()->error("{}", e.what());
    return kValidation;
  } catch (const TrainingDiverged& e) {
    logger()->error("{}", e.what());
    return kValidation;
  } catch (const FormatError& e) {
    logger()->error("format error: {}", e.what());
    return kIo;
  } catch (const IoError& e) {
    logger()->error("I/O error: {}", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    logger()->error("I/O error: {}", e.what());
    return kIo;
  } catch (const nlohmann::json::exception& e) {
    logger()->error("format error: {}", e.what());
    return kIo;
  }
  return kOk;
}

}  // namespace fimmerge::cli
