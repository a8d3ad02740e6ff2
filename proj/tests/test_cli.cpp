#include <fstream>

#include "fimmerge_cli.hpp"
#include "test_support.hpp"

using namespace fimmerge;
using fimmerge::test_support::TempDir;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), {"--log-level", "off"});
  return cli::run(args);
}

// Shared trained pair, built once for the whole suite.
class CliPair : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    const auto d = dir_->path().string();
    MicroModelConfig c = test_support::small_config();
    c.seq_len = 16;
    nlohmann::json arch = c;
    std::ofstream(dir_->path() / "arch.json") << arch.dump();
    ASSERT_EQ(run({"--report-dir", d, "make-pair", "--out-dir", d + "/m", "--arch-config",
                   d + "/arch.json", "--steps", "80", "--tune-steps", "40"}),
              0);
    ASSERT_EQ(run({"--report-dir", d, "fim", "--model", d + "/m/base.safetensors", "--out", d + "/fim.json",
                   "--seq-len", "16"}),
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string p(const std::string& rel) { return (dir_->path() / rel).string(); }
  static std::vector<std::string> merge_args(const std::string& out) {
    return {"merge", "--base", p("m/base.safetensors"), "--tuned", p("m/tuned.safetensors"), "--fim",
            p("fim.json"), "--out", p(out + ".safetensors"), "--report", p(out + ".json"),
            "--report-dir", p("reports")};
  }
  static nlohmann::json json_at(const std::string& rel) { return nlohmann::json::parse(read_file(p(rel))); }

  static TempDir* dir_;
};

TempDir* CliPair::dir_ = nullptr;

}  // namespace

TEST_F(CliPair, MakePairWritesArtifacts) {
  for (const char* f : {"m/base.safetensors", "m/tuned.safetensors", "m/base.arch.json", "m/corpora.json",
                        "make-pair.manifest.json", "fim.json", "fim.elementwise.safetensors"}) {
    EXPECT_TRUE(std::filesystem::exists(p(f))) << f;
  }
  const auto man = json_at("fim.manifest.json");
  EXPECT_EQ(man["subcommand"], "fim");
  EXPECT_EQ(man["parameters"]["n"], 8);
  EXPECT_FALSE(man.contains("timestamp"));
}

TEST_F(CliPair, TaMergeHasNoTrimStats) {
  auto args = merge_args("ta");
  args.insert(args.end(), {"--method", "ta"});
  ASSERT_EQ(run(args), 0);
  EXPECT_TRUE(std::filesystem::exists(p("ta.safetensors")));
  const auto rep = json_at("ta.json");
  EXPECT_EQ(rep["layers"].size(), 2u);
  for (const auto& t : rep["tensors"]) EXPECT_FALSE(t.contains("trim"));
}

TEST_F(CliPair, TiesSurvivorCounts) {
  auto args = merge_args("ties");
  args.insert(args.end(), {"--method", "ties", "--trim-ratio", "0.4"});
  ASSERT_EQ(run(args), 0);
  int checked = 0;
  const auto rep = json_at("ties.json");
  for (const auto& t : rep["tensors"]) {
    if (!t.contains("trim")) continue;
    const auto n = t["trim"]["total"].get<std::size_t>();
    EXPECT_EQ(t["trim"]["retained"].get<std::size_t>(), static_cast<std::size_t>(std::ceil(0.4 * n - 1e-9)));
    ++checked;
  }
  EXPECT_EQ(checked, 14);
}

TEST_F(CliPair, DeltaNormSignalIsFlatterInLogSpace) {
  auto range_of = [&](const std::string& signal) {
    auto args = merge_args("sig_" + signal);
    args.insert(args.end(), {"--signal", signal});
    EXPECT_EQ(run(args), 0);
    std::vector<double> s;
    const auto rep = json_at("sig_" + signal + ".json");
    for (const auto& [_, v] : rep["signal"]["per_layer_raw"].items()) {
      s.push_back(std::log(v.get<double>()));
    }
    return *std::max_element(s.begin(), s.end()) - *std::min_element(s.begin(), s.end());
  };
  EXPECT_LE(range_of("delta_norm"), range_of("fim_x_delta"));
}

TEST_F(CliPair, MergeIsReproducibleViaReplay) {
  ASSERT_EQ(run({"--report-dir", p("rep1"), "merge", "--base", p("m/base.safetensors"), "--tuned",
                 p("m/tuned.safetensors"), "--fim", p("fim.json"), "--out", p("rep.safetensors"), "--report",
                 p("rep.json")}),
            0);
  const auto first = read_file(p("rep.safetensors"));
  const auto first_report = read_file(p("rep.json"));
  ASSERT_EQ(run({"replay", "--manifest", p("rep1/merge.manifest.json")}), 0);
  EXPECT_EQ(read_file(p("rep.safetensors")), first);
  EXPECT_EQ(read_file(p("rep.json")), first_report);
}

TEST_F(CliPair, PlanFileAndOverrides) {
  write_file_atomic(p("plan.json"), R"({"method":"ta","norm_threshold":"inf","gate_factor":1.0})");
  auto args = merge_args("planned");
  args.insert(args.end(), {"--plan", p("plan.json"), "--gate-factor", "0.5"});
  ASSERT_EQ(run(args), 0);
  const auto rep = json_at("planned.json");
  EXPECT_EQ(rep["method"], "fim_ta");
  EXPECT_EQ(rep["plan"]["norm_threshold"], "inf");
  EXPECT_EQ(rep["plan"]["gate_factor"], 0.5);
}

TEST_F(CliPair, AnalyzeNlWritesCsv) {
  ASSERT_EQ(run({"--report-dir", p("nl"), "analyze-nl", "--base", p("m/base.safetensors"), "--tuned",
                 p("m/tuned.safetensors"), "--eval-corpus", p("m/corpora.json"), "--out", p("nl.csv")}),
            0);
  const auto csv = read_file(p("nl.csv"));
  EXPECT_EQ(csv.rfind("layer,nl_score,relative_error\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST_F(CliPair, ExitCodes) {
  EXPECT_EQ(run({"--report-dir", p("reports"), "merge", "--base", p("missing.safetensors"), "--tuned", p("m/tuned.safetensors"), "--fim",
                 p("fim.json"), "--out", p("x.safetensors"), "--report", p("x.json")}),
            2);
  auto args = merge_args("bad");
  args.insert(args.end(), {"--trim-ratio", "1.5"});
  EXPECT_EQ(run(args), 1);
  args = merge_args("bad");
  args.insert(args.end(), {"--method", "average"});
  EXPECT_EQ(run(args), 1);
  write_file_atomic(p("corrupt.json"), "{");
  args = merge_args("bad");
  args[6] = p("corrupt.json");
  EXPECT_EQ(run(args), 2);
  EXPECT_EQ(run({"--report-dir", p("reports"), "merge"}), 1);
  EXPECT_EQ(run({"--report-dir", p("reports"), "verify", "--mode", "nonsense", "--report", p("v.json")}), 1);
}

TEST(Cli, VerifyQuadratic) {
  TempDir dir;
  ASSERT_EQ(run({"--report-dir", dir.path().string(), "verify", "--mode", "quadratic", "--report",
                 (dir / "q.json").string()}),
            0);
  const auto rep = nlohmann::json::parse(read_file(dir / "q.json"));
  EXPECT_LT(rep["quadratic_fixture_deviation"].get<double>(), 1e-9);
  EXPECT_LT(rep["micro_model_deviation"].get<double>(), 0.05);
  EXPECT_TRUE(std::filesystem::exists(dir / "q.csv"));
}

TEST(Cli, VerifyBoundFewTrials) {
  TempDir dir;
  ASSERT_EQ(run({"--report-dir", dir.path().string(), "verify", "--mode", "bound", "--trials", "2",
                 "--report", (dir / "b.json").string()}),
            0);
  const auto rep = nlohmann::json::parse(read_file(dir / "b.json"));
  EXPECT_EQ(rep["passed"], 2);
}
