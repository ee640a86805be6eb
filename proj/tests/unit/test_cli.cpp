#include "attmil/bag.hpp"
#include "attmil/cli.hpp"
#include "attmil/data.hpp"
#include "attmil/errors.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace attmil;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Cli {
  int code = 0;
  std::string out, err;
};

Cli run(std::vector<std::string> args) {
  args.insert(args.begin(), "attmil");
  std::ostringstream out, err;
  Cli r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CliTest : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() / ("attmil_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const json cfg = {
        {"model", {{"num_classes", 3}, {"instance_shape", {2, 8, 8}}, {"embed_dim", 8}, {"attention_hidden", 4},
                   {"conv_channels", {2, 2, 2, 2, 2}}}},
        {"train", {{"max_epochs", 2}, {"folds", 2}, {"runs", 1}}},
        {"generator", {{"num_classes", 3}, {"instance_shape", {2, 8, 8}}, {"bag_size", {3, 6}},
                       {"witness_rate", {0.3, 0.4}}, {"patients_per_class", 2}, {"bags_per_patient", 2}}},
    };
    std::ofstream(dir / "cfg.json") << cfg.dump(2);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string cfg() const { return (dir / "cfg.json").string(); }
  std::string p(const std::string& rel) const { return (dir / rel).string(); }

  void generate(const std::string& out = "gen") {
    const Cli r = run({"generate", "--config", cfg(), "--out", p(out), "--seed", "5"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
};

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--method", "mil_mean"}).code, kExitUsage);
  EXPECT_EQ(run({"attend", "--checkpoint", "x"}).code, kExitUsage);  // --bag-id is required
}

TEST(Cli, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(RunConfigJson, RoundTripAndUnknownKey) {
  RunConfig c;
  c.train.seed = 9;
  c.patients_per_class = 4;
  c.paths.output_dir = "x";
  EXPECT_EQ(run_config_from_json(to_json(c)), c);
  EXPECT_THROW(run_config_from_json(json{{"trian", json::object()}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"embed", 3}}}}), ConfigError);
  c.patients_per_class = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST_F(CliTest, GenerateWritesDatasetAndManifest) {
  const Cli r = run({"generate", "--config", cfg(), "--out", p("gen"), "--seed", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("classes 3, patients 6, bags 12"), std::string::npos) << r.out;
  const Dataset ds = read_bagfile(p("gen/dataset.milb"));
  EXPECT_EQ(ds.bags.size(), 12u);
  ASSERT_TRUE(ds.landmarks.has_value());
  const json manifest = json::parse(slurp(p("gen/manifest.json")));
  EXPECT_EQ(manifest["command"], "generate");
  EXPECT_EQ(manifest["generator_seed"], 5);
  EXPECT_EQ(manifest["artifacts"]["dataset.milb"]["sha256"], sha256_hex(slurp(p("gen/dataset.milb"))));
}

TEST_F(CliTest, GenerateIsByteDeterministic) {
  std::map<std::string, std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(p("g"));
    generate("g");
    for (const char* f : {"dataset.milb", "config.json", "manifest.json"}) {
      const std::string bytes = slurp(p(std::string("g/") + f));
      if (pass == 0) first[f] = bytes;
      else EXPECT_EQ(first[f], bytes) << f;
    }
  }
}

TEST_F(CliTest, GenerateRejectsBadCounts) {
  EXPECT_EQ(run({"generate", "--config", cfg(), "--out", p("g"), "--patients-per-class", "0"}).code, kExitUsage);
  EXPECT_FALSE(fs::exists(p("g/dataset.milb")));
}

TEST_F(CliTest, UnknownConfigKeyIsUsageError) {
  std::ofstream(dir / "bad.json") << R"({"model": {"embed_dim": 8, "colour": "red"}})";
  const Cli r = run({"generate", "--config", p("bad.json"), "--out", p("g")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("colour"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingDatasetIsRuntimeFailure) {
  EXPECT_EQ(run({"train", "--config", cfg(), "--data", p("nope.milb"), "--out", p("t")}).code, kExitFailure);
}

TEST_F(CliTest, TrainEvaluateAttend) {
  generate();
  Cli r = run({"train", "--config", cfg(), "--data", p("gen/dataset.milb"), "--out", p("t"), "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"fold0/checkpoint.amil", "fold1/epochs.csv", "fold1/report.json", "report.json",
                        "manifest.json", "config.json"}) {
    EXPECT_TRUE(fs::exists(p(std::string("t/") + f))) << f;
  }
  const std::string csv = slurp(p("t/fold0/epochs.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,mil_loss,sic_loss,combined_loss,sic_weight");
  EXPECT_NE(csv.find("\n1,"), std::string::npos);
  EXPECT_EQ(json::parse(slurp(p("t/report.json")))["method"], "mil_att_sic");

  const std::string ckpt = p("t/fold0/checkpoint.amil");
  r = run({"evaluate", "--checkpoint", ckpt, "--data", p("gen/dataset.milb"), "--out", p("e1")});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(run({"evaluate", "--checkpoint", ckpt, "--data", p("gen/dataset.milb"), "--out", p("e2")}).code, 0);
  EXPECT_EQ(slurp(p("e1/report.json")), slurp(p("e2/report.json")));
  const json report = json::parse(slurp(p("e1/report.json")));
  EXPECT_EQ(report["bag_count"], 12);

  const Dataset ds = read_bagfile(p("gen/dataset.milb"));
  const Bag& bag = ds.bags[0];
  r = run({"attend", "--checkpoint", ckpt, "--data", p("gen/dataset.milb"), "--bag-id", bag.id, "--top", "100"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json att = json::parse(r.out);
  EXPECT_EQ(att["bag_id"], bag.id);
  EXPECT_EQ(att["pooling"], "attention");
  ASSERT_EQ(att["top"].size(), static_cast<std::size_t>(bag.size()));
  EXPECT_NEAR(att["attention_sum"].get<double>(), 1.0, 1e-9);
  double sum = 0, prev = 2;
  for (const auto& e : att["top"]) {
    sum += e["score"].get<double>();
    EXPECT_LE(e["score"].get<double>(), prev);
    prev = e["score"].get<double>();
    EXPECT_TRUE(e.contains("landmark"));
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);

  EXPECT_NE(run({"attend", "--checkpoint", ckpt, "--data", p("gen/dataset.milb"), "--bag-id", "no-such-bag"}).code, 0);
}

TEST_F(CliTest, TrainIsByteDeterministic) {
  generate();
  for (const char* out : {"t1", "t2"}) {
    ASSERT_EQ(run({"train", "--config", cfg(), "--data", p("gen/dataset.milb"), "--out", p(out), "--method",
                   "mil_max_sic", "--folds", "2"})
                  .code,
              0);
  }
  for (const char* f : {"fold0/checkpoint.amil", "fold1/checkpoint.amil", "fold0/epochs.csv", "report.json"}) {
    EXPECT_EQ(slurp(p(std::string("t1/") + f)), slurp(p(std::string("t2/") + f))) << f;
  }
}

TEST_F(CliTest, EvaluateRejectsShapeMismatch) {
  generate();
  ASSERT_EQ(run({"train", "--config", cfg(), "--data", p("gen/dataset.milb"), "--out", p("t"), "--max-epochs", "1"}).code, 0);
  GeneratorConfig g;
  g.num_classes = 3;
  g.instance_shape = {1, 8, 8};
  g.bag_size_min = 2;
  g.bag_size_max = 3;
  g.witness_min = 0.3;
  g.witness_max = 0.5;
  write_bagfile(generate_dataset(g, 1, 1), p("other.milb"));
  const Cli r = run({"evaluate", "--checkpoint", p("t/fold0/checkpoint.amil"), "--data", p("other.milb"), "--out", p("e")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("2x8x8"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("1x8x8"), std::string::npos) << r.err;
}

TEST_F(CliTest, AblationTinyRunIsDeterministicAcrossThreadCounts) {
  generate();
  for (const auto& [out, threads] : {std::pair{"a1", "1"}, std::pair{"a2", "3"}}) {
    ::setenv("ATTMIL_THREADS", threads, 1);
    const Cli r = run({"ablation", "--config", cfg(), "--data", p("gen/dataset.milb"), "--out", p(out), "--runs", "2",
                       "--max-epochs", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  ::unsetenv("ATTMIL_THREADS");
  const std::string csv = slurp(p("a1/ablation.csv"));
  EXPECT_EQ(csv, slurp(p("a2/ablation.csv")));
  EXPECT_EQ(slurp(p("a1/runs.json")), slurp(p("a2/runs.json")));
  std::istringstream lines(csv);
  std::string line;
  std::vector<std::string> methods;
  std::getline(lines, line);
  EXPECT_EQ(line, kAblationCsvHeader);
  while (std::getline(lines, line)) methods.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(methods, (std::vector<std::string>{"sic", "mil_max", "mil_max_sic", "mil_att_sic"}));
}

TEST_F(CliTest, AblationRejectsBadThreadCount) {
  generate();
  ::setenv("ATTMIL_THREADS", "zero", 1);
  const Cli r = run({"ablation", "--config", cfg(), "--data", p("gen/dataset.milb"), "--out", p("a"), "--runs", "1"});
  ::unsetenv("ATTMIL_THREADS");
  EXPECT_EQ(r.code, kExitUsage);
}

TEST(CliGradcheck, PassesAndCatchesInjectedFault) {
  Cli r = run({"gradcheck"});
  EXPECT_EQ(r.code, kExitOk) << r.out;
  EXPECT_NE(r.out.find("checks passed"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  r = run({"gradcheck", "--inject-fault", "tanh"});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--inject-fault", "relu"}).code, kExitUsage);
}
