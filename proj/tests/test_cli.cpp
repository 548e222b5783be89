#include <fnomf/cli.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace fnomf;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("fnomf-cli-") + info->name() + "-" + std::to_string(::getpid()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, ChiAtHePoint) {
  const CliRun r = run({"chi", "--activation", "relu", "--sigma2", "2", "--sigma-b2", "0", "-o", (dir_ / "a").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_EQ(doc.at("chi_c").get<double>(), 1.0);
  EXPECT_EQ(doc.at("q_star").get<double>(), 1.0);
  const auto file = nlohmann::json::parse(slurp(dir_ / "a" / "chi.json"));
  EXPECT_EQ(file.at("chi_c").get<double>(), 1.0);
  const auto meta = nlohmann::json::parse(slurp(dir_ / "a" / "chi.meta.json"));
  EXPECT_EQ(meta.at("artifact"), kArtifactName);
  EXPECT_EQ(meta.at("version"), kArtifactVersion);
  EXPECT_EQ(meta.at("seed"), 0);
  EXPECT_EQ(meta.at("config").at("command"), "chi");
}

TEST_F(CliTest, ChiForExplodingReluHasNoFixedPoint) {
  const CliRun r = run({"chi", "--sigma2", "3", "--sigma-b2", "0.1", "-o", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_TRUE(doc.at("q_star").is_null());
  EXPECT_EQ(doc.at("chi_c").get<double>(), 1.5);
}

TEST_F(CliTest, InitExportOriginal) {
  const CliRun r = run({"init-export", "--variant", "original", "--sigma2", "2", "--width", "32", "-o", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_DOUBLE_EQ(doc.at("theta_variance").get<double>(), 2.0 / 128.0);
  EXPECT_DOUBLE_EQ(doc.at("xi_variance").get<double>(), 2.0 / 128.0);
  EXPECT_DOUBLE_EQ(doc.at("dense_variance").get<double>(), 2.0 / 64.0);
  EXPECT_EQ(doc.at("bias_variance").get<double>(), 0.0);
  EXPECT_EQ(doc.at("scheme"), "original_split");
}

TEST_F(CliTest, TheoryCommands) {
  CliRun r = run({"fixed-point", "--activation", "tanh", "--sigma2", "1.5", "--sigma-b2", "0.1", "-N", "16", "-K", "5",
                  "-o", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto doc = nlohmann::json::parse(r.out);
  EXPECT_EQ(doc.at("c_star").get<double>(), 1.0);
  EXPECT_LT(doc.at("map_residual_inf").get<double>(), 1e-10);

  r = run({"edge", "--activation", "relu", "-o", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(nlohmann::json::parse(r.out).at("sigma2_critical").get<double>(), 2.0, 1e-6);

  r = run({"jacobian", "--activation", "tanh", "--sigma2", "1.5", "--sigma-b2", "0.1", "-N", "8", "-K", "3", "-o",
           dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  doc = nlohmann::json::parse(r.out);
  EXPECT_LE(doc.at("numerical_rank").get<int>(), 3);
  const std::string csv = slurp(dir_ / "jacobian.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "row,col,value");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 64 * 64);

  r = run({"jacobian", "-N", "64", "-o", dir_.string()});
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, GradnormDefaultsRerunByteIdentical) {
  const CliRun a = run({"gradnorm", "-o", (dir_ / "a").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  const CliRun b = run({"gradnorm", "-o", (dir_ / "b").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  for (const char* f : {"gradnorm.csv", "gradnorm_slope.csv"}) {
    const std::string ca = slurp(dir_ / "a" / f);
    EXPECT_FALSE(ca.empty());
    EXPECT_EQ(ca, slurp(dir_ / "b" / f)) << f;
    EXPECT_TRUE(fs::exists(dir_ / "a" / meta_path(f)));
  }
  const std::string csv = slurp(dir_ / "a" / "gradnorm.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "sigma2,layer,mean_log_gradnorm,std_log_gradnorm,theory_log_chi_c");
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 64);
  const RunConfig meta = read_meta(dir_ / "a" / "gradnorm.meta.json");
  EXPECT_EQ(meta.replicas, 16);
  EXPECT_EQ(meta.sigma2_grid, (std::vector<double>{1.0, 2.0, 4.0}));
}

TEST_F(CliTest, SidecarRoundTrip) {
  const CliRun a = run({"cov-evolve", "--activation", "tanh", "-N", "8", "-K", "3", "-D", "16", "-L", "4", "--sigma2",
                        "1.7", "--sigma-b2", "0.05", "--seed", "12", "--input", "constant", "--layers", "2,4", "-o",
                        (dir_ / "a").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  const fs::path sidecar = dir_ / "a" / "covariance.meta.json";
  RunConfig expected;
  expected.command = "cov-evolve";
  expected.activation = "tanh";
  expected.N = 8;
  expected.K = 3;
  expected.D = 16;
  expected.L = 4;
  expected.sigma2 = 1.7;
  expected.sigma_b2 = 0.05;
  expected.seed = 12;
  expected.input = "constant";
  expected.layers = {2, 4};
  expected.output_dir = (dir_ / "a").string();
  EXPECT_TRUE(read_meta(sidecar) == resolve_defaults(expected));
  EXPECT_TRUE(run_config_from_json(to_json(read_meta(sidecar))) == read_meta(sidecar));

  const CliRun b = run({"--from-meta", sidecar.string(), "--meta-output-dir", (dir_ / "b").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir_ / "a" / "covariance.csv"), slurp(dir_ / "b" / "covariance.csv"));
}

TEST_F(CliTest, OutputDirFromEnvironment) {
  ::setenv(kOutputDirEnv, (dir_ / "env").c_str(), 1);
  const CliRun r = run({"edge"});
  ::unsetenv(kOutputDirEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "env" / "edge.json"));
}

TEST_F(CliTest, ConfigurationErrorsExitTwo) {
  EXPECT_EQ(run({"bogus"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"chi", "--sigma2", "abc", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"chi", "--sigma2", "-1", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"chi", "-N", "12", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"chi", "-K", "40", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"chi", "--activation", "gelu", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"gradnorm", "--replicas", "0", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"theory-vs-sim", "--depth-checked", "0", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"cov-evolve", "--input", "weird", "-o", dir_.string()}).code, 2);
  EXPECT_EQ(run({"--from-meta", (dir_ / "missing.meta.json").string()}).code, 2);

  fs::create_directories(dir_);
  std::ofstream(dir_ / "file") << "x";
  const CliRun r = run({"chi", "-o", (dir_ / "file" / "sub").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("output directory"), std::string::npos);
}

TEST_F(CliTest, HelpAndVersionExitZero) {
  EXPECT_EQ(run({"--help"}).code, 0);
  const CliRun v = run({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(kArtifactVersion), std::string::npos);
}

TEST(WriteCsv, FormatAndErrors) {
  const fs::path p = fs::temp_directory_path() / ("fnomf-csv-" + std::to_string(::getpid()) + ".csv");
  Table t{{"x", "y"}, {{0.1, 1.0 / 3.0}, {-2.5e-300, 1e20}}};
  write_csv(t, p);
  const std::string s = slurp(p);
  EXPECT_EQ(s, "x,y\n0.10000000000000001,0.33333333333333331\n-2.5e-300,1e+20\n");
  std::istringstream in(s.substr(s.find('\n') + 1));
  std::string a, b;
  std::getline(in, a, ',');
  std::getline(in, b, '\n');
  EXPECT_EQ(std::stod(a), 0.1);
  EXPECT_EQ(std::stod(b), 1.0 / 3.0);
  EXPECT_EQ(format_double(0.1 + 0.2), "0.30000000000000004");
  fs::remove(p);

  Table bad{{"x", "y"}, {{1.0}}};
  EXPECT_THROW(write_csv(bad, p), std::invalid_argument);
  try {
    write_csv(t, "/nonexistent-dir/out.csv");
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent-dir/out.csv"), std::string::npos);
  }
}

TEST(RunConfigJson, RejectsMalformed) {
  RunConfig c = resolve_defaults([] {
    RunConfig r;
    r.command = "toy-train";
    r.output_dir = "x";
    return r;
  }());
  nlohmann::json j = to_json(c);
  EXPECT_TRUE(run_config_from_json(j) == c);
  j["N"] = "sixty-four";
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = to_json(c);
  j.erase("seed");
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}
