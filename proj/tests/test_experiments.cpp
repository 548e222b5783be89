#include <fnomf/experiments.hpp>

#include <gtest/gtest.h>

using namespace fnomf;

namespace {

FnoConfig small_cfg(Activation act, int N = 16, int D = 32, int K = 5, int L = 24) {
  FnoConfig c;
  c.N = N;
  c.D = D;
  c.K = K;
  c.L = L;
  c.activation = act;
  return c;
}

bool same_tables(const ExperimentResult& a, const ExperimentResult& b) {
  if (a.kind != b.kind || a.seed != b.seed || a.tables.size() != b.tables.size()) return false;
  for (std::size_t i = 0; i < a.tables.size(); ++i) {
    if (a.tables[i].first != b.tables[i].first) return false;
    if (a.tables[i].second.columns != b.tables[i].second.columns) return false;
    // memcmp-style equality; NaN sentinels would compare unequal under ==
    const auto& ra = a.tables[i].second.rows;
    const auto& rb = b.tables[i].second.rows;
    if (ra.size() != rb.size()) return false;
    for (std::size_t r = 0; r < ra.size(); ++r)
      if (std::memcmp(ra[r].data(), rb[r].data(), ra[r].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

double slope_of(const ExperimentResult& r, double s2) { return fitted_slope(r, s2); }

}  // namespace

TEST(Table, RejectsRowWidthMismatch) {
  Table t{{"a", "b"}, {}};
  EXPECT_NO_THROW(t.add({1, 2}));
  EXPECT_THROW(t.add({1}), std::invalid_argument);
  EXPECT_EQ(t.column_index("b"), 1u);
  EXPECT_THROW(t.column_index("c"), std::out_of_range);
}

TEST(LsSlope, ExactLine) {
  EXPECT_NEAR(ls_slope({0, 1, 2, 3}, {1, 3, 5, 7}), 2.0, 1e-14);
  EXPECT_THROW(ls_slope({1}, {1}), std::invalid_argument);
}

TEST(GradNorm, DeterministicAndSchema) {
  GradNormOptions opt;
  opt.replicas = 2;
  opt.seed = 9;
  const FnoConfig cfg = small_cfg(Activation::relu, 8, 16, 3, 10);
  const ExperimentResult a = run_gradnorm(cfg, {1.0, 2.0}, 0.0, opt);
  const ExperimentResult b = run_gradnorm(cfg, {1.0, 2.0}, 0.0, opt);
  EXPECT_TRUE(same_tables(a, b));
  EXPECT_EQ(a.kind, "gradnorm");
  EXPECT_EQ(a.table("gradnorm").columns,
            (std::vector<std::string>{"sigma2", "layer", "mean_log_gradnorm", "std_log_gradnorm", "theory_log_chi_c"}));
  EXPECT_EQ(a.table("gradnorm").rows.size(), 20u);
  EXPECT_EQ(a.table("gradnorm_slope").rows.size(), 2u);
  opt.seed = 10;
  EXPECT_FALSE(same_tables(a, run_gradnorm(cfg, {1.0, 2.0}, 0.0, opt)));
  opt.replicas = 0;
  EXPECT_THROW(run_gradnorm(cfg, {1.0}, 0.0, opt), std::invalid_argument);
}

TEST(GradNorm, SlopesFollowChiC) {
  GradNormOptions opt;
  opt.replicas = 16;
  const ExperimentResult relu = run_gradnorm(small_cfg(Activation::relu, 64, 32, 12, 64), {2.0, 4.0}, 0.0, opt);
  EXPECT_LT(std::abs(slope_of(relu, 2.0)), 0.05);
  opt.replicas = 6;
  EXPECT_NEAR(slope_of(relu, 4.0), std::log(2.0), 0.2 * std::log(2.0));
  const ExperimentResult tanh = run_gradnorm(small_cfg(Activation::tanh), {0.5}, 0.1, opt);
  EXPECT_LT(slope_of(tanh, 0.5), -0.1);
  EXPECT_NEAR(tanh.table("gradnorm_slope").rows[0][2],
              std::log(chi_c_at_fixed_point(0.5, 0.1, Activation::tanh, gauss_hermite_rule(64))), 1e-12);
}

TEST(GradNorm, ReplicaMeansStableUnderDoubling) {
  const FnoConfig cfg = small_cfg(Activation::relu, 8, 32, 3, 12);
  GradNormOptions opt;
  opt.replicas = 8;
  const Table a = run_gradnorm(cfg, {2.0}, 0.0, opt).table("gradnorm");
  opt.replicas = 16;
  const Table b = run_gradnorm(cfg, {2.0}, 0.0, opt).table("gradnorm");
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const double se = b.rows[i][3] / std::sqrt(16.0);
    EXPECT_LT(std::abs(a.rows[i][2] - b.rows[i][2]), 3.0 * se) << "layer " << a.rows[i][1];
  }
}

TEST(CovEvolution, OrderedPhaseConvergesToUniformCorrelation) {
  const FnoConfig cfg = small_cfg(Activation::tanh, 32, 256, 17, 32);
  const ExperimentResult r = run_cov_evolution(cfg, {0.5, 0.1, InitScheme::gaussian_generic, 1, 0}, {1, 32});
  const Table& t = r.table("covariance");
  EXPECT_EQ(t.columns, (std::vector<std::string>{"layer", "alpha", "alpha_prime", "covariance", "correlation"}));
  EXPECT_EQ(t.rows.size(), 2u * 32 * 32);
  const Matrix corr = table_matrix(t, 32, 32, "correlation");
  EXPECT_GE(corr.minCoeff(), 0.95);
  EXPECT_LT(table_matrix(t, 1, 32, "correlation").minCoeff(), 0.95);
  EXPECT_THROW(table_matrix(t, 5, 32, "correlation"), std::out_of_range);
}

TEST(CovEvolution, ChaoticPhaseIsSpannedByRetainedCosines) {
  const int n = 32, K = 5;
  const FnoConfig cfg = small_cfg(Activation::tanh, n, 1024, K, 32);
  const ExperimentResult r = run_cov_evolution(cfg, {4.0, 0.1, InitScheme::gaussian_generic, 2, 0}, {32});
  const Matrix corr = table_matrix(r.table("covariance"), 32, n, "correlation");
  const ModeSpec m = ModeSpec::make(n, K);
  for (int a = 0; a < n; ++a) {
    Matrix basis(n, K);
    for (int k = 0; k < K; ++k) basis.col(k) = m.cos_theta(k).row(a).transpose();
    const Vector row = corr.row(a).transpose();
    const Vector fit = basis * basis.colPivHouseholderQr().solve(row);
    EXPECT_LE((row - fit).norm(), 0.1 * row.norm()) << "row " << a;
  }
  // the structure is not simply uniform
  EXPECT_LT(corr.minCoeff(), 0.9);
}

TEST(CovEvolution, RejectsBadLayer) {
  const FnoConfig cfg = small_cfg(Activation::tanh, 8, 16, 3, 4);
  EXPECT_THROW(run_cov_evolution(cfg, {1.0, 0.0, InitScheme::gaussian_generic, 0, 0}, {5}),
               std::invalid_argument);
}

TEST(TheoryVsSim, ZeroInputIsExactlyZero) {
  const FnoConfig cfg = small_cfg(Activation::tanh, 16, 64, 5, 6);
  TheoryVsSimOptions opt;
  opt.input = InputKind::zero;
  const ExperimentResult r = run_theory_vs_sim(cfg, {1.5, 0.0, InitScheme::gaussian_generic, 0, 0}, 6, opt);
  const Table& t = r.table("theory_vs_sim");
  ASSERT_EQ(t.rows.size(), 6u);
  for (const auto& row : t.rows) {
    EXPECT_EQ(row[1], 0.0);
    EXPECT_EQ(row[2], 0.0);
    EXPECT_EQ(row[3], 0.0);
  }
}

TEST(TheoryVsSim, SmallWidthAgreement) {
  const FnoConfig cfg = small_cfg(Activation::tanh, 16, 1024, 5, 4);
  TheoryVsSimOptions opt;
  opt.replicas = 2;
  const ExperimentResult a = run_theory_vs_sim(cfg, {1.5, 0.1, InitScheme::gaussian_generic, 3, 0}, 4, opt);
  const Table& t = a.table("theory_vs_sim");
  EXPECT_EQ(t.columns, (std::vector<std::string>{"layer", "relative_frobenius_error", "theory_frobenius_norm",
                                                 "empirical_frobenius_norm", "layer_drift"}));
  EXPECT_EQ(t.rows[0][4], 0.0);
  for (const auto& row : t.rows) EXPECT_LT(row[1], 0.1) << "layer " << row[0];
  EXPECT_TRUE(same_tables(a, run_theory_vs_sim(cfg, {1.5, 0.1, InitScheme::gaussian_generic, 3, 0}, 4, opt)));
  EXPECT_THROW(run_theory_vs_sim(cfg, {1.5, 0.1, InitScheme::gaussian_generic, 3, 0}, 5, opt),
               std::invalid_argument);
}

TEST(PhaseScan, KnownBoundaries) {
  const ExperimentResult relu = run_phase_scan(Activation::relu, {0.0});
  EXPECT_NEAR(relu.table("phase_scan").rows[0][1], 2.0, 1e-6);
  PhaseScanOptions opt;
  opt.sigma2_grid = {1.0, 2.0, 3.0};
  const ExperimentResult tanh = run_phase_scan(Activation::tanh, {0.0, 0.1}, opt);
  const Table& e = tanh.table("phase_scan");
  EXPECT_NEAR(e.rows[0][1], 1.0, 1e-4);
  EXPECT_GT(e.rows[1][1], 1.0);
  EXPECT_LT(e.rows[1][1], 3.0);
  EXPECT_LT(e.rows[0][1], e.rows[1][1]);
  EXPECT_EQ(tanh.table("phase_chi").rows.size(), 6u);
  EXPECT_EQ(tanh.table("phase_chi").columns, (std::vector<std::string>{"sigma_b2", "sigma2", "chi_c"}));
}

TEST(ToyTrain, SchemaAndShallowProgress) {
  FnoConfig cfg = small_cfg(Activation::relu, 8, 64, 5, 4);
  ToyTrainOptions opt;
  opt.steps = 100;
  opt.learning_rate = 0.01;
  const ExperimentResult r = run_toy_train(cfg, {{2.0, 4}}, opt);
  const Table& loss = r.table("toy_train_loss");
  const Table& sum = r.table("toy_train_summary");
  EXPECT_EQ(loss.columns, (std::vector<std::string>{"sigma2", "depth", "step", "loss"}));
  EXPECT_EQ(sum.columns, (std::vector<std::string>{"sigma2", "depth", "initial_loss", "final_loss", "loss_ratio"}));
  ASSERT_EQ(loss.rows.size(), 101u);
  EXPECT_EQ(loss.rows.front()[3], sum.rows[0][2]);
  EXPECT_EQ(loss.rows.back()[3], sum.rows[0][3]);
  EXPECT_LT(sum.rows[0][4], 0.9);
}

TEST(ToyTrain, DivergenceIsASentinel) {
  FnoConfig cfg = small_cfg(Activation::relu, 8, 16, 3, 4);
  ToyTrainOptions opt;
  opt.steps = 50;
  opt.batch = 4;
  opt.learning_rate = 1e6;
  ExperimentResult r;
  ASSERT_NO_THROW(r = run_toy_train(cfg, {{4.0, 4}}, opt));
  const auto& row = r.table("toy_train_summary").rows[0];
  EXPECT_FALSE(std::isfinite(row[3]));
  EXPECT_FALSE(std::isfinite(row[4]));
  opt.steps = 0;
  EXPECT_THROW(run_toy_train(cfg, {{4.0, 4}}, opt), std::invalid_argument);
}

TEST(ToyTrain, Deterministic) {
  FnoConfig cfg = small_cfg(Activation::tanh, 8, 16, 3, 3);
  ToyTrainOptions opt;
  opt.steps = 5;
  opt.batch = 4;
  opt.learning_rate = 0.01;
  EXPECT_TRUE(same_tables(run_toy_train(cfg, {{1.0, 3}, {2.0, 2}}, opt), run_toy_train(cfg, {{1.0, 3}, {2.0, 2}}, opt)));
}
