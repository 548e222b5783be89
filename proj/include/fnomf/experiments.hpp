#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fno.hpp"
#include "meanfield.hpp"
#include "numerics.hpp"

namespace fnomf {

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) {
    if (row.size() != columns.size()) throw std::invalid_argument("Table::add: row width mismatch");
    rows.push_back(std::move(row));
  }

  std::size_t column_index(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw std::out_of_range("Table: no column '" + std::string(name) + "'");
  }
};

struct ExperimentResult {
  std::string kind;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Table>> tables;

  const Table& table(std::string_view name) const {
    for (const auto& [n, t] : tables)
      if (n == name) return t;
    throw std::out_of_range("ExperimentResult: no table '" + std::string(name) + "'");
  }
};

enum class InputKind { normal, constant, zero };

inline std::string_view to_string(InputKind k) {
  switch (k) {
    case InputKind::normal: return "normal";
    case InputKind::constant: return "constant";
    case InputKind::zero: return "zero";
  }
  return "?";
}

inline InputKind parse_input_kind(std::string_view name) {
  if (name == "normal") return InputKind::normal;
  if (name == "constant") return InputKind::constant;
  if (name == "zero") return InputKind::zero;
  throw std::invalid_argument("unknown input kind '" + std::string(name) + "'");
}

// constant: one standard-normal value per channel, repeated over space.
inline Matrix make_input(InputKind kind, int N, int D, std::uint64_t seed, std::uint32_t replica = 0) {
  switch (kind) {
    case InputKind::normal: return standard_normal_input(N, D, seed, replica);
    case InputKind::constant: {
      const Matrix row = standard_normal_input(1, D, seed, replica);
      return row.replicate(N, 1);
    }
    case InputKind::zero: return Matrix::Zero(N, D);
  }
  return {};
}

inline InitScheme default_scheme(Variant v) {
  return v == Variant::original ? InitScheme::original_split : InitScheme::gaussian_generic;
}

// Least-squares slope of y against x.
inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  if (x.size() < 2) throw std::invalid_argument("ls_slope: need at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

inline double theory_chi_c(double sigma2, double sigma_b2, Activation act, const QuadratureRule& rule) {
  try {
    return chi_c_at_fixed_point(sigma2, sigma_b2, act, rule);
  } catch (const std::runtime_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

struct GradNormOptions {
  int replicas = 16;
  int skip_front = 4;  // layers excluded from the slope fit at the input end
  int skip_back = 2;   // and at the output end
  std::uint64_t seed = 0;
  int quadrature_order = 64;
};

// Slope is fitted against backprop depth L - l, so the theoretical slope is log chi_c.
inline ExperimentResult run_gradnorm(const FnoConfig& cfg, const std::vector<double>& sigma2_grid,
                                     double sigma_b2, const GradNormOptions& opt = {}) {
  cfg.validate();
  if (opt.replicas < 1) throw std::invalid_argument("run_gradnorm: replicas must be >= 1");
  if (sigma2_grid.empty()) throw std::invalid_argument("run_gradnorm: empty sigma2 grid");
  if (cfg.L - opt.skip_front - opt.skip_back < 2) {
    throw std::invalid_argument("run_gradnorm: depth too small for the slope fit window");
  }
  const QuadratureRule rule = gauss_hermite_rule(opt.quadrature_order);
  ExperimentResult res;
  res.kind = "gradnorm";
  res.seed = opt.seed;
  Table curves{{"sigma2", "layer", "mean_log_gradnorm", "std_log_gradnorm", "theory_log_chi_c"}, {}};
  Table slopes{{"sigma2", "fitted_slope", "theory_slope", "fit_first_layer", "fit_last_layer"}, {}};
  for (double sigma2 : sigma2_grid) {
    std::vector<std::vector<double>> logs(cfg.L + 1, std::vector<double>(opt.replicas));
    for (int r = 0; r < opt.replicas; ++r) {
      InitConfig init{sigma2, sigma_b2, default_scheme(cfg.variant), opt.seed, static_cast<std::uint32_t>(r)};
      const FnoParams params = init_params(cfg, init);
      const Matrix x = standard_normal_input(cfg.N, cfg.D, opt.seed, static_cast<std::uint32_t>(r));
      const ForwardTrace tr = forward(params, cfg, x);
      const GradientTrace g = backward(params, cfg, tr, loss_abs_mean_grad(tr.post[cfg.L]));
      for (int l = 1; l <= cfg.L; ++l) logs[l][r] = std::log(empirical_grad_norm(g, l));
    }
    const double log_chi = std::log(theory_chi_c(sigma2, sigma_b2, cfg.activation, rule));
    std::vector<double> fx, fy;
    for (int l = 1; l <= cfg.L; ++l) {
      double mean = 0.0;
      for (double v : logs[l]) mean += v;
      mean /= opt.replicas;
      double var = 0.0;
      for (double v : logs[l]) var += (v - mean) * (v - mean);
      const double sd = opt.replicas > 1 ? std::sqrt(var / (opt.replicas - 1)) : 0.0;
      curves.add({sigma2, static_cast<double>(l), mean, sd, log_chi});
      if (l > opt.skip_front && l <= cfg.L - opt.skip_back) {
        fx.push_back(static_cast<double>(cfg.L - l));
        fy.push_back(mean);
      }
    }
    slopes.add({sigma2, ls_slope(fx, fy), log_chi, static_cast<double>(opt.skip_front + 1),
                static_cast<double>(cfg.L - opt.skip_back)});
  }
  res.tables.emplace_back("gradnorm", std::move(curves));
  res.tables.emplace_back("gradnorm_slope", std::move(slopes));
  return res;
}

inline double fitted_slope(const ExperimentResult& res, double sigma2) {
  const Table& t = res.table("gradnorm_slope");
  for (const auto& row : t.rows)
    if (row[0] == sigma2) return row[1];
  throw std::out_of_range("fitted_slope: sigma2 not in grid");
}

struct CovEvolutionOptions {
  InputKind input = InputKind::normal;
  std::uint64_t input_seed = 0;
};

inline ExperimentResult run_cov_evolution(const FnoConfig& cfg, const InitConfig& init,
                                          const std::vector<int>& layers_to_record,
                                          const CovEvolutionOptions& opt = {}) {
  cfg.validate();
  for (int l : layers_to_record) {
    if (l < 1 || l > cfg.L) throw std::invalid_argument("run_cov_evolution: recorded layer out of range");
  }
  const Matrix x = make_input(opt.input, cfg.N, cfg.D, opt.input_seed);
  const ForwardTrace tr = forward_streamed(cfg, init, x);
  ExperimentResult res;
  res.kind = "cov-evolve";
  res.seed = init.root_seed;
  Table t{{"layer", "alpha", "alpha_prime", "covariance", "correlation"}, {}};
  for (int l : layers_to_record) {
    const Matrix cov = empirical_cov(tr, l);
    for (int a = 0; a < cfg.N; ++a) {
      for (int b = 0; b < cfg.N; ++b) {
        const double denom = std::sqrt(cov(a, a) * cov(b, b));
        const double corr = denom > 0.0 ? cov(a, b) / denom : 0.0;
        t.add({static_cast<double>(l), static_cast<double>(a), static_cast<double>(b), cov(a, b), corr});
      }
    }
  }
  res.tables.emplace_back("covariance", std::move(t));
  return res;
}

// Rebuild one layer's matrix from the flat covariance table.
inline Matrix table_matrix(const Table& t, int layer, int N, std::string_view column) {
  const std::size_t c = t.column_index(column);
  Matrix m = Matrix::Zero(N, N);
  bool found = false;
  for (const auto& row : t.rows) {
    if (static_cast<int>(row[0]) != layer) continue;
    m(static_cast<int>(row[1]), static_cast<int>(row[2])) = row[c];
    found = true;
  }
  if (!found) throw std::out_of_range("table_matrix: layer not recorded");
  return m;
}

struct TheoryVsSimOptions {
  int replicas = 1;
  InputKind input = InputKind::normal;
  std::uint64_t input_seed = 0;
  int quadrature_order = 64;
};

// Per-layer relative Frobenius error between the replica-averaged empirical covariance and the
// iterated covariance map started from the input's layer-1 covariance.
inline ExperimentResult run_theory_vs_sim(const FnoConfig& cfg, const InitConfig& init, int depth_checked,
                                          const TheoryVsSimOptions& opt = {}) {
  if (depth_checked < 1 || depth_checked > cfg.L) {
    throw std::invalid_argument("run_theory_vs_sim: depth_checked must be in [1, L]");
  }
  if (opt.replicas < 1) throw std::invalid_argument("run_theory_vs_sim: replicas must be >= 1");
  validate_init(cfg, init);
  FnoConfig run_cfg = cfg;
  run_cfg.L = depth_checked;
  const QuadratureRule rule = gauss_hermite_rule(opt.quadrature_order);
  const ModeSpec mode = ModeSpec::make(cfg.N, cfg.K);
  const LayerVariances var = init_variances(cfg, init);
  // effective sigma^2 and sigma_b^2 after scheme overrides
  const double sigma2 = cfg.variant == Variant::original ? 2.0 * cfg.D * var.dense : 2.0 * cfg.D * var.theta;
  const double sigma_b2 = var.bias;
  const Matrix x = make_input(opt.input, cfg.N, cfg.D, opt.input_seed);

  std::vector<Matrix> theory(depth_checked + 1);
  if (cfg.variant == Variant::original) {
    theory[1] = initial_covariance_original(x, sigma2, sigma_b2, mode);
    for (int l = 2; l <= depth_checked; ++l)
      theory[l] = fno_c_map_original(theory[l - 1], sigma2, sigma_b2, cfg.activation, mode, rule);
  } else {
    theory[1] = initial_covariance_from_input(x, sigma2, sigma_b2, mode);
    for (int l = 2; l <= depth_checked; ++l)
      theory[l] = fno_c_map(theory[l - 1], sigma2, sigma_b2, cfg.activation, mode, rule);
  }

  std::vector<Matrix> empirical(depth_checked + 1, Matrix::Zero(cfg.N, cfg.N));
  for (int r = 0; r < opt.replicas; ++r) {
    InitConfig rep = init;
    rep.replica = init.replica + static_cast<std::uint32_t>(r);
    const ForwardTrace tr = forward_streamed(run_cfg, rep, x);
    for (int l = 1; l <= depth_checked; ++l) empirical[l] += empirical_cov(tr, l);
  }

  ExperimentResult res;
  res.kind = "theory-vs-sim";
  res.seed = init.root_seed;
  // layer_drift: change of the empirical covariance from the previous layer, relative to it
  Table t{{"layer", "relative_frobenius_error", "theory_frobenius_norm", "empirical_frobenius_norm", "layer_drift"},
          {}};
  for (int l = 1; l <= depth_checked; ++l) {
    empirical[l] /= static_cast<double>(opt.replicas);
    const double tn = theory[l].norm();
    const double diff = (empirical[l] - theory[l]).norm();
    const double rel = tn > 0.0 ? diff / tn : diff;
    double drift = 0.0;
    if (l > 1) {
      const double prev = empirical[l - 1].norm();
      const double step = (empirical[l] - empirical[l - 1]).norm();
      drift = prev > 0.0 ? step / prev : step;
    }
    t.add({static_cast<double>(l), rel, tn, empirical[l].norm(), drift});
  }
  res.tables.emplace_back("theory_vs_sim", std::move(t));
  return res;
}

struct PhaseScanOptions {
  double bracket_lo = 0.5;
  double bracket_hi = 8.0;
  std::vector<double> sigma2_grid;  // for the chi_c contour table
  int quadrature_order = 64;
};

inline ExperimentResult run_phase_scan(Activation act, const std::vector<double>& sigma_b2_grid,
                                       const PhaseScanOptions& opt = {}) {
  const QuadratureRule rule = gauss_hermite_rule(opt.quadrature_order);
  ExperimentResult res;
  res.kind = "phase-scan";
  Table edge{{"sigma_b2", "sigma2_critical"}, {}};
  Table chi{{"sigma_b2", "sigma2", "chi_c"}, {}};
  for (double sb2 : sigma_b2_grid) {
    edge.add({sb2, find_edge_sigma2(sb2, act, opt.bracket_lo, opt.bracket_hi, rule)});
    for (double s2 : opt.sigma2_grid) chi.add({sb2, s2, theory_chi_c(s2, sb2, act, rule)});
  }
  res.tables.emplace_back("phase_scan", std::move(edge));
  res.tables.emplace_back("phase_chi", std::move(chi));
  return res;
}

struct ToyTrainOptions {
  int steps = 100;
  double learning_rate = 1e-3;
  int batch = 64;
  double sigma_b2 = 0.0;
  std::uint64_t seed = 0;
};

struct ToyCell {
  double sigma2 = 2.0;
  int depth = 4;
};

namespace detail {

inline void sgd_step(FnoParams& params, const GradientTrace& g, double lr) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    FnoLayer& layer = params.layers[l];
    for (std::size_t k = 0; k < layer.theta.size(); ++k) {
      layer.theta[k] -= lr * g.grad_theta[l][k];
      layer.xi[k] -= lr * g.grad_xi[l][k];
    }
    layer.bias -= lr * g.grad_bias[l];
    if (layer.dense.size() > 0) layer.dense -= lr * g.grad_dense[l];
  }
}

inline void accumulate(GradientTrace& acc, const GradientTrace& g) {
  if (acc.grad_theta.empty()) {
    acc = g;
    return;
  }
  for (std::size_t l = 0; l < g.grad_theta.size(); ++l) {
    for (std::size_t k = 0; k < g.grad_theta[l].size(); ++k) {
      acc.grad_theta[l][k] += g.grad_theta[l][k];
      acc.grad_xi[l][k] += g.grad_xi[l][k];
    }
    acc.grad_bias[l] += g.grad_bias[l];
    if (g.grad_dense[l].size() > 0) acc.grad_dense[l] += g.grad_dense[l];
  }
}

}  // namespace detail

// Teacher-student regression with a linear readout (pre-activations of the last layer). The teacher is a
// depth-2 He-initialized simplified network; its outputs are centered per channel so that a bias shift
// alone cannot reduce the loss.
inline ExperimentResult run_toy_train(const FnoConfig& cfg, const std::vector<ToyCell>& grid,
                                      const ToyTrainOptions& opt = {}) {
  cfg.validate();
  if (opt.steps < 1) throw std::invalid_argument("run_toy_train: steps must be >= 1");
  if (opt.batch < 1) throw std::invalid_argument("run_toy_train: batch must be >= 1");
  if (!(opt.learning_rate > 0.0)) throw std::invalid_argument("run_toy_train: learning rate must be positive");

  FnoConfig teacher_cfg = cfg;
  teacher_cfg.L = 2;
  teacher_cfg.variant = Variant::simplified;
  const InitConfig teacher_init{2.0, 0.0, InitScheme::he_simplified, splitmix64(opt.seed ^ 0x7eac4e5ULL), 0};
  const FnoParams teacher = init_params(teacher_cfg, teacher_init);
  std::vector<Matrix> inputs, targets;
  Eigen::RowVectorXd channel_mean = Eigen::RowVectorXd::Zero(cfg.D);
  for (int b = 0; b < opt.batch; ++b) {
    inputs.push_back(standard_normal_input(cfg.N, cfg.D, opt.seed, static_cast<std::uint32_t>(b)));
    targets.push_back(forward(teacher, teacher_cfg, inputs.back()).pre[2]);
    channel_mean += targets.back().colwise().sum();
  }
  channel_mean /= static_cast<double>(opt.batch) * cfg.N;
  for (Matrix& t : targets) t.rowwise() -= channel_mean;

  ExperimentResult res;
  res.kind = "toy-train";
  res.seed = opt.seed;
  Table losses{{"sigma2", "depth", "step", "loss"}, {}};
  Table summary{{"sigma2", "depth", "initial_loss", "final_loss", "loss_ratio"}, {}};
  const double scale = 1.0 / (static_cast<double>(opt.batch) * cfg.N * cfg.D);
  for (const ToyCell& cell : grid) {
    if (cell.depth < 1) throw std::invalid_argument("run_toy_train: depth must be >= 1");
    FnoConfig student_cfg = cfg;
    student_cfg.L = cell.depth;
    const InitConfig init{cell.sigma2, opt.sigma_b2, default_scheme(cfg.variant), opt.seed, 0};
    FnoParams params = init_params(student_cfg, init);
    double initial = std::numeric_limits<double>::quiet_NaN();
    double last = initial;
    for (int step = 0; step <= opt.steps; ++step) {
      double loss = 0.0;
      GradientTrace total;
      for (int b = 0; b < opt.batch; ++b) {
        const ForwardTrace tr = forward(params, student_cfg, inputs[b]);
        const Matrix diff = tr.pre[cell.depth] - targets[b];
        loss += diff.squaredNorm() * scale;
        if (step < opt.steps) detail::accumulate(total, backward_from_pre(params, student_cfg, tr, 2.0 * scale * diff));
      }
      if (step == 0) initial = loss;
      last = loss;
      losses.add({cell.sigma2, static_cast<double>(cell.depth), static_cast<double>(step), loss});
      if (!std::isfinite(loss)) break;
      if (step < opt.steps) detail::sgd_step(params, total, opt.learning_rate);
    }
    const double final_loss = std::isfinite(last) ? last : std::numeric_limits<double>::infinity();
    const double ratio = std::isfinite(final_loss) && initial > 0.0 ? final_loss / initial
                                                                      : std::numeric_limits<double>::infinity();
    summary.add({cell.sigma2, static_cast<double>(cell.depth), initial, final_loss, ratio});
  }
  res.tables.emplace_back("toy_train_loss", std::move(losses));
  res.tables.emplace_back("toy_train_summary", std::move(summary));
  return res;
}

}  // namespace fnomf
