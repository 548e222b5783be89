// Locates the edge of chaos for a tanh network with small bias and checks it against
// the gradient-norm slope of a simulated FNO on either side of the edge.
#include <fnomf/experiments.hpp>

#include <cstdio>

int main() {
  using namespace fnomf;
  const QuadratureRule rule = gauss_hermite_rule(64);
  const double sb2 = 0.1;

  const double edge = find_edge_sigma2(sb2, Activation::tanh, 0.5, 8.0, rule);
  std::printf("tanh, sigma_b^2 = %.2f: edge at sigma^2 = %.6f\n", sb2, edge);

  std::printf("%8s %10s %10s\n", "sigma2", "q*", "chi_c");
  for (double s2 : {1.0, 1.5, 2.0, 2.5, 3.0}) {
    const MeanFieldPoint p = solve_q_star(s2, sb2, Activation::tanh, rule);
    std::printf("%8.2f %10.5f %10.5f\n", s2, p.q, chi_c_at_fixed_point(s2, sb2, Activation::tanh, rule));
  }

  FnoConfig cfg;
  cfg.N = 32;
  cfg.K = 8;
  cfg.L = 32;
  cfg.activation = Activation::tanh;
  GradNormOptions opt;
  opt.replicas = 4;
  const ExperimentResult res = run_gradnorm(cfg, {edge - 1.0, edge + 1.0}, sb2, opt);
  for (const auto& row : res.table("gradnorm_slope").rows)
    std::printf("sigma^2 = %.3f: fitted log-gradient slope %+.4f, theory %+.4f\n", row[0], row[1], row[2]);
  return 0;
}
