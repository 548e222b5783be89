#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "activation.hpp"
#include "numerics.hpp"

namespace fnomf {

struct ModeSpec {
  int N = 0;
  int K = 0;
  std::vector<double> c;  // c_k = 2 except 1 at k = 0 and k = N/2
  double S = 0.0;

  static ModeSpec make(int N, int K) {
    if (!is_power_of_two(N)) throw std::invalid_argument("ModeSpec: N must be a power of two >= 2");
    if (K < 1 || K > N / 2 + 1) throw std::invalid_argument("ModeSpec: K must be in [1, N/2 + 1]");
    ModeSpec m;
    m.N = N;
    m.K = K;
    m.c.resize(K);
    for (int k = 0; k < K; ++k) {
      m.c[k] = 2.0 - (k == 0 ? 1.0 : 0.0) - (2 * k == N ? 1.0 : 0.0);
      m.S += m.c[k];
    }
    return m;
  }

  bool full() const { return K == N / 2 + 1; }

  double theta(int k, int a, int b) const {
    const long d = ((static_cast<long>(a) - b) % N + N) % N;
    const long r = (static_cast<long>(k) * d) % N;
    return 2.0 * std::numbers::pi * static_cast<double>(r) / N;
  }

  // cos(theta^(k)) as an N x N matrix; k may exceed K - 1.
  Matrix cos_theta(int k) const {
    Matrix m(N, N);
    for (int a = 0; a < N; ++a)
      for (int b = 0; b < N; ++b) m(a, b) = std::cos(theta(k, a, b));
    return m;
  }
};

using CovMatrix = Matrix;

struct MeanFieldPoint {
  double q = 0.0;
  double c = 1.0;
};

struct ChiSet {
  double chi_q = 0.0;
  double chi_c = 0.0;
  double chi_kappa = 0.0;
  double chi_total = 0.0;
};

struct EigenBasisSet {
  Matrix psi;
  std::vector<Matrix> psi_k;  // psi_k[k - 1] is psi^(k)
};

struct DeviationDecomposition {
  double eps = 0.0;
  std::vector<double> eps_k;
  Matrix residual;
};

struct GradDecomposition {
  std::vector<double> eps_tilde;  // k = 0..K-1
  Matrix residual;
};

struct DcnUpdate {
  double q = 0.0;   // next variance
  double qc = 0.0;  // next covariance
};

inline double relu_j1(double c) {
  if (!(std::abs(c) <= 1.0 + 1e-12)) {
    throw std::domain_error("relu_j1: correlation outside [-1, 1]");
  }
  c = std::clamp(c, -1.0, 1.0);
  return (std::sqrt(1.0 - c * c) + (std::numbers::pi - std::acos(c)) * c) / std::numbers::pi;
}

inline DcnUpdate dcn_map(double q, double c, double sigma2, double sigma_b2, Activation act,
                         const QuadratureRule& rule) {
  if (!std::isfinite(q) || !std::isfinite(c) || q < 0.0) {
    throw std::domain_error("dcn_map: q must be finite and non-negative");
  }
  if (act == Activation::relu) {
    const double base = 0.5 * sigma2 * q;
    return {base + sigma_b2, base * relu_j1(c) + sigma_b2};
  }
  auto phi = [act](double x) { return activate(act, x); };
  const double qq = sigma2 * gauss_expect([&](double h) { return phi(h) * phi(h); }, q, rule);
  const double qc = sigma2 * biv_gauss_expect(phi, phi, q, q, q * c, rule);
  return {qq + sigma_b2, qc + sigma_b2};
}

namespace detail {

inline double variance_map(double q, double sigma2, double sigma_b2, Activation act,
                           const QuadratureRule& rule) {
  if (act == Activation::relu) return 0.5 * sigma2 * q + sigma_b2;
  return sigma2 * gauss_expect([act](double h) {
           const double p = activate(act, h);
           return p * p;
         }, q, rule) + sigma_b2;
}

// d/dq of the variance map, i.e. chi_q at variance q.
inline double variance_map_slope(double q, double sigma2, Activation act, const QuadratureRule& rule) {
  if (act == Activation::relu) return 0.5 * sigma2;
  return sigma2 * gauss_expect([act](double h) {
           const double d1 = activate_d1(act, h);
           return d1 * d1 + activate_d2(act, h) * activate(act, h);
         }, q, rule);
}

}  // namespace detail

inline MeanFieldPoint solve_q_star(double sigma2, double sigma_b2, Activation act,
                                   const QuadratureRule& rule, double q0 = 1.0) {
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw std::invalid_argument("solve_q_star: sigma2 must be positive");
  if (!(sigma_b2 >= 0.0) || !std::isfinite(sigma_b2)) throw std::invalid_argument("solve_q_star: sigma_b2 must be non-negative");
  double q = q0;
  for (int it = 0; it < 10000; ++it) {
    const double next = detail::variance_map(q, sigma2, sigma_b2, act, rule);
    if (!std::isfinite(next) || next > 1e12) {
      throw std::runtime_error("solve_q_star: variance diverges (no finite fixed point)");
    }
    if (std::abs(next - q) <= 1e-12) return {next, 1.0};
    q = next;
  }
  // Slow geometric convergence near marginal stability: finish with Newton on V(q) - q.
  for (int it = 0; it < 100; ++it) {
    const double g = detail::variance_map(q, sigma2, sigma_b2, act, rule) - q;
    const double dg = detail::variance_map_slope(q, sigma2, act, rule) - 1.0;
    if (dg == 0.0) break;
    const double next = std::max(q - g / dg, 0.0);
    const bool done = std::abs(next - q) <= 1e-15 * std::max(1.0, q);
    q = next;
    if (done) break;
  }
  const double residual = std::abs(detail::variance_map(q, sigma2, sigma_b2, act, rule) - q);
  if (!(residual <= 1e-12) || !(detail::variance_map_slope(q, sigma2, act, rule) < 1.0)) {
    throw std::runtime_error("solve_q_star: iteration does not converge to a finite fixed point");
  }
  return {q, 1.0};
}

inline ChiSet chi_set(const MeanFieldPoint& point, double sigma2, Activation act,
                      const ModeSpec& mode, const QuadratureRule& rule) {
  ChiSet chis;
  if (act == Activation::relu) {
    chis.chi_q = 0.5 * sigma2;
    chis.chi_c = sigma2 * (std::numbers::pi - std::acos(std::clamp(point.c, -1.0, 1.0))) /
                 (2.0 * std::numbers::pi);
    chis.chi_kappa = 0.0;
  } else {
    const double q = point.q;
    const double cov = q * point.c;
    auto phi = [act](double x) { return activate(act, x); };
    auto d1 = [act](double x) { return activate_d1(act, x); };
    auto d2 = [act](double x) { return activate_d2(act, x); };
    chis.chi_q = detail::variance_map_slope(q, sigma2, act, rule);
    chis.chi_c = sigma2 * biv_gauss_expect(d1, d1, q, q, cov, rule);
    chis.chi_kappa = 0.5 * sigma2 *
                     (biv_gauss_expect(d2, phi, q, q, cov, rule) + biv_gauss_expect(phi, d2, q, q, cov, rule));
  }
  const double frac = mode.S / mode.N;
  chis.chi_total = frac * chis.chi_q + (1.0 - frac) * (chis.chi_kappa + chis.chi_c);
  return chis;
}

namespace detail {

inline void check_square(const Matrix& m, int n, const char* what) {
  if (m.rows() != n || m.cols() != n) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(n) + " x " +
                                std::to_string(n) + " matrix");
  }
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

// Rounded to 12 significant digits.
inline std::array<double, 3> triple_key(double v1, double v2, double cov) {
  if (v2 < v1) std::swap(v1, v2);
  auto r = [](double x) {
    if (x == 0.0) return 0.0;
    const double scale = std::pow(10.0, 11.0 - std::floor(std::log10(std::abs(x))));
    return std::round(x * scale) / scale;
  };
  return {r(v1), r(v2), r(cov)};
}

// sum_{b,b'} cos(theta^(k)_{b,b'}) M_{b,b'} for k < K
inline Vector cos_contract(const Matrix& m, const ModeSpec& mode) {
  const int n = mode.N;
  Vector diag_sums = Vector::Zero(n);  // sum over b of M_{b, b - d}
  for (int b = 0; b < n; ++b)
    for (int bp = 0; bp < n; ++bp) diag_sums[((b - bp) % n + n) % n] += m(b, bp);
  Vector t(mode.K);
  for (int k = 0; k < mode.K; ++k) {
    double acc = 0.0;
    for (int d = 0; d < n; ++d) acc += std::cos(mode.theta(k, d, 0)) * diag_sums[d];
    t[k] = acc;
  }
  return t;
}

}  // namespace detail

// Pairwise expectation M_{b,b'} = E[phi(H_b) phi(H_b')] with a cache on rounded triples.
inline Matrix pairwise_expectation(const CovMatrix& cov, Activation act, const QuadratureRule& rule) {
  const Eigen::Index n = cov.rows();
  auto phi = [act](double x) { return activate(act, x); };
  std::map<std::array<double, 3>, double> cache;
  Matrix m(n, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    for (Eigen::Index bp = 0; bp < n; ++bp) {
      const double v1 = cov(b, b), v2 = cov(bp, bp), c12 = cov(b, bp);
      const auto key = detail::triple_key(v1, v2, c12);
      auto it = cache.find(key);
      if (it == cache.end()) {
        it = cache.emplace(key, biv_gauss_expect(phi, phi, v1, v2, c12, rule)).first;
      }
      m(b, bp) = it->second;
    }
  }
  return m;
}

// Iterated covariance map. Each pairwise 2x2 block must be PSD (checked in biv_gauss_expect).
inline CovMatrix fno_c_map(const CovMatrix& cov, double sigma2, double sigma_b2, Activation act,
                           const ModeSpec& mode, const QuadratureRule& rule) {
  detail::check_square(cov, mode.N, "fno_c_map");
  const Matrix m = pairwise_expectation(cov, act, rule);
  const Vector t = detail::cos_contract(m, mode);
  Matrix out = Matrix::Constant(mode.N, mode.N, sigma_b2);
  const double scale = sigma2 / (static_cast<double>(mode.N) * mode.N);
  for (int k = 0; k < mode.K; ++k) out += (scale * mode.c[k] * t[k]) * mode.cos_theta(k);
  return out;
}

inline CovMatrix initial_covariance_from_input(const Matrix& input, double sigma2, double sigma_b2,
                                               const ModeSpec& mode) {
  if (input.rows() != mode.N) throw std::invalid_argument("initial_covariance_from_input: input must have N rows");
  if (!input.allFinite()) throw std::invalid_argument("initial_covariance_from_input: non-finite input");
  Vector power = Vector::Zero(mode.K);
  for (Eigen::Index i = 0; i < input.cols(); ++i) {
    const ComplexVector spec = dft_forward(input.col(i));
    for (int k = 0; k < mode.K; ++k) power[k] += std::norm(spec[k]);
  }
  power /= static_cast<double>(input.cols());
  Matrix out = Matrix::Constant(mode.N, mode.N, sigma_b2);
  for (int k = 0; k < mode.K; ++k) out += (sigma2 * mode.c[k] * power[k]) * mode.cos_theta(k);
  return out;
}

inline EigenBasisSet build_eigenbases(const ChiSet& chis, const ModeSpec& mode) {
  const int n = mode.N;
  EigenBasisSet out;
  if (mode.full()) {
    out.psi = Matrix::Ones(n, n);
    for (int k = 1; k < mode.K; ++k) out.psi_k.push_back(mode.cos_theta(k) - Matrix::Identity(n, n));
    return out;
  }
  if (chis.chi_kappa == 0.0) {
    throw std::domain_error("build_eigenbases: chi_kappa = 0 with truncated modes leaves psi undefined");
  }
  Matrix weighted = Matrix::Zero(n, n);
  for (int s = 0; s < mode.K; ++s) weighted += mode.c[s] * mode.cos_theta(s);
  const double ratio = (chis.chi_kappa + chis.chi_c - chis.chi_q) / chis.chi_kappa;
  out.psi = Matrix::Ones(n, n) - (ratio / n) * weighted;
  for (int k = 1; k < mode.K; ++k) out.psi_k.push_back(mode.cos_theta(k) - weighted / mode.S);
  return out;
}

inline Vector vec(const Matrix& m) {
  Vector v(m.size());
  for (Eigen::Index a = 0; a < m.rows(); ++a)
    for (Eigen::Index b = 0; b < m.cols(); ++b) v[a * m.cols() + b] = m(a, b);
  return v;
}

inline Matrix unvec(const Vector& v, int n) {
  Matrix m(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) m(a, b) = v[a * n + b];
  return m;
}

// Row (a, a') and column (b, b') are flattened as a * N + a'.
inline Matrix build_jacobian(const ChiSet& chis, const ModeSpec& mode) {
  const int n = mode.N;
  if (n > 32) throw std::invalid_argument("build_jacobian: N must be <= 32");
  const int n2 = n * n;
  Matrix cos_flat(mode.K, n2);
  for (int k = 0; k < mode.K; ++k) cos_flat.row(k) = vec(mode.cos_theta(k)).transpose();
  Matrix jac = Matrix::Zero(n2, n2);
  for (int col = 0; col < n2; ++col) {
    const bool diag = (col / n) == (col % n);
    for (int k = 0; k < mode.K; ++k) {
      double w = diag ? chis.chi_q - chis.chi_kappa + (k == 0 ? n * chis.chi_kappa : 0.0) : chis.chi_c;
      w *= mode.c[k] * cos_flat(k, col) / (static_cast<double>(n) * n);
      jac.col(col) += w * cos_flat.row(k).transpose();
    }
  }
  return jac;
}

inline DeviationDecomposition decompose_deviation(const Matrix& e, const EigenBasisSet& bases) {
  const int n = static_cast<int>(bases.psi.rows());
  detail::check_square(e, n, "decompose_deviation");
  const int kb = 1 + static_cast<int>(bases.psi_k.size());
  Matrix a(n * n, kb);
  a.col(0) = vec(bases.psi);
  for (int k = 1; k < kb; ++k) a.col(k) = vec(bases.psi_k[k - 1]);
  const Matrix gram = a.transpose() * a;
  const Vector rhs = a.transpose() * vec(e);
  Eigen::JacobiSVD<Matrix> svd(gram);
  const Vector sv = svd.singularValues();
  if (sv[0] == 0.0 || sv[kb - 1] <= 1e-300) throw std::domain_error("decompose_deviation: singular Gram matrix");
  Vector coef;
  if (sv[0] / sv[kb - 1] > 1e12) {
    coef = Eigen::CompleteOrthogonalDecomposition<Matrix>(gram).pseudoInverse() * rhs;
  } else {
    coef = gram.ldlt().solve(rhs);
  }
  DeviationDecomposition dec;
  dec.eps = coef[0];
  for (int k = 1; k < kb; ++k) dec.eps_k.push_back(coef[k]);
  dec.residual = e - unvec(a * coef, n);
  return dec;
}

inline Matrix predict_deviation(const DeviationDecomposition& dec, const EigenBasisSet& bases,
                                const ChiSet& chis, int layers) {
  if (layers < 0) throw std::invalid_argument("predict_deviation: layers must be >= 0");
  Matrix out = std::pow(chis.chi_total, layers) * dec.eps * bases.psi;
  const double g = std::pow(chis.chi_c, layers);
  for (std::size_t k = 0; k < dec.eps_k.size(); ++k) out += g * dec.eps_k[k] * bases.psi_k[k];
  return out;
}

inline CovMatrix backprop_cov_map(const CovMatrix& grad_cov, const ChiSet& chis, const ModeSpec& mode) {
  detail::check_square(grad_cov, mode.N, "backprop_cov_map");
  const int n = mode.N;
  Vector s = Vector::Zero(n);  // s[d] = sum over b of G_{b, b - d}
  for (int b = 0; b < n; ++b)
    for (int bp = 0; bp < n; ++bp) s[((b - bp) % n + n) % n] += grad_cov(b, bp);
  Vector kernel = Vector::Zero(n);  // sum_k c_k cos(2 pi k x / N)
  for (int x = 0; x < n; ++x)
    for (int k = 0; k < mode.K; ++k) kernel[x] += mode.c[k] * std::cos(mode.theta(k, x, 0));
  Vector by_lag = Vector::Zero(n);
  for (int e = 0; e < n; ++e)
    for (int d = 0; d < n; ++d) by_lag[e] += s[d] * kernel[((d - e) % n + n) % n];
  by_lag *= chis.chi_c / (static_cast<double>(n) * n);
  Matrix out(n, n);
  for (int a = 0; a < n; ++a)
    for (int ap = 0; ap < n; ++ap) out(a, ap) = by_lag[((a - ap) % n + n) % n];
  return out;
}

// Orthogonal projection onto cos(theta^(k)), k < K.
inline GradDecomposition decompose_grad_cov(const CovMatrix& grad_cov, const ModeSpec& mode) {
  detail::check_square(grad_cov, mode.N, "decompose_grad_cov");
  GradDecomposition dec;
  dec.residual = grad_cov;
  const double n2 = static_cast<double>(mode.N) * mode.N;
  for (int k = 0; k < mode.K; ++k) {
    const Matrix ck = mode.cos_theta(k);
    const double coef = ck.cwiseProduct(grad_cov).sum() * mode.c[k] / n2;
    dec.eps_tilde.push_back(coef);
    dec.residual -= coef * ck;
  }
  return dec;
}

inline CovMatrix predict_grad_cov(const GradDecomposition& dec, const ChiSet& chis, const ModeSpec& mode,
                                  int from_layer, int to_layer) {
  if (to_layer > from_layer) throw std::invalid_argument("predict_grad_cov: to_layer must be <= from_layer");
  if (static_cast<int>(dec.eps_tilde.size()) != mode.K) {
    throw std::invalid_argument("predict_grad_cov: decomposition does not match mode spec");
  }
  const double g = std::pow(chis.chi_c, from_layer - to_layer);
  Matrix out = Matrix::Zero(mode.N, mode.N);
  for (int k = 0; k < mode.K; ++k) out += g * dec.eps_tilde[k] * mode.cos_theta(k);
  return out;
}

// chi_c at the c* = 1 fixed point; the ReLU value is q-independent.
inline double chi_c_at_fixed_point(double sigma2, double sigma_b2, Activation act, const QuadratureRule& rule) {
  if (act == Activation::relu) return 0.5 * sigma2;
  const MeanFieldPoint p = solve_q_star(sigma2, sigma_b2, act, rule);
  auto d1 = [act](double x) { return activate_d1(act, x); };
  return sigma2 * biv_gauss_expect(d1, d1, p.q, p.q, p.q, rule);
}

inline double find_edge_sigma2(double sigma_b2, Activation act, double lo, double hi,
                               const QuadratureRule& rule) {
  if (!(lo > 0.0) || !(hi > lo)) throw std::invalid_argument("find_edge_sigma2: need 0 < lo < hi");
  double f_lo = chi_c_at_fixed_point(lo, sigma_b2, act, rule) - 1.0;
  const double f_hi = chi_c_at_fixed_point(hi, sigma_b2, act, rule) - 1.0;
  if (f_lo == 0.0) return lo;
  if (f_hi == 0.0) return hi;
  if ((f_lo < 0.0) == (f_hi < 0.0)) {
    throw std::domain_error("find_edge_sigma2: chi_c - 1 does not change sign over the bracket");
  }
  while (hi - lo > 1e-6) {
    const double mid = 0.5 * (lo + hi);
    const double f_mid = chi_c_at_fixed_point(mid, sigma_b2, act, rule) - 1.0;
    if (f_mid == 0.0) return mid;
    if ((f_mid < 0.0) == (f_lo < 0.0)) {
      lo = mid;
      f_lo = f_mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

inline double diag_global_cnn_check(const CovMatrix& cov, double sigma2, double sigma_b2, Activation act,
                                    const ModeSpec& mode, const QuadratureRule& rule) {
  if (!mode.full()) throw std::invalid_argument("diag_global_cnn_check: requires K = N/2 + 1");
  const CovMatrix mapped = fno_c_map(cov, sigma2, sigma_b2, act, mode, rule);
  double mean_sq = 0.0;
  for (int b = 0; b < mode.N; ++b) {
    mean_sq += gauss_expect([act](double h) {
      const double p = activate(act, h);
      return p * p;
    }, std::max(cov(b, b), 0.0), rule);
  }
  const double cnn = sigma2 * mean_sq / mode.N + sigma_b2;
  double worst = 0.0;
  for (int a = 0; a < mode.N; ++a) worst = std::max(worst, std::abs(mapped(a, a) - cnn));
  return worst;
}

// Recursion for the variant with a dense pointwise term (split init: spectral weights at
// sigma^2/(4D), dense at sigma^2/(2D)).
inline CovMatrix fno_c_map_original(const CovMatrix& cov, double sigma2, double sigma_b2, Activation act,
                                    const ModeSpec& mode, const QuadratureRule& rule) {
  detail::check_square(cov, mode.N, "fno_c_map_original");
  const Matrix m = pairwise_expectation(cov, act, rule);
  const Vector t = detail::cos_contract(m, mode);
  Matrix out = Matrix::Constant(mode.N, mode.N, sigma_b2) + (0.5 * sigma2) * m;
  const double scale = 0.5 * sigma2 / (static_cast<double>(mode.N) * mode.N);
  for (int k = 0; k < mode.K; ++k) out += (scale * mode.c[k] * t[k]) * mode.cos_theta(k);
  return out;
}

inline CovMatrix initial_covariance_original(const Matrix& input, double sigma2, double sigma_b2,
                                             const ModeSpec& mode) {
  const CovMatrix spectral = initial_covariance_from_input(input, 0.5 * sigma2, 0.0, mode);
  const Matrix dense = (input * input.transpose()) / static_cast<double>(input.cols());
  return spectral + (0.5 * sigma2) * dense + Matrix::Constant(mode.N, mode.N, sigma_b2);
}

}  // namespace fnomf
