#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/random/normal_distribution.hpp>

namespace fnomf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ComplexVector = Eigen::VectorXcd;

inline bool is_power_of_two(Eigen::Index n) { return n >= 2 && (n & (n - 1)) == 0; }

namespace detail {

// In-place radix-2 transform, sign = -1 forward, +1 inverse, unscaled.
inline void fft_inplace(std::vector<std::complex<double>>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(j));
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
}

}  // namespace detail

// X_k = (1/N) sum_n x_n exp(-2 pi i k n / N)
inline ComplexVector dft_forward(const Eigen::Ref<const Vector>& signal) {
  const Eigen::Index n = signal.size();
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("dft_forward: length must be a power of two >= 2, got " +
                                std::to_string(n));
  }
  std::vector<std::complex<double>> a(signal.data(), signal.data() + n);
  detail::fft_inplace(a, -1);
  ComplexVector out(n);
  for (Eigen::Index k = 0; k < n; ++k) out[k] = a[k] / static_cast<double>(n);
  return out;
}

// x_n = sum_k X_k exp(2 pi i k n / N); the spectrum must be conjugate-symmetric.
inline Vector dft_inverse(const Eigen::Ref<const ComplexVector>& spectrum) {
  const Eigen::Index n = spectrum.size();
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("dft_inverse: length must be a power of two >= 2, got " +
                                std::to_string(n));
  }
  for (Eigen::Index k = 0; k < n; ++k) {
    if (std::abs(spectrum[(n - k) % n] - std::conj(spectrum[k])) > 1e-10) {
      throw std::invalid_argument("dft_inverse: spectrum is not conjugate-symmetric");
    }
  }
  std::vector<std::complex<double>> a(spectrum.data(), spectrum.data() + n);
  detail::fft_inplace(a, +1);
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = a[i].real();
  return out;
}

// Gauss rules. nodes/weights are the probabilists' Gauss-Hermite rule (weights sum to 1).
// The radial/angular members form a polar product rule used for bivariate expectations.
struct QuadratureRule {
  int order = 0;
  std::vector<double> nodes;
  std::vector<double> weights;
  std::vector<double> radial_nodes;     // Gauss rule for r exp(-r^2/2) on [0, inf)
  std::vector<double> radial_weights;
  std::vector<double> angular_nodes;    // Gauss-Legendre on [-1, 1]
  std::vector<double> angular_weights;
};

namespace detail {

struct GaussRule {
  std::vector<double> x;
  std::vector<double> w;
};

// alpha[0..n-1], beta[0..n]; beta[0] is the total mass. Golub-Welsch, then Newton
// polish of each node on the orthonormal polynomial and Christoffel weights.
inline GaussRule gauss_from_recurrence(const std::vector<double>& alpha,
                                       const std::vector<double>& beta) {
  const int n = static_cast<int>(alpha.size());
  Vector diag(n);
  Vector sub(std::max(n - 1, 1));
  for (int i = 0; i < n; ++i) diag[i] = alpha[i];
  for (int i = 0; i + 1 < n; ++i) sub[i] = std::sqrt(beta[i + 1]);
  Eigen::SelfAdjointEigenSolver<Matrix> es;
  es.computeFromTridiagonal(diag, sub.head(std::max(n - 1, 0)), Eigen::EigenvaluesOnly);

  GaussRule rule;
  rule.x.resize(n);
  rule.w.resize(n);
  const double p0 = 1.0 / std::sqrt(beta[0]);
  for (int i = 0; i < n; ++i) {
    double x = es.eigenvalues()[i];
    double sum_sq = 0.0;
    for (int iter = 0; iter < 6; ++iter) {
      double pm = 0.0, p = p0, dpm = 0.0, dp = 0.0;
      sum_sq = 0.0;
      for (int k = 0; k < n; ++k) {
        sum_sq += p * p;
        const double sb = std::sqrt(beta[k + 1]);
        const double sbk = std::sqrt(beta[k]);
        const double pn = ((x - alpha[k]) * p - (k > 0 ? sbk * pm : 0.0)) / sb;
        const double dpn = ((x - alpha[k]) * dp + p - (k > 0 ? sbk * dpm : 0.0)) / sb;
        pm = p;
        p = pn;
        dpm = dp;
        dp = dpn;
      }
      const double step = p / dp;
      x -= step;
      if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(x))) break;
    }
    double pm = 0.0, p = p0;
    sum_sq = 0.0;
    for (int k = 0; k < n; ++k) {
      sum_sq += p * p;
      const double pn =
          ((x - alpha[k]) * p - (k > 0 ? std::sqrt(beta[k]) * pm : 0.0)) / std::sqrt(beta[k + 1]);
      pm = p;
      p = pn;
    }
    rule.x[i] = x;
    rule.w[i] = 1.0 / sum_sq;
  }
  return rule;
}

inline GaussRule gauss_legendre(int n) {
  GaussRule rule;
  rule.x.resize(n);
  rule.w.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0;
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double step = p1 / dp;
      x -= step;
      if (std::abs(step) < 1e-16) break;
    }
    rule.x[n - 1 - i] = x;
    rule.w[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  return rule;
}

// Discretized Stieltjes procedure for the weight r exp(-r^2/2) on [0, inf).
inline GaussRule radial_rule(int n) {
  const double r_max = 12.0 + 2.0 * std::sqrt(2.0 * n);
  const int panels = static_cast<int>(std::ceil(r_max / 0.5));
  const GaussRule gl = gauss_legendre(20);
  std::vector<double> x, w;
  x.reserve(panels * gl.x.size());
  w.reserve(panels * gl.x.size());
  const double h = r_max / panels;
  for (int p = 0; p < panels; ++p) {
    for (std::size_t j = 0; j < gl.x.size(); ++j) {
      const double r = h * (p + 0.5 * (gl.x[j] + 1.0));
      x.push_back(r);
      w.push_back(0.5 * h * gl.w[j] * r * std::exp(-0.5 * r * r));
    }
  }
  const std::size_t m = x.size();
  std::vector<double> alpha(n), beta(n + 1);
  double mass = 0.0;
  for (double wi : w) mass += wi;
  beta[0] = mass;
  std::vector<double> p(m, 1.0 / std::sqrt(mass)), pm(m, 0.0), q(m);
  for (int k = 0; k < n; ++k) {
    double a = 0.0;
    for (std::size_t i = 0; i < m; ++i) a += w[i] * x[i] * p[i] * p[i];
    alpha[k] = a;
    const double sbk = std::sqrt(beta[k]);
    double b = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      q[i] = (x[i] - a) * p[i] - (k > 0 ? sbk * pm[i] : 0.0);
      b += w[i] * q[i] * q[i];
    }
    beta[k + 1] = b;
    const double sb = std::sqrt(b);
    for (std::size_t i = 0; i < m; ++i) {
      pm[i] = p[i];
      p[i] = q[i] / sb;
    }
  }
  return gauss_from_recurrence(alpha, beta);
}

}  // namespace detail

// Probabilists' Gauss-Hermite rule of the given order (2..256), exact to degree 2n-1.
inline QuadratureRule gauss_hermite_rule(int order) {
  if (order < 2 || order > 256) {
    throw std::invalid_argument("gauss_hermite_rule: order must be in [2, 256], got " +
                                std::to_string(order));
  }
  std::vector<double> alpha(order, 0.0), beta(order + 1);
  beta[0] = 1.0;
  for (int k = 1; k <= order; ++k) beta[k] = k;
  detail::GaussRule gh = detail::gauss_from_recurrence(alpha, beta);
  // exact symmetry
  for (int i = 0; i < order / 2; ++i) {
    const int j = order - 1 - i;
    const double x = 0.5 * (gh.x[j] - gh.x[i]);
    const double w = 0.5 * (gh.w[i] + gh.w[j]);
    gh.x[i] = -x;
    gh.x[j] = x;
    gh.w[i] = gh.w[j] = w;
  }
  if (order % 2 == 1) gh.x[order / 2] = 0.0;

  QuadratureRule rule;
  rule.order = order;
  rule.nodes = std::move(gh.x);
  rule.weights = std::move(gh.w);
  const int half = std::max(order / 2, 2);
  detail::GaussRule radial = detail::radial_rule(half);
  detail::GaussRule angular = detail::gauss_legendre(half);
  rule.radial_nodes = std::move(radial.x);
  rule.radial_weights = std::move(radial.w);
  rule.angular_nodes = std::move(angular.x);
  rule.angular_weights = std::move(angular.w);
  return rule;
}

// E[f(h)], h ~ N(0, variance)
template <class F>
double gauss_expect(F&& f, double variance, const QuadratureRule& rule) {
  if (!(variance >= 0.0)) throw std::domain_error("gauss_expect: negative variance");
  const double s = std::sqrt(variance);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) acc += rule.weights[i] * f(s * rule.nodes[i]);
  return acc;
}

// E[f(h1) g(h2)] for (h1, h2) ~ N(0, [[var1, cov], [cov, var2]]).
template <class F, class G>
double biv_gauss_expect(F&& f, G&& g, double var1, double var2, double cov,
                        const QuadratureRule& rule) {
  constexpr double tol = 1e-12;
  if (!std::isfinite(var1) || !std::isfinite(var2) || !std::isfinite(cov)) {
    throw std::domain_error("biv_gauss_expect: non-finite covariance");
  }
  const double scale = std::max(1.0, std::abs(var1) + std::abs(var2));
  const double lam_min =
      0.5 * (var1 + var2 - std::sqrt((var1 - var2) * (var1 - var2) + 4.0 * cov * cov));
  if (var1 < -tol * scale || var2 < -tol * scale || lam_min < -tol * scale) {
    throw std::domain_error("biv_gauss_expect: covariance is not positive semidefinite");
  }
  var1 = std::max(var1, 0.0);
  var2 = std::max(var2, 0.0);
  if (var1 == 0.0) {
    const double f0 = f(0.0);
    return gauss_expect([&](double h) { return f0 * g(h); }, var2, rule);
  }
  if (var2 == 0.0) {
    const double g0 = g(0.0);
    return gauss_expect([&](double h) { return f(h) * g0; }, var1, rule);
  }
  const double a = std::sqrt(var1);
  const double corr = cov / std::sqrt(var1 * var2);
  const double b = cov / a;
  const double r2 = var2 - b * b;
  if (std::abs(corr) >= 1.0 - tol || r2 <= 0.0) {
    const double ratio = std::copysign(std::sqrt(var2 / var1), cov);
    return gauss_expect([&](double h) { return f(h) * g(ratio * h); }, var1, rule);
  }
  const double s = std::sqrt(r2);

  // h1 = a z1, h2 = b z1 + s z2 with z = r (cos t, sin t); split t where h1 or h2 vanish.
  constexpr double two_pi = 2.0 * std::numbers::pi;
  auto wrap = [&](double t) {
    t = std::fmod(t, two_pi);
    return t < 0.0 ? t + two_pi : t;
  };
  const double t_h2 = wrap(std::atan2(-b, s));
  std::vector<double> cuts = {0.5 * std::numbers::pi, 1.5 * std::numbers::pi, t_h2,
                              wrap(t_h2 + std::numbers::pi)};
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end(),
                         [](double x, double y) { return std::abs(x - y) < 1e-14; }),
             cuts.end());

  double acc = 0.0;
  for (std::size_t c = 0; c < cuts.size(); ++c) {
    const double lo = cuts[c];
    const double hi = (c + 1 < cuts.size()) ? cuts[c + 1] : cuts[0] + two_pi;
    const double half = 0.5 * (hi - lo);
    const double mid = 0.5 * (hi + lo);
    if (half <= 0.0) continue;
    double sector = 0.0;
    for (std::size_t j = 0; j < rule.angular_nodes.size(); ++j) {
      const double t = mid + half * rule.angular_nodes[j];
      const double ct = std::cos(t);
      const double st = std::sin(t);
      const double u1 = a * ct;
      const double u2 = b * ct + s * st;
      double radial = 0.0;
      for (std::size_t i = 0; i < rule.radial_nodes.size(); ++i) {
        const double r = rule.radial_nodes[i];
        radial += rule.radial_weights[i] * f(r * u1) * g(r * u2);
      }
      sector += rule.angular_weights[j] * radial;
    }
    acc += half * sector;
  }
  return acc / two_pi;
}

// Counter-keyed random streams.
enum class StreamPurpose : std::uint32_t {
  theta = 1,
  xi = 2,
  bias = 3,
  dense = 4,
  input = 5,
  teacher = 6,
  probe = 7,
};

struct StreamKey {
  StreamPurpose purpose = StreamPurpose::probe;
  std::uint32_t layer = 0;
  std::uint32_t mode = 0;
  std::uint32_t replica = 0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root_seed, const StreamKey& key) {
  std::uint64_t h = splitmix64(root_seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(key.purpose));
  h = splitmix64(h ^ key.layer);
  h = splitmix64(h ^ key.mode);
  h = splitmix64(h ^ key.replica);
  return h;
}

struct RngStream {
  std::uint64_t root_seed = 0;
  StreamKey key;
};

// Sequential draws from one stream; sample_normal is a convenience over this.
class NormalSampler {
 public:
  NormalSampler(const RngStream& stream, double variance)
      : engine_(derive_seed(stream.root_seed, stream.key)), sd_(std::sqrt(variance)) {
    if (!(variance >= 0.0) || !std::isfinite(variance)) {
      throw std::invalid_argument("sample_normal: variance must be finite and non-negative");
    }
  }
  double operator()() { return sd_ == 0.0 ? 0.0 : sd_ * dist_(engine_); }

 private:
  std::mt19937_64 engine_;
  boost::random::normal_distribution<double> dist_;
  double sd_;
};

inline std::vector<double> sample_normal(const RngStream& stream, double variance,
                                         std::size_t count) {
  NormalSampler draw(stream, variance);
  std::vector<double> out(count);
  for (auto& v : out) v = draw();
  return out;
}

}  // namespace fnomf
