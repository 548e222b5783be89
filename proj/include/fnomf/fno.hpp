#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "activation.hpp"
#include "numerics.hpp"

namespace fnomf {

enum class Variant { simplified, original };
enum class InitScheme { gaussian_generic, he_simplified, original_split };

inline std::string_view to_string(Variant v) {
  return v == Variant::simplified ? "simplified" : "original";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "simplified") return Variant::simplified;
  if (name == "original") return Variant::original;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

inline std::string_view to_string(InitScheme s) {
  switch (s) {
    case InitScheme::gaussian_generic: return "gaussian_generic";
    case InitScheme::he_simplified: return "he_simplified";
    case InitScheme::original_split: return "original_split";
  }
  return "?";
}

inline InitScheme parse_scheme(std::string_view name) {
  if (name == "gaussian_generic") return InitScheme::gaussian_generic;
  if (name == "he_simplified") return InitScheme::he_simplified;
  if (name == "original_split") return InitScheme::original_split;
  throw std::invalid_argument("unknown init scheme '" + std::string(name) + "'");
}

struct FnoConfig {
  int N = 64;  // spatial size, power of two
  int D = 32;  // channel width
  int K = 12;  // retained modes 0..K-1
  int L = 64;  // depth
  Activation activation = Activation::relu;
  Variant variant = Variant::simplified;

  void validate() const {
    if (!is_power_of_two(N)) throw std::invalid_argument("N must be a power of two >= 2");
    if (D < 1) throw std::invalid_argument("D must be positive");
    if (K < 1 || K > N / 2 + 1) {
      throw std::invalid_argument("K must satisfy 1 <= K <= N/2 + 1 (got K=" + std::to_string(K) +
                                  ", N=" + std::to_string(N) + ")");
    }
    if (L < 1) throw std::invalid_argument("L must be positive");
  }
};

struct InitConfig {
  double sigma2 = 2.0;
  double sigma_b2 = 0.0;
  InitScheme scheme = InitScheme::gaussian_generic;
  std::uint64_t root_seed = 0;
  std::uint32_t replica = 0;
};

struct LayerVariances {
  double theta = 0.0;
  double xi = 0.0;
  double dense = 0.0;  // zero for the simplified variant
  double bias = 0.0;
};

inline void validate_init(const FnoConfig& cfg, const InitConfig& init) {
  cfg.validate();
  if (!std::isfinite(init.sigma2) || init.sigma2 < 0.0) {
    throw std::invalid_argument("sigma2 must be finite and non-negative");
  }
  if (!std::isfinite(init.sigma_b2) || init.sigma_b2 < 0.0) {
    throw std::invalid_argument("sigma_b2 must be finite and non-negative");
  }
  const bool split = init.scheme == InitScheme::original_split;
  if (split != (cfg.variant == Variant::original)) {
    throw std::invalid_argument("init scheme '" + std::string(to_string(init.scheme)) +
                                "' does not match variant '" + std::string(to_string(cfg.variant)) +
                                "'");
  }
}

inline LayerVariances init_variances(const FnoConfig& cfg, const InitConfig& init) {
  validate_init(cfg, init);
  const double d = cfg.D;
  LayerVariances v;
  switch (init.scheme) {
    case InitScheme::gaussian_generic:
      v.theta = v.xi = init.sigma2 / (2.0 * d);
      v.bias = init.sigma_b2;
      break;
    case InitScheme::he_simplified:
      v.theta = v.xi = 2.0 / (2.0 * d);
      v.bias = 0.0;
      break;
    case InitScheme::original_split:
      v.theta = v.xi = init.sigma2 / (4.0 * d);
      v.dense = init.sigma2 / (2.0 * d);
      v.bias = init.sigma_b2;
      break;
  }
  return v;
}

// Xi carries no weight at self-conjugate modes.
inline bool xi_active(const FnoConfig& cfg, int k) { return k != 0 && 2 * k != cfg.N; }

struct FnoLayer {
  std::vector<Matrix> theta;  // K matrices, D x D, indexed (input channel, output channel)
  std::vector<Matrix> xi;
  Vector bias;
  Matrix dense;  // empty for the simplified variant
};

struct FnoParams {
  std::vector<FnoLayer> layers;  // layers[l - 1] is layer l
};

inline RngStream param_stream(const InitConfig& init, StreamPurpose purpose, int layer, int mode) {
  return RngStream{init.root_seed, StreamKey{purpose, static_cast<std::uint32_t>(layer),
                                             static_cast<std::uint32_t>(mode), init.replica}};
}

namespace detail {

inline Matrix sample_matrix(const RngStream& stream, double variance, int d) {
  NormalSampler draw(stream, variance);
  Matrix m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = draw();
  return m;
}

inline Vector sample_vector(const RngStream& stream, double variance, int d) {
  NormalSampler draw(stream, variance);
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = draw();
  return v;
}

}  // namespace detail

inline FnoParams init_params(const FnoConfig& cfg, const InitConfig& init) {
  const LayerVariances var = init_variances(cfg, init);
  FnoParams params;
  params.layers.resize(cfg.L);
  for (int l = 1; l <= cfg.L; ++l) {
    FnoLayer& layer = params.layers[l - 1];
    for (int k = 0; k < cfg.K; ++k) {
      layer.theta.push_back(
          detail::sample_matrix(param_stream(init, StreamPurpose::theta, l, k), var.theta, cfg.D));
      if (xi_active(cfg, k)) {
        layer.xi.push_back(
            detail::sample_matrix(param_stream(init, StreamPurpose::xi, l, k), var.xi, cfg.D));
      } else {
        layer.xi.push_back(Matrix::Zero(cfg.D, cfg.D));
      }
    }
    layer.bias = detail::sample_vector(param_stream(init, StreamPurpose::bias, l, 0), var.bias, cfg.D);
    if (cfg.variant == Variant::original) {
      layer.dense =
          detail::sample_matrix(param_stream(init, StreamPurpose::dense, l, 0), var.dense, cfg.D);
    }
  }
  return params;
}

// Real-valued spectral operators for the retained modes.
struct SpectralBasis {
  Matrix cos;    // K x N, cos(2 pi k n / N)
  Matrix sin;    // K x N
  Vector amp;    // sqrt(2 c_k): 2 for interior modes, sqrt(2) at k in {0, N/2}

  static SpectralBasis make(int N, int K) {
    SpectralBasis b;
    b.cos.resize(K, N);
    b.sin.resize(K, N);
    b.amp.resize(K);
    for (int k = 0; k < K; ++k) {
      for (int n = 0; n < N; ++n) {
        const long r = (static_cast<long>(k) * n) % N;
        const double ang = 2.0 * std::numbers::pi * static_cast<double>(r) / N;
        b.cos(k, n) = std::cos(ang);
        b.sin(k, n) = std::sin(ang);
      }
      const bool self_conj = (k == 0 || 2 * k == N);
      b.amp[k] = self_conj ? std::sqrt(2.0) : 2.0;
    }
    return b;
  }
};

struct ForwardTrace {
  std::vector<Matrix> pre;   // pre[l], l = 1..L, N x D; pre[0] is empty
  std::vector<Matrix> post;  // post[0] = input, post[l] = phi(pre[l])
};

// Linear part of one layer without bias: truncated spectral convolution, plus X W for the
// original variant.
inline Matrix spectral_conv(const FnoLayer& layer, const SpectralBasis& basis, const Matrix& x) {
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  const Eigen::Index kk = basis.cos.rows();
  const Matrix p = inv_n * basis.cos * x;
  const Matrix q = -inv_n * basis.sin * x;
  Matrix re(kk, x.cols()), im(kk, x.cols());
  for (Eigen::Index k = 0; k < kk; ++k) {
    re.row(k) = p.row(k) * layer.theta[k] - q.row(k) * layer.xi[k];
    im.row(k) = p.row(k) * layer.xi[k] + q.row(k) * layer.theta[k];
  }
  Matrix h = basis.cos.transpose() * (basis.amp.asDiagonal() * re) -
             basis.sin.transpose() * (basis.amp.asDiagonal() * im);
  if (layer.dense.size() > 0) h.noalias() += x * layer.dense;
  return h;
}

inline Matrix spectral_conv_adjoint(const FnoLayer& layer, const SpectralBasis& basis, const Matrix& g) {
  const double inv_n = 1.0 / static_cast<double>(g.rows());
  const Eigen::Index kk = basis.cos.rows();
  const Matrix g_re = basis.amp.asDiagonal() * (basis.cos * g);
  const Matrix g_im = -(basis.amp.asDiagonal() * (basis.sin * g));
  Matrix g_p(kk, g.cols()), g_q(kk, g.cols());
  for (Eigen::Index k = 0; k < kk; ++k) {
    g_p.row(k) = g_re.row(k) * layer.theta[k].transpose() + g_im.row(k) * layer.xi[k].transpose();
    g_q.row(k) = -g_re.row(k) * layer.xi[k].transpose() + g_im.row(k) * layer.theta[k].transpose();
  }
  Matrix g_x = inv_n * (basis.cos.transpose() * g_p - basis.sin.transpose() * g_q);
  if (layer.dense.size() > 0) g_x.noalias() += g * layer.dense.transpose();
  return g_x;
}

namespace detail {

inline void check_input(const FnoConfig& cfg, const Matrix& input) {
  if (input.rows() != cfg.N || input.cols() != cfg.D) {
    throw std::invalid_argument("input must be N x D (" + std::to_string(cfg.N) + " x " +
                                std::to_string(cfg.D) + ")");
  }
  if (!input.allFinite()) throw std::invalid_argument("input contains non-finite values");
}

inline Matrix apply_activation(Activation act, const Matrix& h) {
  return h.unaryExpr([act](double x) { return activate(act, x); });
}

}  // namespace detail

inline ForwardTrace forward(const FnoParams& params, const FnoConfig& cfg, const Matrix& input) {
  cfg.validate();
  detail::check_input(cfg, input);
  if (static_cast<int>(params.layers.size()) != cfg.L) {
    throw std::invalid_argument("parameter depth does not match config");
  }
  const SpectralBasis basis = SpectralBasis::make(cfg.N, cfg.K);
  ForwardTrace trace;
  trace.pre.resize(cfg.L + 1);
  trace.post.resize(cfg.L + 1);
  trace.post[0] = input;
  for (int l = 1; l <= cfg.L; ++l) {
    const FnoLayer& layer = params.layers[l - 1];
    Matrix h = spectral_conv(layer, basis, trace.post[l - 1]);
    h.rowwise() += layer.bias.transpose();
    trace.post[l] = detail::apply_activation(cfg.activation, h);
    trace.pre[l] = std::move(h);
  }
  return trace;
}

// Same network as forward(init_params(cfg, init), cfg, input) but weights are drawn row by
// row and never stored, so wide networks fit in memory.
inline ForwardTrace forward_streamed(const FnoConfig& cfg, const InitConfig& init,
                                     const Matrix& input) {
  const LayerVariances var = init_variances(cfg, init);
  detail::check_input(cfg, input);
  const SpectralBasis basis = SpectralBasis::make(cfg.N, cfg.K);
  const double inv_n = 1.0 / cfg.N;
  const int d = cfg.D;
  ForwardTrace trace;
  trace.pre.resize(cfg.L + 1);
  trace.post.resize(cfg.L + 1);
  trace.post[0] = input;
  Eigen::RowVectorXd row_t(d), row_x(d);
  for (int l = 1; l <= cfg.L; ++l) {
    const Matrix& x = trace.post[l - 1];
    const Matrix p = inv_n * basis.cos * x;
    const Matrix q = -inv_n * basis.sin * x;
    Matrix re = Matrix::Zero(cfg.K, d), im = Matrix::Zero(cfg.K, d);
    for (int k = 0; k < cfg.K; ++k) {
      NormalSampler draw_t(param_stream(init, StreamPurpose::theta, l, k), var.theta);
      const bool use_xi = xi_active(cfg, k);
      NormalSampler draw_x(param_stream(init, StreamPurpose::xi, l, k), use_xi ? var.xi : 0.0);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) row_t[j] = draw_t();
        re.row(k) += p(k, i) * row_t;
        im.row(k) += q(k, i) * row_t;
        if (use_xi) {
          for (int j = 0; j < d; ++j) row_x[j] = draw_x();
          re.row(k) -= q(k, i) * row_x;
          im.row(k) += p(k, i) * row_x;
        }
      }
    }
    Matrix h = basis.cos.transpose() * (basis.amp.asDiagonal() * re) -
               basis.sin.transpose() * (basis.amp.asDiagonal() * im);
    if (cfg.variant == Variant::original) {
      NormalSampler draw_w(param_stream(init, StreamPurpose::dense, l, 0), var.dense);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) row_t[j] = draw_w();
        h.noalias() += x.col(i) * row_t;
      }
    }
    const Vector bias =
        detail::sample_vector(param_stream(init, StreamPurpose::bias, l, 0), var.bias, d);
    h.rowwise() += bias.transpose();
    trace.post[l] = detail::apply_activation(cfg.activation, h);
    trace.pre[l] = std::move(h);
  }
  return trace;
}

inline double loss_abs_mean(const Matrix& output) { return output.cwiseAbs().mean(); }

inline Matrix loss_abs_mean_grad(const Matrix& output) {
  const double scale = 1.0 / static_cast<double>(output.size());
  return output.unaryExpr([scale](double x) {
    return x > 0.0 ? scale : (x < 0.0 ? -scale : 0.0);
  });
}

struct GradientTrace {
  std::vector<Matrix> grad_pre;  // dLoss/dpre[l], l = 1..L; grad_pre[0] is empty
  Matrix grad_input;
  std::vector<std::vector<Matrix>> grad_theta;  // [l - 1][k]
  std::vector<std::vector<Matrix>> grad_xi;
  std::vector<Vector> grad_bias;
  std::vector<Matrix> grad_dense;  // empty matrices for the simplified variant
};

// Same as backward, but seeded with dLoss/dpre[L] (linear readout).
inline GradientTrace backward_from_pre(const FnoParams& params, const FnoConfig& cfg,
                                       const ForwardTrace& trace, const Matrix& grad_pre_last) {
  cfg.validate();
  if (static_cast<int>(trace.pre.size()) != cfg.L + 1) {
    throw std::invalid_argument("trace depth does not match config");
  }
  if (grad_pre_last.rows() != cfg.N || grad_pre_last.cols() != cfg.D) {
    throw std::invalid_argument("output gradient must be N x D");
  }
  const SpectralBasis basis = SpectralBasis::make(cfg.N, cfg.K);
  const double inv_n = 1.0 / cfg.N;
  GradientTrace g;
  g.grad_pre.resize(cfg.L + 1);
  g.grad_theta.resize(cfg.L);
  g.grad_xi.resize(cfg.L);
  g.grad_bias.resize(cfg.L);
  g.grad_dense.resize(cfg.L);

  auto dphi = [&](const Matrix& h) {
    return h.unaryExpr([&](double x) { return activate_d1(cfg.activation, x); });
  };
  g.grad_pre[cfg.L] = grad_pre_last;
  for (int l = cfg.L; l >= 1; --l) {
    const FnoLayer& layer = params.layers[l - 1];
    const Matrix& x = trace.post[l - 1];
    const Matrix& gh = g.grad_pre[l];
    const Matrix p = inv_n * basis.cos * x;
    const Matrix q = -inv_n * basis.sin * x;
    const Matrix g_re = basis.amp.asDiagonal() * (basis.cos * gh);
    const Matrix g_im = -(basis.amp.asDiagonal() * (basis.sin * gh));
    auto& gt = g.grad_theta[l - 1];
    auto& gx = g.grad_xi[l - 1];
    gt.resize(cfg.K);
    gx.resize(cfg.K);
    for (int k = 0; k < cfg.K; ++k) {
      gt[k] = p.row(k).transpose() * g_re.row(k) + q.row(k).transpose() * g_im.row(k);
      if (xi_active(cfg, k)) {
        gx[k] = -q.row(k).transpose() * g_re.row(k) + p.row(k).transpose() * g_im.row(k);
      } else {
        gx[k] = Matrix::Zero(cfg.D, cfg.D);
      }
    }
    if (cfg.variant == Variant::original) g.grad_dense[l - 1] = x.transpose() * gh;
    Matrix g_x = spectral_conv_adjoint(layer, basis, gh);
    g.grad_bias[l - 1] = gh.colwise().sum().transpose();
    if (l > 1) {
      g.grad_pre[l - 1] = g_x.cwiseProduct(dphi(trace.pre[l - 1]));
    } else {
      g.grad_input = std::move(g_x);
    }
  }
  return g;
}

// grad_output is dLoss/dpost[L].
inline GradientTrace backward(const FnoParams& params, const FnoConfig& cfg,
                              const ForwardTrace& trace, const Matrix& grad_output) {
  if (static_cast<int>(trace.pre.size()) != cfg.L + 1) {
    throw std::invalid_argument("trace depth does not match config");
  }
  if (grad_output.rows() != cfg.N || grad_output.cols() != cfg.D) {
    throw std::invalid_argument("grad_output must be N x D");
  }
  const Matrix dphi = trace.pre[cfg.L].unaryExpr([&](double x) { return activate_d1(cfg.activation, x); });
  return backward_from_pre(params, cfg, trace, grad_output.cwiseProduct(dphi));
}

// (1/D) sum_d h_d h_d^T over the pre-activations of one layer.
inline Matrix empirical_cov(const ForwardTrace& trace, int layer) {
  if (layer < 1 || layer >= static_cast<int>(trace.pre.size())) {
    throw std::out_of_range("empirical_cov: layer out of range");
  }
  const Matrix& h = trace.pre[layer];
  return (h * h.transpose()) / static_cast<double>(h.cols());
}

// (1/D) sum over entries of dLoss/dpre[layer] squared.
inline double empirical_grad_norm(const GradientTrace& grads, int layer) {
  if (layer < 1 || layer >= static_cast<int>(grads.grad_pre.size())) {
    throw std::out_of_range("empirical_grad_norm: layer out of range");
  }
  const Matrix& g = grads.grad_pre[layer];
  return g.squaredNorm() / static_cast<double>(g.cols());
}

inline Matrix standard_normal_input(int N, int D, std::uint64_t seed, std::uint32_t replica = 0) {
  NormalSampler draw(RngStream{seed, StreamKey{StreamPurpose::input, 0, 0, replica}}, 1.0);
  Matrix x(N, D);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < D; ++j) x(i, j) = draw();
  return x;
}

}  // namespace fnomf
