#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>

#include <Eigen/Dense>

#include "corefed/errors.hpp"

namespace corefed {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// ln(1 + e^x) without overflow for large x or underflow to 0 for very
/// negative x.
inline double softplus(double x) {
  if (x > 30.0) {
    return x + std::exp(-x);
  }
  if (x < -30.0) {
    return std::exp(x);
  }
  return std::log1p(std::exp(x));
}

/// d softplus / dx.
inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Inverse of softplus, used to pick rho for a target standard deviation.
inline double softplus_inverse(double sigma) {
  if (!(sigma > 0.0)) {
    throw DomainError("softplus_inverse: sigma must be positive");
  }
  if (sigma > 30.0) {
    return sigma + std::log1p(-std::exp(-sigma));
  }
  return std::log(std::expm1(sigma));
}

/// Product of independent Gaussians N(mu_m, softplus(rho_m)^2) over a
/// flattened parameter vector.
struct MeanFieldGaussian {
  Vector mu;
  Vector rho;

  MeanFieldGaussian() = default;
  MeanFieldGaussian(Vector mu_, Vector rho_) : mu(std::move(mu_)), rho(std::move(rho_)) {
    detail::require_same_size(static_cast<std::size_t>(mu.size()),
                              static_cast<std::size_t>(rho.size()), "MeanFieldGaussian");
  }

  /// All means equal to `mean`, all scales equal to `sigma`.
  static MeanFieldGaussian constant(Eigen::Index dim, double mean, double sigma) {
    return {Vector::Constant(dim, mean), Vector::Constant(dim, softplus_inverse(sigma))};
  }

  Eigen::Index size() const { return mu.size(); }

  Vector sigma() const { return rho.unaryExpr([](double r) { return softplus(r); }); }

  /// Flattened (mu, rho), length 2T.
  Vector packed() const {
    Vector out(2 * size());
    out << mu, rho;
    return out;
  }

  static MeanFieldGaussian unpack(const Vector &packed) {
    if (packed.size() % 2 != 0) {
      throw DimensionError("MeanFieldGaussian::unpack: odd length");
    }
    const auto t = packed.size() / 2;
    return {packed.head(t), packed.tail(t)};
  }

  bool operator==(const MeanFieldGaussian &o) const { return mu == o.mu && rho == o.rho; }
};

/// theta = mu + softplus(rho) * g.
inline Vector reparameterize(const MeanFieldGaussian &q, const Vector &g) {
  detail::require_same_size(static_cast<std::size_t>(g.size()),
                            static_cast<std::size_t>(q.size()), "reparameterize");
  Vector theta(q.size());
  for (Eigen::Index m = 0; m < q.size(); ++m) {
    theta[m] = q.mu[m] + softplus(q.rho[m]) * g[m];
  }
  return theta;
}

namespace detail {

constexpr double kMinSigma = 1e-12;

inline void check_sigma(double s, const char *who) {
  if (!(s >= kMinSigma) || !std::isfinite(s)) {
    throw DomainError(std::string(who) + ": standard deviation underflow (" +
                      std::to_string(s) + ")");
  }
}

} // namespace detail

/// Closed-form KL(q || z) between two diagonal Gaussians.
inline double kl_diag_gauss(const MeanFieldGaussian &q, const MeanFieldGaussian &z) {
  detail::require_same_size(static_cast<std::size_t>(q.size()),
                            static_cast<std::size_t>(z.size()), "kl_diag_gauss");
  double kl = 0.0;
  for (Eigen::Index m = 0; m < q.size(); ++m) {
    if (q.mu[m] == z.mu[m] && q.rho[m] == z.rho[m]) {
      continue;
    }
    const double sq = softplus(q.rho[m]);
    const double sz = softplus(z.rho[m]);
    detail::check_sigma(sq, "kl_diag_gauss");
    detail::check_sigma(sz, "kl_diag_gauss");
    const double d = q.mu[m] - z.mu[m];
    kl += std::log(sz / sq) + (sq * sq + d * d) / (2.0 * sz * sz) - 0.5;
  }
  return kl;
}

/// Gradients of KL(q || z) with respect to both arguments' (mu, rho).
struct KlGradient {
  Vector d_mu_q, d_rho_q, d_mu_z, d_rho_z;
};

inline KlGradient kl_diag_gauss_gradient(const MeanFieldGaussian &q, const MeanFieldGaussian &z) {
  detail::require_same_size(static_cast<std::size_t>(q.size()),
                            static_cast<std::size_t>(z.size()), "kl_diag_gauss_gradient");
  const auto t = q.size();
  KlGradient g{Vector::Zero(t), Vector::Zero(t), Vector::Zero(t), Vector::Zero(t)};
  for (Eigen::Index m = 0; m < t; ++m) {
    const double sq = softplus(q.rho[m]);
    const double sz = softplus(z.rho[m]);
    detail::check_sigma(sq, "kl_diag_gauss_gradient");
    detail::check_sigma(sz, "kl_diag_gauss_gradient");
    const double d = q.mu[m] - z.mu[m];
    const double inv_z2 = 1.0 / (sz * sz);
    g.d_mu_q[m] = d * inv_z2;
    g.d_mu_z[m] = -d * inv_z2;
    g.d_rho_q[m] = (-1.0 / sq + sq * inv_z2) * sigmoid(q.rho[m]);
    g.d_rho_z[m] = (1.0 / sz - (sq * sq + d * d) * inv_z2 / sz) * sigmoid(z.rho[m]);
  }
  return g;
}

inline double log_density(const MeanFieldGaussian &q, const Vector &theta) {
  detail::require_same_size(static_cast<std::size_t>(theta.size()),
                            static_cast<std::size_t>(q.size()), "log_density");
  constexpr double half_log_2pi = 0.91893853320467274178;
  double lp = 0.0;
  for (Eigen::Index m = 0; m < q.size(); ++m) {
    const double s = softplus(q.rho[m]);
    detail::check_sigma(s, "log_density");
    const double u = (theta[m] - q.mu[m]) / s;
    lp += -half_log_2pi - std::log(s) - 0.5 * u * u;
  }
  return lp;
}

} // namespace corefed
