#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "corefed/bnn.hpp"
#include "corefed/errors.hpp"

namespace corefed::theory {

/// Architecture, sample sizes and the (never derived) bound constants.
struct RateParams {
  double n = 1000;       // full per-client sample size
  double n_k = 500;      // coreset size
  int L = 2;             // hidden layers
  double T = 100;        // parameter count
  double M = 50;         // width
  double s0 = 10;        // input dim
  double delta = 1.5;    // exponent in epsilon_n
  double delta_prime = 2.0;
  double beta_smooth = 2.0;  // Hoelder exponent
  double d_intrinsic = 1.0;
  double sigma_eps = 1.0;
  double F = 1.0;
  double zeta = 10.0;
  int N = 1;             // clients, for the approximation-drift average
  double C = 1.0, C_prime = 1.0, C_dprime = 1.0, C2 = 1.0, C3 = 1.0;
};

/// Variational error rate ((L+1) T / m) ln M + (T / m) ln(s0 sqrt(m / T)).
inline double r_n(const RateParams &p, double m) {
  if (!(m > 0.0) || !(p.T > 0.0) || !(p.M > 0.0) || !(p.s0 > 0.0) || p.L < 0) {
    throw DomainError("r_n: sample count, T, M, s0 must be positive and L >= 0");
  }
  return ((p.L + 1) * p.T / m) * std::log(p.M) + (p.T / m) * std::log(p.s0 * std::sqrt(m / p.T));
}

/// epsilon_m^2 = r_m (ln m)^{2 delta}.
inline double epsilon_sq(const RateParams &p, double m) {
  if (!(m > 1.0)) throw DomainError("epsilon_sq: m must exceed 1");
  return r_n(p, m) * std::pow(std::log(m), 2.0 * p.delta);
}

/// (1 - exp(-4F^2 / (8 sigma^2))) / (4F^2).
inline double c_f(double F, double sigma_eps) {
  if (!(F > 0.0) || !(sigma_eps > 0.0)) throw DomainError("c_f: F and sigma_eps must be positive");
  const double four_f2 = 4.0 * F * F;
  return -std::expm1(-four_f2 / (8.0 * sigma_eps * sigma_eps)) / four_f2;
}

/// Mean over samples of 1 - exp(-||f_theta(x) - f_true(x)||^2 / (8 sigma^2)).
inline double hellinger_sq(const NetworkSpec &spec, const Vector &theta,
                           const std::function<Vector(const Vector &)> &f_true, const Matrix &x_samples,
                           double sigma_eps) {
  if (!(sigma_eps > 0.0)) throw DomainError("hellinger_sq: sigma_eps must be positive");
  if (x_samples.rows() < 1) throw DomainError("hellinger_sq: need at least one sample");
  const Matrix out = forward_rows(spec, theta, x_samples);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x_samples.rows(); ++i) {
    const Vector diff = out.row(i).transpose() - f_true(x_samples.row(i).transpose());
    acc += -std::expm1(-diff.squaredNorm() / (8.0 * sigma_eps * sigma_eps));
  }
  return acc / static_cast<double>(x_samples.rows());
}

/// Same functional between two arbitrary predictors evaluated on the same
/// inputs (rows of a and b are outputs).
inline double hellinger_sq_outputs(const Matrix &a, const Matrix &b, double sigma_eps) {
  if (!(sigma_eps > 0.0)) throw DomainError("hellinger_sq: sigma_eps must be positive");
  if (a.rows() < 1) throw DomainError("hellinger_sq: need at least one sample");
  detail::require_same_size(static_cast<std::size_t>(a.rows()), static_cast<std::size_t>(b.rows()),
                            "hellinger_sq_outputs");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    acc += -std::expm1(-(a.row(i) - b.row(i)).squaredNorm() / (8.0 * sigma_eps * sigma_eps));
  }
  return acc / static_cast<double>(a.rows());
}

struct DriftResult {
  bool type1_pos = false;  // epsilon^2(n) > epsilon^2(n_k)
  bool type2_pos = false;  // n r_n > n_k r_{n_k}
  double type1_gap = 0.0;
  double type2_gap = 0.0;
  double approximation_gap = 0.0;
  double drift_value = 0.0;
};

/// Coreset drift bound C(eps_n^2 - eps_k^2) + zeta C'(n r_n - n_k r_k)
/// + (C''/N) sum_i (n xi_n^i - n_k xi_k^i). xi pairs (xi_n, xi_k) per client
/// are optional; empty excludes the approximation term.
inline DriftResult drift_check(const RateParams &p,
                               const std::vector<std::pair<double, double>> &xi = {}) {
  if (!(p.n_k >= 2.0)) throw DomainError("drift_check: n_k must be >= 2");
  if (!(p.n > p.n_k)) throw DomainError("drift_check: need n > n_k");
  DriftResult r;
  r.type1_gap = epsilon_sq(p, p.n) - epsilon_sq(p, p.n_k);
  r.type2_gap = p.n * r_n(p, p.n) - p.n_k * r_n(p, p.n_k);
  r.type1_pos = r.type1_gap > 0.0;
  r.type2_pos = r.type2_gap > 0.0;
  for (const auto &[xn, xk] : xi) r.approximation_gap += p.n * xn - p.n_k * xk;
  const double n_clients = xi.empty() ? 1.0 : static_cast<double>(std::max(p.N, 1));
  r.drift_value = p.C * r.type1_gap + p.zeta * p.C_prime * r.type2_gap +
                  (p.C_dprime / n_clients) * r.approximation_gap;
  return r;
}

/// (C3 m^{-2b/(2b+d)}, C2 m^{-2b/(2b+d)} (ln m)^{2 delta'}).
inline std::pair<double, double> minimax_envelope(const RateParams &p, double n_k) {
  if (!(n_k >= 2.0)) throw DomainError("minimax_envelope: n_k must be >= 2");
  if (!(p.beta_smooth > 0.0) || !(p.d_intrinsic > 0.0)) {
    throw DomainError("minimax_envelope: beta and d must be positive");
  }
  const double expo = -2.0 * p.beta_smooth / (2.0 * p.beta_smooth + p.d_intrinsic);
  const double base = std::pow(n_k, expo);
  return {p.C3 * base, p.C2 * base * std::pow(std::log(n_k), 2.0 * p.delta_prime)};
}

/// Smallest delta for which epsilon^2(n) > epsilon^2(n_k) holds at (n, n_k),
/// found by bisection on [lo, hi]; returns hi when no crossing exists.
inline double min_delta_for_type1(RateParams p, double lo = 1.0, double hi = 64.0) {
  auto ok = [&](double d) {
    p.delta = d;
    return epsilon_sq(p, p.n) > epsilon_sq(p, p.n_k);
  };
  if (ok(lo)) return lo;
  if (!ok(hi)) return hi;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? hi : lo) = mid;
  }
  return hi;
}

} // namespace corefed::theory
