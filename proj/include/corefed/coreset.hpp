#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "corefed/bnn.hpp"
#include "corefed/errors.hpp"
#include "corefed/variational.hpp"

namespace corefed {

/// Centered Monte-Carlo log-likelihood vectors: column j of phi is g_j over
/// S parameter snapshots, target = sum_j g_j.
struct LikelihoodEmbedding {
  Matrix phi;     // S x n
  Vector target;  // S

  Eigen::Index samples() const { return phi.rows(); }
  Eigen::Index points() const { return phi.cols(); }
};

/// Nonnegative weights over n points with at most k nonzeros.
struct CoresetWeights {
  Vector w;
  int k = 0;

  Eigen::Index size() const { return w.size(); }

  int nonzeros() const { return static_cast<int>((w.array() != 0.0).count()); }

  std::vector<std::size_t> support() const {
    std::vector<std::size_t> s;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      if (w[j] != 0.0) s.push_back(static_cast<std::size_t>(j));
    }
    return s;
  }

  bool empty() const { return nonzeros() == 0; }

  bool valid() const { return (w.array() >= 0.0).all() && nonzeros() <= k && w.allFinite(); }
};

/// Embedding from a precomputed S x n log-likelihood table ll(s, j).
inline LikelihoodEmbedding embedding_from_log_likelihoods(const Matrix &ll) {
  if (ll.rows() < 1) throw DomainError("embedding: need at least one snapshot");
  if (ll.cols() < 1) throw DomainError("embedding: empty data");
  const double inv_sqrt_s = 1.0 / std::sqrt(static_cast<double>(ll.rows()));
  LikelihoodEmbedding e;
  e.phi = (ll.rowwise() - ll.colwise().mean()) * inv_sqrt_s;
  e.target = e.phi.rowwise().sum();
  return e;
}

/// Evaluates every data point's log-likelihood under each snapshot and
/// centers the result across snapshots.
inline LikelihoodEmbedding build_embedding(const NetworkSpec &spec, const std::vector<Vector> &snapshots,
                                           const LabeledDataset &data) {
  if (snapshots.empty()) throw DomainError("build_embedding: need at least one snapshot");
  if (data.size() < 1) throw DomainError("build_embedding: empty data");
  check_dataset(spec, data);
  const auto idx = all_indices(data.size());
  Matrix ll(static_cast<Eigen::Index>(snapshots.size()), data.size());
  for (std::size_t s = 0; s < snapshots.size(); ++s) {
    ll.row(static_cast<Eigen::Index>(s)) = log_likelihoods(spec, snapshots[s], data, idx).transpose();
  }
  return embedding_from_log_likelihoods(ll);
}

namespace detail {

/// Indices of the k largest strictly positive entries, lowest index first
/// on ties.
inline std::vector<Eigen::Index> top_k_positive(const Vector &x, int k) {
  std::vector<Eigen::Index> cand;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0) cand.push_back(i);
  }
  const auto keep = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(k));
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                    [&](Eigen::Index a, Eigen::Index b) { return x[a] > x[b] || (x[a] == x[b] && a < b); });
  cand.resize(keep);
  return cand;
}

} // namespace detail

/// Euclidean projection onto {w >= 0, ||w||_0 <= k}.
inline Vector project_sparse_nonneg(const Vector &x, int k) {
  if (k <= 0) throw DomainError("project_sparse_nonneg: k must be >= 1");
  if (k > x.size()) throw DomainError("project_sparse_nonneg: k exceeds vector length");
  Vector out = Vector::Zero(x.size());
  for (auto i : detail::top_k_positive(x, k)) out[i] = x[i];
  return out;
}

inline double quadratic_objective(const LikelihoodEmbedding &emb, const Vector &w) {
  detail::require_same_size(static_cast<std::size_t>(w.size()),
                            static_cast<std::size_t>(emb.points()), "quadratic_objective");
  return (emb.target - emb.phi * w).squaredNorm();
}

/// Gradient of ||P - Phi w||^2: -2 Phi^T (P - Phi w).
inline Vector quadratic_gradient(const LikelihoodEmbedding &emb, const Vector &w) {
  detail::require_same_size(static_cast<std::size_t>(w.size()),
                            static_cast<std::size_t>(emb.points()), "quadratic_gradient");
  detail::require_same_size(static_cast<std::size_t>(emb.target.size()),
                            static_cast<std::size_t>(emb.samples()), "quadratic_gradient target");
  return -2.0 * (emb.phi.transpose() * (emb.target - emb.phi * w));
}

enum class KlMode {
  monitor,           // descend the quadratic term only; KL evaluated for reporting
  finite_difference  // add a central-difference KL gradient on the current support
};

struct AihtOptions {
  int max_iter = 10;
  double tol = 1e-6;
  KlMode kl_mode = KlMode::monitor;
  /// KL(q_w || q) as a function of the weights; each call may retrain.
  std::function<double(const Vector &)> kl_term;
  double fd_relative_step = 1e-3;
  /// Called with (iteration, w_{t+1}) after every projection.
  std::function<void(int, const Vector &)> on_iterate;
};

struct AihtResult {
  CoresetWeights weights;
  int iterations = 0;
  double quadratic = 0.0;  // ||P - Phi w||^2 at the returned weights
  double kl = 0.0;         // KL term at the returned weights (0 if no oracle)
  bool degenerate_step = false;
  std::vector<double> quadratic_trace;  // per iterate w_1, w_2, ...
};

/// Accelerated iterative hard thresholding for min ||P - Phi w||^2 subject
/// to w >= 0 and ||w||_0 <= k. Starts from z_0 = w_0 = 0 and returns the
/// best iterate seen, so the result is never worse than w_1 (and w = 0).
inline AihtResult aiht_solve(const LikelihoodEmbedding &emb, int k, const AihtOptions &opts = {}) {
  const Eigen::Index n = emb.points();
  if (k <= 0) throw DomainError("aiht_solve: k must be >= 1");
  if (k > n) throw DomainError("aiht_solve: k exceeds number of points");
  if (opts.max_iter < 1) throw DomainError("aiht_solve: max_iter must be >= 1");
  if (opts.kl_mode == KlMode::finite_difference && !opts.kl_term) {
    throw DomainError("aiht_solve: finite-difference KL mode needs a kl_term oracle");
  }

  const bool with_kl = static_cast<bool>(opts.kl_term);
  auto total = [&](const Vector &w, double quad) { return with_kl ? quad + opts.kl_term(w) : quad; };

  Vector w = Vector::Zero(n);
  Vector z = Vector::Zero(n);
  AihtResult res;
  res.weights = {w, k};
  res.quadratic = emb.target.squaredNorm();
  double best = total(w, res.quadratic);

  for (int t = 0; t < opts.max_iter; ++t) {
    Vector grad = quadratic_gradient(emb, z);
    if (opts.kl_mode == KlMode::finite_difference) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (z[j] == 0.0) continue;
        const double h = opts.fd_relative_step * std::max(std::abs(z[j]), 1.0);
        Vector zp = z, zm = z;
        zp[j] += h;
        zm[j] -= h;
        grad[j] += (opts.kl_term(zp) - opts.kl_term(zm)) / (2.0 * h);
      }
    }

    // Candidate support: current support of z plus the k best descent
    // coordinates outside it.
    Vector outside = -grad;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (z[j] != 0.0) outside[j] = 0.0;
    }
    Vector restricted = Vector::Zero(n);
    for (auto j : detail::top_k_positive(outside, k)) restricted[j] = grad[j];
    for (Eigen::Index j = 0; j < n; ++j) {
      if (z[j] != 0.0) restricted[j] = grad[j];
    }

    const double num = restricted.squaredNorm();
    const double den = (emb.phi * restricted).squaredNorm();
    if (num == 0.0 || den == 0.0) {
      res.degenerate_step = true;
      break;
    }
    const double step = num / (2.0 * den);

    Vector w_next = project_sparse_nonneg(z - step * grad, k);
    ++res.iterations;
    if (opts.on_iterate) opts.on_iterate(t, w_next);

    const Vector dw = w_next - w;
    const Vector phi_dw = emb.phi * dw;
    const Vector resid = emb.target - emb.phi * w_next;
    const double dd = phi_dw.squaredNorm();
    const double tau = dd > 0.0 ? resid.dot(phi_dw) / (2.0 * dd) : 0.0;
    z = w_next + tau * dw;

    const double quad = resid.squaredNorm();
    res.quadratic_trace.push_back(quad);
    const double f = total(w_next, quad);
    if (f < best) {
      best = f;
      res.weights.w = w_next;
      res.quadratic = quad;
    }

    const double change = dw.cwiseAbs().maxCoeff();
    w = std::move(w_next);
    if (change < opts.tol) break;
  }
  if (with_kl) res.kl = opts.kl_term(res.weights.w);
  return res;
}

struct CombinedObjective {
  double kl = 0.0;
  double quadratic = 0.0;
  double total() const { return kl + quadratic; }
};

/// KL(q_w || q) + ||P - Phi w||^2 with both parts reported.
inline CombinedObjective combined_objective(const CoresetWeights &w, const MeanFieldGaussian &q_w,
                                            const MeanFieldGaussian &q, const LikelihoodEmbedding &emb) {
  return {kl_diag_gauss(q_w, q), quadratic_objective(emb, w.w)};
}

} // namespace corefed
