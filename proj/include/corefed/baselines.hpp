#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "corefed/bnn.hpp"
#include "corefed/data.hpp"
#include "corefed/errors.hpp"
#include "corefed/federated.hpp"
#include "corefed/metrics.hpp"
#include "corefed/rng.hpp"

namespace corefed {

/// Similarities L (PSD) and distances d (zero diagonal) over n points.
struct SimilarityKernel {
  Matrix L;
  Matrix d;

  Eigen::Index size() const { return L.rows(); }
};

/// d = Euclidean distances; L_ij = exp(-d_ij^2 / (2 gamma^2)) with gamma the
/// median pairwise distance.
inline SimilarityKernel build_kernel(const Matrix &x) {
  const auto n = x.rows();
  SimilarityKernel k{Matrix::Identity(n, n), Matrix::Zero(n, n)};
  std::vector<double> pair_d;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dij = (x.row(i) - x.row(j)).norm();
      k.d(i, j) = k.d(j, i) = dij;
      pair_d.push_back(dij);
    }
  }
  double gamma = 1.0;
  if (!pair_d.empty()) {
    auto mid = pair_d.begin() + static_cast<std::ptrdiff_t>(pair_d.size() / 2);
    std::nth_element(pair_d.begin(), mid, pair_d.end());
    gamma = *mid > 0.0 ? *mid : 1.0;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      k.L(i, j) = k.L(j, i) = std::exp(-k.d(i, j) * k.d(i, j) / (2.0 * gamma * gamma));
    }
  }
  return k;
}

/// Linear (Gram) kernel L = X X^T with Euclidean row distances.
inline SimilarityKernel gram_kernel(const Matrix &x) {
  const auto n = x.rows();
  SimilarityKernel k{x * x.transpose(), Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) k.d(i, j) = k.d(j, i) = (x.row(i) - x.row(j)).norm();
  }
  return k;
}

/// Distances from 1-d positions, with L = identity (for hand-sized examples).
inline SimilarityKernel line_kernel(const std::vector<double> &pos) {
  const auto n = static_cast<Eigen::Index>(pos.size());
  SimilarityKernel k{Matrix::Identity(n, n), Matrix::Zero(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) k.d(i, j) = std::abs(pos[static_cast<std::size_t>(i)] - pos[static_cast<std::size_t>(j)]);
  }
  return k;
}

using Subset = std::vector<std::size_t>;

namespace detail {

inline void check_subset(const SimilarityKernel &k, const Subset &s) {
  for (auto i : s) {
    if (static_cast<Eigen::Index>(i) >= k.size()) throw DomainError("subset index out of range");
  }
}

} // namespace detail

/// log det(L_S); -infinity when L_S is singular (or not positive definite).
inline double logdet_value(const SimilarityKernel &k, const Subset &s) {
  if (s.empty()) throw DomainError("logdet_value: subset must be nonempty");
  detail::check_subset(k, s);
  const auto m = static_cast<Eigen::Index>(s.size());
  Matrix sub(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) sub(a, b) = k.L(static_cast<Eigen::Index>(s[static_cast<std::size_t>(a)]), static_cast<Eigen::Index>(s[static_cast<std::size_t>(b)]));
  }
  Eigen::LLT<Matrix> llt(sub);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  const Vector diag = llt.matrixL().toDenseMatrix().diagonal();
  if ((diag.array() <= 0.0).any()) return -std::numeric_limits<double>::infinity();
  return 2.0 * diag.array().log().sum();
}

/// Sum of d_ij over unordered pairs in S.
inline double disparity_sum(const SimilarityKernel &k, const Subset &s) {
  detail::check_subset(k, s);
  double acc = 0.0;
  for (std::size_t a = 0; a < s.size(); ++a) {
    for (std::size_t b = a + 1; b < s.size(); ++b) acc += k.d(static_cast<Eigen::Index>(s[a]), static_cast<Eigen::Index>(s[b]));
  }
  return acc;
}

/// Minimum pairwise distance in S (|S| >= 2).
inline double disparity_min(const SimilarityKernel &k, const Subset &s) {
  if (s.size() < 2) throw DomainError("disparity_min: need at least two points");
  detail::check_subset(k, s);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < s.size(); ++a) {
    for (std::size_t b = a + 1; b < s.size(); ++b) m = std::min(m, k.d(static_cast<Eigen::Index>(s[a]), static_cast<Eigen::Index>(s[b])));
  }
  return m;
}

enum class SubsetObjective { logdet, disparity_sum, disparity_min };

inline SubsetObjective parse_subset_objective(const std::string &s) {
  if (s == "logdet" || s == "log_det") return SubsetObjective::logdet;
  if (s == "disparity_sum" || s == "disparity-sum") return SubsetObjective::disparity_sum;
  if (s == "disparity_min" || s == "disparity-min") return SubsetObjective::disparity_min;
  throw ConfigError("unknown submodular objective '" + s + "'");
}

namespace detail {

/// Index of the largest gain among candidates not yet chosen (lowest index
/// wins ties; -inf gains still pick the lowest free index).
inline std::size_t argmax_free(const std::vector<double> &gain, const std::vector<bool> &taken) {
  std::size_t best = gain.size();
  for (std::size_t i = 0; i < gain.size(); ++i) {
    if (taken[i]) continue;
    if (best == gain.size() || gain[i] > gain[best]) best = i;
  }
  return best;
}

} // namespace detail

/// Greedy maximization of the chosen objective; returns the k indices in
/// selection order.
inline Subset greedy_maximize(SubsetObjective obj, const SimilarityKernel &k, int budget) {
  const auto n = static_cast<std::size_t>(k.size());
  if (budget < 0) throw DomainError("greedy_maximize: k must be >= 0");
  if (static_cast<std::size_t>(budget) > n) throw DomainError("greedy_maximize: k exceeds ground set size");
  Subset chosen;
  std::vector<bool> taken(n, false);
  auto take = [&](std::size_t i) {
    chosen.push_back(i);
    taken[i] = true;
  };
  if (budget == 0) return chosen;

  switch (obj) {
  case SubsetObjective::logdet: {
    // Incremental Cholesky: residual variance d2[i] = L_ii - ||c_i||^2 is the
    // exp of the marginal log-det gain.
    std::vector<Vector> c(n);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = k.L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i));
    std::vector<double> gain(n);
    while (chosen.size() < static_cast<std::size_t>(budget)) {
      for (std::size_t i = 0; i < n; ++i) gain[i] = d2[i] > 0.0 ? std::log(d2[i]) : -std::numeric_limits<double>::infinity();
      const auto j = detail::argmax_free(gain, taken);
      take(j);
      if (!(d2[j] > 0.0)) continue;
      const double dj = std::sqrt(d2[j]);
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        const double dot = c[i].size() ? c[i].dot(c[j]) : 0.0;
        const double e = (k.L(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) - dot) / dj;
        c[i].conservativeResize(c[i].size() + 1);
        c[i][c[i].size() - 1] = e;
        d2[i] -= e * e;
      }
    }
    break;
  }
  case SubsetObjective::disparity_sum: {
    std::vector<double> gain(n, 0.0);
    while (chosen.size() < static_cast<std::size_t>(budget)) {
      const auto j = detail::argmax_free(gain, taken);
      take(j);
      for (std::size_t i = 0; i < n; ++i) gain[i] += k.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    break;
  }
  case SubsetObjective::disparity_min: {
    if (n == 1) {
      take(0);
      break;
    }
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (k.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) > k.d(static_cast<Eigen::Index>(bi), static_cast<Eigen::Index>(bj))) {
          bi = i;
          bj = j;
        }
      }
    }
    take(bi);
    if (budget == 1) break;
    take(bj);
    std::vector<double> gain(n);
    for (std::size_t i = 0; i < n; ++i) {
      gain[i] = std::min(k.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(bi)), k.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(bj)));
    }
    while (chosen.size() < static_cast<std::size_t>(budget)) {
      const auto j = detail::argmax_free(gain, taken);
      take(j);
      for (std::size_t i = 0; i < n; ++i) gain[i] = std::min(gain[i], k.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    break;
  }
  }
  return chosen;
}

inline double subset_value(SubsetObjective obj, const SimilarityKernel &k, const Subset &s) {
  switch (obj) {
  case SubsetObjective::logdet: return logdet_value(k, s);
  case SubsetObjective::disparity_sum: return disparity_sum(k, s);
  case SubsetObjective::disparity_min: return disparity_min(k, s);
  }
  return 0.0;
}

/// Uniform k-subset of {0..n-1}, sorted.
inline Subset random_subset(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k > n) throw DomainError("random_subset: k exceeds n");
  Rng rng(derive_seed(seed, {tag(Stream::subset)}));
  return sample_without_replacement(rng, n, k);
}

// ---------------------------------------------------------------------------
// FedAvg point-estimate baseline
// ---------------------------------------------------------------------------

enum class SelectorKind { none, random, logdet, disparity_sum, disparity_min };

inline SelectorKind parse_selector(const std::string &s) {
  if (s.empty() || s == "none") return SelectorKind::none;
  if (s == "random") return SelectorKind::random;
  switch (parse_subset_objective(s)) {
  case SubsetObjective::logdet: return SelectorKind::logdet;
  case SubsetObjective::disparity_sum: return SelectorKind::disparity_sum;
  case SubsetObjective::disparity_min: return SelectorKind::disparity_min;
  }
  return SelectorKind::none;
}

struct FedAvgConfig {
  int rounds = 20;
  int local_steps = 20;
  int batch_size = 100;
  double lr = 0.05;
  int clients_per_round = 0;  // 0 = all
  double rho0 = -3.0;         // only used to share the variational initializer's mu
  std::uint64_t seed = 0;
  int threads = 1;
  SelectorKind selector = SelectorKind::none;
  double k_fraction = 0.5;
  Eigen::Index embed_dim = 64;  // feature projection for diversity selectors
};

/// Chooses a client's training subset with the configured selector.
inline Subset select_client_subset(const LabeledDataset &data, SelectorKind sel, double k_fraction,
                                   Eigen::Index embed_dim, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(data.size());
  const auto k = static_cast<std::size_t>(coreset_budget(data.size(), k_fraction));
  if (sel == SelectorKind::none) return all_indices(data.size());
  if (sel == SelectorKind::random) return random_subset(n, k, seed);
  const Matrix feats = data.x.cols() > embed_dim ? embed_vectors(data.x, embed_dim, seed) : data.x;
  const auto kern = build_kernel(feats);
  const auto obj = sel == SelectorKind::logdet          ? SubsetObjective::logdet
                   : sel == SelectorKind::disparity_sum ? SubsetObjective::disparity_sum
                                                        : SubsetObjective::disparity_min;
  auto s = greedy_maximize(obj, kern, static_cast<int>(k));
  std::sort(s.begin(), s.end());
  return s;
}

struct FedAvgRun {
  MetricsTrace trace;
  Vector theta;
};

/// Plain SGD on the mean negative log-likelihood over a minibatch.
inline Vector sgd_point_estimate(const NetworkSpec &spec, Vector theta, const LabeledDataset &data, int steps,
                                 int batch_size, double lr, std::uint64_t seed) {
  for (int s = 0; s < steps; ++s) {
    Rng rng(derive_seed(seed, {tag(Stream::full_batch), static_cast<std::uint64_t>(s)}));
    const auto batch = uniform_minibatch(data.size(), batch_size, rng);
    const Vector coef = Vector::Constant(static_cast<Eigen::Index>(batch.size()), 1.0 / static_cast<double>(batch.size()));
    Vector grad = Vector::Zero(theta.size());
    weighted_log_likelihood_gradient(spec, theta, data, batch.indices, coef, grad);
    theta += lr * grad;  // ascent on log-likelihood
  }
  return theta;
}

/// FedAvg: each selected client runs local SGD from the global weights; the
/// server takes the data-size weighted average.
inline FedAvgRun fedavg_run(const NetworkSpec &spec, const FedAvgConfig &cfg,
                            const std::vector<LabeledDataset> &client_data, const LabeledDataset &test) {
  spec.validate();
  const int num_clients = static_cast<int>(client_data.size());
  if (num_clients < 1) throw ConfigError("fedavg: need at least one client");
  if (cfg.rounds < 0 || cfg.local_steps < 0 || cfg.batch_size < 1 || !(cfg.lr > 0.0)) {
    throw ConfigError("fedavg: invalid rounds/steps/batch/lr");
  }
  const int per_round = cfg.clients_per_round == 0 ? num_clients : cfg.clients_per_round;
  if (per_round < 1 || per_round > num_clients) throw ConfigError("fedavg: clients_per_round out of range");

  std::vector<LabeledDataset> train;
  for (int i = 0; i < num_clients; ++i) {
    const auto &d = client_data[static_cast<std::size_t>(i)];
    check_dataset(spec, d);
    const auto sel = select_client_subset(d, cfg.selector, cfg.k_fraction, cfg.embed_dim,
                                          derive_seed(cfg.seed, {tag(Stream::subset), static_cast<std::uint64_t>(i)}));
    train.push_back(cfg.selector == SelectorKind::none ? d : d.subset(sel));
  }

  FedAvgRun run;
  Rng init_rng(derive_seed(cfg.seed, {tag(Stream::init)}));
  run.theta = init_variational(spec, init_rng, cfg.rho0).mu;
  auto record = [&](int round) {
    const auto e = evaluate(spec, run.theta, test);
    run.trace.add(round, kGlobalClient, "test", metric_name(spec), e.metric);
    run.trace.add(round, kGlobalClient, "test", "nll", e.loss);
  };
  record(0);
  for (int t = 0; t < cfg.rounds; ++t) {
    const auto selected = sample_clients(num_clients, per_round,
                                         derive_seed(cfg.seed, {tag(Stream::client_selection), static_cast<std::uint64_t>(t)}));
    std::vector<Vector> local(selected.size());
    parallel_for(selected.size(), cfg.threads, [&](std::size_t s) {
      const auto i = selected[s];
      local[s] = sgd_point_estimate(spec, run.theta, train[i], cfg.local_steps, cfg.batch_size, cfg.lr,
                                    derive_seed(cfg.seed, {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(t)}));
    });
    Vector acc = Vector::Zero(run.theta.size());
    double total = 0.0;
    for (std::size_t s = 0; s < selected.size(); ++s) {
      const auto w = static_cast<double>(train[selected[s]].size());
      acc += w * local[s];
      total += w;
    }
    run.theta = acc / total;
    for (std::size_t s = 0; s < selected.size(); ++s) {
      const auto e = evaluate(spec, local[s], train[selected[s]]);
      run.trace.add(t + 1, static_cast<int>(selected[s]), "train", "nll", e.loss);
    }
    record(t + 1);
  }
  return run;
}

} // namespace corefed
