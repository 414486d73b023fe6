#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "corefed/bnn.hpp"
#include "corefed/coreset.hpp"
#include "corefed/errors.hpp"
#include "corefed/metrics.hpp"
#include "corefed/rng.hpp"
#include "corefed/variational.hpp"

namespace corefed {

enum class RunMode { coreset, full, random_subset };

inline const char *to_string(RunMode m) {
  switch (m) {
  case RunMode::coreset: return "coreset";
  case RunMode::full: return "full";
  case RunMode::random_subset: return "random_subset";
  }
  return "?";
}

struct FederatedConfig {
  int rounds = 20;             // global rounds
  int local_rounds = 20;       // R
  int clients_per_round = 0;   // S; 0 means all clients
  double beta = 1.0;
  int batch_size = 100;        // b
  int mc_samples = 1;          // K
  double eta1 = 1e-3;          // personal model
  double eta2 = 1e-3;          // localized global copies
  double zeta = 10.0;
  double k_fraction = 0.5;
  int snapshots = 64;          // Monte-Carlo samples for the likelihood embedding
  int outer_loops = 3;         // CoresetOptUpdate loop cap
  double outer_tol = 1e-6;
  int refresh_every = 1;       // recompute coreset weights every m rounds
  AihtOptions aiht{};
  double rho0 = -3.0;
  std::uint64_t seed = 0;
  int threads = 1;
  bool record_wall_time = false;

  void validate(int num_clients) const {
    if (rounds < 0) throw ConfigError("rounds must be >= 0");
    if (local_rounds < 0) throw ConfigError("local_rounds must be >= 0");
    if (num_clients < 1) throw ConfigError("need at least one client");
    if (clients_per_round < 0 || clients_per_round > num_clients) {
      throw ConfigError("clients_per_round must be in [1, N] (0 = all)");
    }
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must be in (0, 1]");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (mc_samples < 1) throw ConfigError("mc_samples (K) must be >= 1");
    if (!(eta1 > 0.0) || !(eta2 > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(zeta > 0.0)) throw ConfigError("zeta must be positive");
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) throw ConfigError("k_fraction must be in (0, 1]");
    if (snapshots < 1) throw ConfigError("snapshots must be >= 1");
    if (outer_loops < 1) throw ConfigError("outer_loops must be >= 1");
    if (refresh_every < 1) throw ConfigError("refresh_every must be >= 1");
    if (aiht.max_iter < 1) throw ConfigError("aiht.max_iter must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }

  int effective_clients_per_round(int num_clients) const {
    return clients_per_round == 0 ? num_clients : clients_per_round;
  }
};

struct ClientState {
  int id = 0;
  LabeledDataset data;
  LabeledDataset test;  // local held-out split for the personal model (may be empty)
  CoresetWeights weights;
  std::optional<MeanFieldGaussian> personal;
  double zeta = 10.0;
};

inline int coreset_budget(Eigen::Index n, double k_fraction) {
  const auto k = static_cast<Eigen::Index>(std::ceil(k_fraction * static_cast<double>(n) - 1e-9));
  return static_cast<int>(std::clamp<Eigen::Index>(k, 1, n));
}

/// Uniform S-subset of N clients, sorted.
inline std::vector<std::size_t> sample_clients(int num_clients, int subset, std::uint64_t seed) {
  if (num_clients < 1 || subset < 1) throw DomainError("sample_clients: N and S must be >= 1");
  if (subset > num_clients) throw DomainError("sample_clients: S exceeds N");
  Rng rng(derive_seed(seed, {tag(Stream::client_selection)}));
  return sample_without_replacement(rng, static_cast<std::size_t>(num_clients), static_cast<std::size_t>(subset));
}

/// Uniform minibatch of min(b, n) distinct points, unit weights.
inline Minibatch uniform_minibatch(Eigen::Index n, int b, Rng &rng) {
  if (n < 1) throw DomainError("uniform_minibatch: empty dataset");
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(n), static_cast<std::size_t>(b));
  return {sample_without_replacement(rng, static_cast<std::size_t>(n), take), {}};
}

/// b draws from supp(w) with probability proportional to w_j (systematic
/// resampling: one uniform offset, b evenly spaced positions on the weight
/// CDF). Each draw carries weight sum(w)/n, so (n/b) sum_draws weight * ll is
/// an unbiased estimate of sum_j w_j ll_j.
inline Minibatch weighted_minibatch(const CoresetWeights &w, int b, Rng &rng) {
  if (b < 1) throw DomainError("weighted_minibatch: b must be >= 1");
  if ((w.w.array() < 0.0).any()) throw DomainError("weighted_minibatch: negative weight");
  const double total = w.w.sum();
  if (!(total > 0.0)) throw DomainError("weighted_minibatch: empty coreset (all weights zero)");
  const auto n = static_cast<double>(w.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double offset = u(rng);
  Minibatch out;
  out.indices.reserve(static_cast<std::size_t>(b));
  Eigen::Index last = w.size() - 1;
  while (w.w[last] == 0.0) --last;
  Eigen::Index j = 0;
  double cum = w.w[0];
  for (int i = 0; i < b; ++i) {
    const double pos = (offset + i) / b * total;
    while (j < last && (pos >= cum || w.w[j] == 0.0)) cum += w.w[++j];
    out.indices.push_back(static_cast<std::size_t>(j));
  }
  out.weights.assign(out.indices.size(), total / n);
  return out;
}

/// (1 - beta) v_t + (beta / S) sum_i v_i on (mu, rho).
inline MeanFieldGaussian aggregate(const MeanFieldGaussian &v_t, const std::vector<MeanFieldGaussian> &updates,
                                   double beta) {
  if (updates.empty()) throw DomainError("aggregate: need at least one update");
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("aggregate: beta must be in [0, 1]");
  Vector mu_sum = Vector::Zero(v_t.size());
  Vector rho_sum = Vector::Zero(v_t.size());
  for (const auto &u : updates) {
    detail::require_same_size(static_cast<std::size_t>(u.size()), static_cast<std::size_t>(v_t.size()), "aggregate");
    mu_sum += u.mu;
    rho_sum += u.rho;
  }
  const double s = static_cast<double>(updates.size());
  if (beta == 0.0) return v_t;
  return {(1.0 - beta) * v_t.mu + (beta / s) * mu_sum, (1.0 - beta) * v_t.rho + (beta / s) * rho_sum};
}

struct LocalTraining {
  int rounds = 20;
  int batch_size = 100;
  int mc_samples = 1;
  double eta1 = 1e-3;
  double eta2 = 1e-3;
  double zeta = 10.0;
};

inline LocalTraining local_training(const FederatedConfig &c) {
  return {c.local_rounds, c.batch_size, c.mc_samples, c.eta1, c.eta2, c.zeta};
}

struct ClientUpdateResult {
  MeanFieldGaussian v_z;       // localized global copy returned to the server
  MeanFieldGaussian q_hat;     // full-data fit
  MeanFieldGaussian q_hat_w;   // coreset-weighted fit
  MeanFieldGaussian personal;  // persistent personalized model
};

/// R local rounds from v_global. Every round draws one set of K noise vectors
/// shared by all chains, then
///   - full-data chain: SGD on the unweighted estimator against v_global,
///   - weighted chain: SGD on the coreset-weighted estimator against v_global
///     (this is the localized global copy sent back),
///   - personal model: SGD on the weighted estimator against the current
///     localized global copy.
inline ClientUpdateResult client_update(const NetworkSpec &spec, const ClientState &client,
                                        const MeanFieldGaussian &v_global, const CoresetWeights &weights,
                                        const LocalTraining &lt, std::uint64_t seed) {
  if (weights.size() != client.data.size()) {
    throw DimensionError("client_update: weights length must match client data size");
  }
  ClientUpdateResult r{v_global, v_global, v_global, client.personal.value_or(v_global)};
  const auto n = static_cast<double>(client.data.size());
  const auto dim = v_global.size();
  for (int step = 0; step < lt.rounds; ++step) {
    Rng noise_rng(derive_seed(seed, {tag(Stream::mc_noise), static_cast<std::uint64_t>(step)}));
    Rng full_rng(derive_seed(seed, {tag(Stream::full_batch), static_cast<std::uint64_t>(step)}));
    Rng weighted_rng(derive_seed(seed, {tag(Stream::weighted_batch), static_cast<std::uint64_t>(step)}));
    const auto noise = standard_normal_draws(noise_rng, dim, lt.mc_samples);

    const Minibatch full = uniform_minibatch(client.data.size(), lt.batch_size, full_rng);
    const Vector g_full = elbo_gradient(r.q_hat, v_global, {spec, client.data, full, n, lt.zeta, noise});

    const Minibatch wb = weighted_minibatch(weights, lt.batch_size, weighted_rng);
    const Vector g_w = elbo_gradient(r.q_hat_w, v_global, {spec, client.data, wb, n, lt.zeta, noise});
    const Vector g_p = elbo_gradient(r.personal, r.q_hat_w, {spec, client.data, wb, n, lt.zeta, noise});

    sgd_step(r.q_hat, g_full, lt.eta2);
    sgd_step(r.q_hat_w, g_w, lt.eta2);
    sgd_step(r.personal, g_p, lt.eta1);
  }
  r.v_z = r.q_hat_w;
  return r;
}

/// S reparameterized parameter samples of q.
inline std::vector<Vector> draw_snapshots(const MeanFieldGaussian &q, int count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {tag(Stream::snapshots)}));
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) out.push_back(reparameterize(q, standard_normal(rng, q.size())));
  return out;
}

struct CoresetOptResult {
  ClientUpdateResult update;
  CoresetWeights weights;
  std::vector<double> objective_trace;  // f(w) of each accepted weight vector
  CombinedObjective objective;          // parts at the returned weights
  int loops = 0;
  bool fallback = false;                // solver produced an empty coreset
  bool refreshed = false;
};

/// Weights from an A-IHT pass on snapshots of q; falls back to `previous`
/// when the solver returns an empty coreset.
inline CoresetWeights solve_weights(const NetworkSpec &spec, const LabeledDataset &data, const MeanFieldGaussian &q,
                                    int k, const FederatedConfig &cfg, std::uint64_t seed, bool &empty_result) {
  const auto emb = build_embedding(spec, draw_snapshots(q, cfg.snapshots, seed), data);
  // No weights yet, so no weighted fit to retrain against: quadratic only.
  AihtOptions opts = cfg.aiht;
  opts.kl_mode = KlMode::monitor;
  opts.kl_term = nullptr;
  auto sol = aiht_solve(emb, k, opts);
  empty_result = sol.weights.empty();
  return sol.weights;
}

/// Alternates client_update and A-IHT on the embedding of the current
/// full-data fit. A proposal is kept only if it lowers
/// f(w) = KL(q_w || q) + ||P - Phi w||^2, so the accepted trace never rises.
inline CoresetOptResult coreset_opt_update(const NetworkSpec &spec, const ClientState &client,
                                           const MeanFieldGaussian &v_global, const FederatedConfig &cfg,
                                           std::uint64_t seed, bool refresh = true) {
  const auto &data = client.data;
  const int k = coreset_budget(data.size(), cfg.k_fraction);
  const LocalTraining lt = local_training(cfg);
  CoresetOptResult res;

  CoresetWeights w = client.weights;
  if (w.size() != data.size() || w.empty()) {
    bool empty = false;
    w = solve_weights(spec, data, v_global, k, cfg, derive_seed(seed, {0xC0DEULL}), empty);
    if (empty) {
      // Uniform weights on the first k points keep training alive.
      w = {Vector::Zero(data.size()), k};
      w.w.head(k).setConstant(static_cast<double>(data.size()) / k);
      res.fallback = true;
    }
  }

  res.update = client_update(spec, client, v_global, w, lt, seed);
  res.weights = w;
  res.loops = 1;
  if (!refresh) {
    res.objective.kl = kl_diag_gauss(res.update.q_hat_w, res.update.q_hat);
    return res;
  }

  const auto emb = build_embedding(spec, draw_snapshots(res.update.q_hat, cfg.snapshots, seed), data);
  res.objective = combined_objective(w, res.update.q_hat_w, res.update.q_hat, emb);
  res.objective_trace.push_back(res.objective.total());
  res.refreshed = true;

  AihtOptions opts = cfg.aiht;
  if (opts.kl_mode == KlMode::finite_difference) {
    const auto q_hat = res.update.q_hat;
    opts.kl_term = [&, q_hat](const Vector &cand) {
      CoresetWeights cw{cand.cwiseMax(0.0), k};
      if (cw.empty()) return 0.0;
      LocalTraining probe = lt;
      probe.rounds = std::max(1, lt.rounds / 4);
      return kl_diag_gauss(client_update(spec, client, v_global, cw, probe, seed).q_hat_w, q_hat);
    };
  }

  for (int loop = 1; loop < cfg.outer_loops; ++loop) {
    const auto sol = aiht_solve(emb, k, opts);
    if (sol.weights.empty()) {
      res.fallback = true;
      break;
    }
    auto upd = client_update(spec, client, v_global, sol.weights, lt, seed);
    const auto obj = combined_objective(sol.weights, upd.q_hat_w, upd.q_hat, emb);
    ++res.loops;
    const double prev = res.objective.total();
    if (!(obj.total() < prev)) break;
    res.update = std::move(upd);
    res.weights = sol.weights;
    res.objective = obj;
    res.objective_trace.push_back(obj.total());
    if (prev - obj.total() < cfg.outer_tol) break;
    // Later proposals would solve the same embedding again.
    if (opts.kl_mode == KlMode::monitor) break;
  }
  return res;
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)> &fn) {
  const auto workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto &t : pool) t.join();
  for (auto &e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline const char *metric_name(const NetworkSpec &spec) {
  return spec.likelihood == LikelihoodKind::gaussian_regression ? "mse" : "accuracy";
}

struct FederatedRun {
  MetricsTrace trace;
  MeanFieldGaussian v_global;
  std::vector<ClientState> clients;
};

namespace detail {

inline void record_global_eval(MetricsTrace &trace, int round, const NetworkSpec &spec, const MeanFieldGaussian &v,
                               const LabeledDataset &test, double wall_ms) {
  const auto e = evaluate(spec, v.mu, test);
  trace.add(round, kGlobalClient, "test", metric_name(spec), e.metric, wall_ms);
  trace.add(round, kGlobalClient, "test", "nll", e.loss, wall_ms);
}

inline std::size_t support_churn(const CoresetWeights &a, const CoresetWeights &b) {
  std::size_t churn = 0;
  for (Eigen::Index j = 0; j < std::min(a.size(), b.size()); ++j) {
    if ((a.w[j] != 0.0) != (b.w[j] != 0.0)) ++churn;
  }
  return churn;
}

} // namespace detail

/// Server loop: every client runs its update from the current global
/// distribution (in parallel), a random subset of S updates is averaged with
/// momentum beta, and metrics are recorded after each round. Output depends
/// only on (config, data, seed).
inline FederatedRun run_federated(const NetworkSpec &spec, const FederatedConfig &cfg,
                                  const std::vector<LabeledDataset> &client_data, const LabeledDataset &test,
                                  RunMode mode, const std::vector<LabeledDataset> &client_tests = {}) {
  spec.validate();
  const int num_clients = static_cast<int>(client_data.size());
  cfg.validate(num_clients);
  check_dataset(spec, test);

  FederatedRun run;
  Rng init_rng(derive_seed(cfg.seed, {tag(Stream::init)}));
  run.v_global = init_variational(spec, init_rng, cfg.rho0);

  for (int i = 0; i < num_clients; ++i) {
    ClientState c;
    c.id = i;
    c.data = client_data[static_cast<std::size_t>(i)];
    check_dataset(spec, c.data);
    if (static_cast<std::size_t>(i) < client_tests.size()) c.test = client_tests[static_cast<std::size_t>(i)];
    c.zeta = cfg.zeta;
    const auto n = c.data.size();
    const int k = coreset_budget(n, cfg.k_fraction);
    if (mode == RunMode::full) {
      c.weights = {Vector::Ones(n), static_cast<int>(n)};
    } else if (mode == RunMode::random_subset) {
      Rng rng(derive_seed(cfg.seed, {tag(Stream::subset), static_cast<std::uint64_t>(i)}));
      c.weights = {Vector::Zero(n), k};
      for (auto j : sample_without_replacement(rng, static_cast<std::size_t>(n), static_cast<std::size_t>(k))) {
        c.weights.w[static_cast<Eigen::Index>(j)] = static_cast<double>(n) / k;
      }
    } else {
      c.weights = {Vector::Zero(n), k};
    }
    run.clients.push_back(std::move(c));
  }

  using clock = std::chrono::steady_clock;
  auto ms_since = [&](clock::time_point t0) {
    return cfg.record_wall_time ? std::chrono::duration<double, std::milli>(clock::now() - t0).count() : 0.0;
  };

  detail::record_global_eval(run.trace, 0, spec, run.v_global, test, 0.0);

  const int per_round = cfg.effective_clients_per_round(num_clients);
  for (int t = 0; t < cfg.rounds; ++t) {
    const auto t0 = clock::now();
    std::vector<CoresetOptResult> results(static_cast<std::size_t>(num_clients));
    const bool refresh = (t % cfg.refresh_every) == 0;
    parallel_for(static_cast<std::size_t>(num_clients), cfg.threads, [&](std::size_t i) {
      const auto &c = run.clients[i];
      const auto seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(c.id), static_cast<std::uint64_t>(t)});
      if (mode == RunMode::coreset) {
        results[i] = coreset_opt_update(spec, c, run.v_global, cfg, seed, refresh);
      } else {
        CoresetOptResult r;
        r.update = client_update(spec, c, run.v_global, c.weights, local_training(cfg), seed);
        r.weights = c.weights;
        r.objective.kl = kl_diag_gauss(r.update.q_hat_w, r.update.q_hat);
        results[i] = std::move(r);
      }
    });

    const auto selected = sample_clients(num_clients, per_round,
                                         derive_seed(cfg.seed, {tag(Stream::client_selection), static_cast<std::uint64_t>(t)}));
    std::vector<MeanFieldGaussian> updates;
    for (auto i : selected) updates.push_back(results[i].update.v_z);
    run.v_global = aggregate(run.v_global, updates, cfg.beta);

    const int round = t + 1;
    const double wall = ms_since(t0);
    double kl_sum = 0.0;
    for (int i = 0; i < num_clients; ++i) {
      auto &c = run.clients[static_cast<std::size_t>(i)];
      auto &r = results[static_cast<std::size_t>(i)];
      const double kl = kl_diag_gauss(r.update.q_hat_w, r.update.q_hat);
      kl_sum += kl;
      run.trace.add(round, i, "train", "kl_qw_q", kl, wall);
      if (mode == RunMode::coreset) {
        run.trace.add(round, i, "train", "support_churn", static_cast<double>(detail::support_churn(c.weights, r.weights)), wall);
        if (r.refreshed) {
          run.trace.add(round, i, "train", "coreset_quadratic", r.objective.quadratic, wall);
          run.trace.add(round, i, "train", "coreset_objective", r.objective.total(), wall);
        }
        run.trace.add(round, i, "train", "coreset_fallback", r.fallback ? 1.0 : 0.0, wall);
      }
      run.trace.add(round, i, "train", "support_size", static_cast<double>(r.weights.nonzeros()), wall);
      c.weights = r.weights;
      c.personal = r.update.personal;
      const auto &eval_set = c.test.size() > 0 ? c.test : c.data;
      const auto pe = evaluate(spec, c.personal->mu, eval_set);
      run.trace.add(round, i, c.test.size() > 0 ? "test" : "train", std::string("personal_") + metric_name(spec), pe.metric, wall);
    }
    run.trace.add(round, kGlobalClient, "train", "kl_qw_q", kl_sum / num_clients, wall);
    run.trace.add(round, kGlobalClient, "train", "theta_inf_norm", run.v_global.mu.cwiseAbs().maxCoeff(), wall);
    detail::record_global_eval(run.trace, round, spec, run.v_global, test, wall);
  }
  return run;
}

} // namespace corefed
