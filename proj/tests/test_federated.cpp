#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace corefed;
using testutil::randn;

namespace {

struct Setup {
  NetworkSpec spec;
  std::vector<LabeledDataset> clients;
  LabeledDataset test;
};

Setup small_setup(int num_clients, Eigen::Index n_total, std::uint64_t seed = 0) {
  Setup s;
  s.spec = NetworkSpec{{2, 8, 1}, Activation::tanh, LikelihoodKind::gaussian_regression, 0.1};
  const RegressionFunction f(FunctionKind::sin, 2, seed);
  const auto train = synth_regression(f, n_total, 0.1, seed);
  s.test = synth_regression(f, 200, 0.1, seed + 1);
  const auto plan = partition_noniid(region_labels(train.x, 2 * num_clients), num_clients, 2, seed);
  for (const auto &a : plan.assignments) s.clients.push_back(train.subset(a));
  return s;
}

FederatedConfig small_config() {
  FederatedConfig c;
  c.rounds = 3;
  c.local_rounds = 5;
  c.batch_size = 20;
  c.eta1 = c.eta2 = 1e-5;
  c.snapshots = 16;
  c.k_fraction = 0.3;
  return c;
}

} // namespace

TEST(SampleClients, FullSetAndDeterminism) {
  EXPECT_EQ(sample_clients(3, 3, 7), (std::vector<std::size_t>{0, 1, 2}));
  const auto a = sample_clients(10, 1, 99);
  EXPECT_EQ(a, sample_clients(10, 1, 99));
  ASSERT_EQ(a.size(), 1u);
  EXPECT_LT(a[0], 10u);
  EXPECT_THROW(sample_clients(3, 4, 0), DomainError);
  EXPECT_THROW(sample_clients(3, 0, 0), DomainError);
}

TEST(SampleClients, InclusionFrequency) {
  const int draws = 10000, n = 10, s = 3;
  std::vector<int> hits(n, 0);
  for (int d = 0; d < draws; ++d) {
    const auto sel = sample_clients(n, s, static_cast<std::uint64_t>(d));
    EXPECT_EQ(std::set<std::size_t>(sel.begin(), sel.end()).size(), sel.size());
    for (auto i : sel) ++hits[i];
  }
  const double p = static_cast<double>(s) / n;
  const double sd = std::sqrt(draws * p * (1 - p));
  for (int h : hits) EXPECT_LT(std::abs(h - draws * p), 3.0 * sd + 1);
}

TEST(WeightedMinibatch, UniformSupportReturnsSupport) {
  CoresetWeights w{Vector{{0.0, 2.0, 2.0, 0.0, 2.0}}, 3};
  Rng rng(1);
  auto b = weighted_minibatch(w, 3, rng);
  EXPECT_EQ(b.indices, (std::vector<std::size_t>{1, 2, 4}));
  for (double x : b.weights) EXPECT_DOUBLE_EQ(x, 6.0 / 5.0);
}

TEST(WeightedMinibatch, OneHotRepeatsThePoint) {
  CoresetWeights w{Vector{{0.0, 0.0, 5.0, 0.0}}, 1};
  Rng rng(2);
  const auto b = weighted_minibatch(w, 7, rng);
  EXPECT_EQ(b.indices, std::vector<std::size_t>(7, 2));
}

TEST(WeightedMinibatch, ProportionalFrequency) {
  CoresetWeights w{Vector{{1.0, 3.0}}, 2};
  Rng rng(3);
  int second = 0;
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) second += weighted_minibatch(w, 1, rng).indices[0] == 1;
  EXPECT_NEAR(second / static_cast<double>(draws), 0.75, 3.0 * std::sqrt(0.75 * 0.25 / draws));
}

TEST(WeightedMinibatch, UnbiasedForWeightedSum) {
  // (n/b) sum_draws weight * x_j estimates sum_j w_j x_j
  CoresetWeights w{Vector{{0.5, 0.0, 2.0, 1.5, 0.0, 4.0}}, 4};
  const Vector x{{1.0, 9.0, -2.0, 3.0, 7.0, 0.5}};
  Rng rng(4);
  double acc = 0.0;
  const int reps = 20000, b = 3;
  for (int r = 0; r < reps; ++r) {
    const auto mb = weighted_minibatch(w, b, rng);
    double s = 0.0;
    for (std::size_t i = 0; i < mb.size(); ++i) s += mb.weights[i] * x[static_cast<Eigen::Index>(mb.indices[i])];
    acc += 6.0 / b * s;
  }
  EXPECT_NEAR(acc / reps, w.w.dot(x), 0.05);
}

TEST(WeightedMinibatch, Errors) {
  Rng rng(5);
  EXPECT_THROW(weighted_minibatch({Vector::Zero(3), 2}, 2, rng), DomainError);
  EXPECT_THROW(weighted_minibatch({Vector{{1.0, -1.0}}, 2}, 2, rng), DomainError);
}

TEST(Aggregate, BetaZeroKeepsGlobal) {
  std::mt19937_64 rng(6);
  const auto v = testutil::random_q(rng, 4);
  EXPECT_EQ(aggregate(v, {testutil::random_q(rng, 4)}, 0.0), v);
}

TEST(Aggregate, BetaOneIsMean) {
  MeanFieldGaussian v{Vector::Zero(2), Vector::Zero(2)};
  MeanFieldGaussian a{Vector{{1.0, 2.0}}, Vector{{-1.0, 0.0}}};
  MeanFieldGaussian b{Vector{{3.0, 4.0}}, Vector{{1.0, 2.0}}};
  const auto m = aggregate(v, {a, b}, 1.0);
  EXPECT_EQ(m.mu, (Vector{{2.0, 3.0}}));
  EXPECT_EQ(m.rho, (Vector{{0.0, 1.0}}));
}

TEST(Aggregate, HalfBlend) {
  MeanFieldGaussian v{Vector{{4.0}}, Vector{{-2.0}}};
  MeanFieldGaussian a{Vector{{0.0}}, Vector{{0.0}}};
  MeanFieldGaussian b{Vector{{2.0}}, Vector{{2.0}}};
  const auto m = aggregate(v, {a, b}, 0.5);
  EXPECT_DOUBLE_EQ(m.mu[0], 0.5 * 4.0 + 0.25 * (0.0 + 2.0));
  EXPECT_DOUBLE_EQ(m.rho[0], 0.5 * -2.0 + 0.25 * (0.0 + 2.0));
}

TEST(Aggregate, DimensionMismatch) {
  MeanFieldGaussian v{Vector::Zero(2), Vector::Zero(2)};
  EXPECT_THROW(aggregate(v, {MeanFieldGaussian{Vector::Zero(3), Vector::Zero(3)}}, 0.5), DimensionError);
}

TEST(ClientUpdate, ZeroRoundsReturnsInputs) {
  auto s = small_setup(1, 60);
  ClientState c{0, s.clients[0]};
  Rng rng(7);
  const auto v = init_variational(s.spec, rng);
  LocalTraining lt;
  lt.rounds = 0;
  const auto r = client_update(s.spec, c, v, {Vector::Ones(c.data.size()), static_cast<int>(c.data.size())}, lt, 1);
  EXPECT_EQ(r.v_z, v);
  EXPECT_EQ(r.q_hat, v);
  EXPECT_EQ(r.q_hat_w, v);
}

TEST(ClientUpdate, LargeZetaPinsToGlobal) {
  auto s = small_setup(1, 60);
  s.spec.sigma_eps = 1.0;
  ClientState c{0, s.clients[0]};
  const auto n = c.data.size();
  Rng rng(8);
  auto v = init_variational(s.spec, rng, softplus_inverse(1.0));
  CoresetWeights w{Vector::Ones(n), static_cast<int>(n)};
  auto drift = [&](double zeta) {
    LocalTraining lt;
    lt.rounds = 200;
    lt.batch_size = 20;
    lt.eta1 = lt.eta2 = 5e-7;
    lt.zeta = zeta;
    const auto r = client_update(s.spec, c, v, w, lt, 3);
    return std::max((r.q_hat.mu - v.mu).cwiseAbs().maxCoeff(), (r.q_hat.rho - v.rho).cwiseAbs().maxCoeff());
  };
  const double loose = drift(1.0), pinned = drift(1e6);
  // Calibration run: zeta = 1 drifts ~2e-3 over 200 steps, zeta = 1e6 ~4e-5.
  EXPECT_GT(loose, 5e-4);
  EXPECT_LT(pinned, 1e-4);
  EXPECT_LT(pinned, loose / 20);
}

TEST(ClientUpdate, SinglePointLinearModelElboDecreases) {
  NetworkSpec spec{{1, 1}, Activation::relu, LikelihoodKind::gaussian_regression, 1.0};
  ClientState c;
  c.data.x = Matrix::Constant(1, 1, 0.8);
  c.data.y = Matrix::Constant(1, 1, 1.7);
  MeanFieldGaussian v{Vector{{-0.5, 0.2}}, Vector::Constant(2, softplus_inverse(1.0))};
  CoresetWeights w{Vector::Ones(1), 1};
  Rng eval_rng(9);
  const auto eval_noise = standard_normal_draws(eval_rng, 2, 4000);
  Minibatch all{{0}, {}};
  auto elbo = [&](const MeanFieldGaussian &q) { return elbo_estimate(q, v, {spec, c.data, all, 1.0, 10.0, eval_noise}); };
  LocalTraining lt;
  lt.batch_size = 1;
  lt.mc_samples = 4;
  lt.zeta = 10.0;
  lt.eta1 = lt.eta2 = 1e-3;
  double prev = elbo(v);
  int down = 0;
  for (int r = 1; r <= 50; ++r) {
    lt.rounds = r;
    const double cur = elbo(client_update(spec, c, v, w, lt, 11).q_hat);
    down += cur < prev;
    prev = cur;
  }
  EXPECT_GE(down, 45) << down << "/50";
  EXPECT_LT(prev, elbo(v));
}

TEST(ClientUpdate, WeightLengthMustMatch) {
  auto s = small_setup(1, 40);
  ClientState c{0, s.clients[0]};
  Rng rng(10);
  const auto v = init_variational(s.spec, rng);
  EXPECT_THROW(client_update(s.spec, c, v, {Vector::Ones(3), 3}, LocalTraining{}, 0), DimensionError);
}

TEST(CoresetOptUpdate, FullBudgetFitsTargetAndTraceDescends) {
  auto s = small_setup(1, 120);
  ClientState c{0, s.clients[0]};
  auto cfg = small_config();
  cfg.k_fraction = 1.0;
  cfg.outer_loops = 4;
  cfg.aiht.max_iter = 200;
  cfg.aiht.tol = 1e-12;
  Rng rng(11);
  const auto v = init_variational(s.spec, rng);
  const auto r = coreset_opt_update(s.spec, c, v, cfg, 5);
  ASSERT_TRUE(r.refreshed);
  EXPECT_TRUE(r.weights.valid());
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1] + 1e-6);
  // residual small relative to ||P||^2 of the same embedding
  const auto emb = build_embedding(s.spec, draw_snapshots(r.update.q_hat, cfg.snapshots, 5), c.data);
  EXPECT_LT(quadratic_objective(emb, r.weights.w), 1e-3 * emb.target.squaredNorm());
}

TEST(CoresetOptUpdate, IdenticalPointsSinglePointHasZeroResidual) {
  NetworkSpec spec{{2, 4, 1}, Activation::tanh, LikelihoodKind::gaussian_regression, 0.5};
  ClientState c;
  c.data.x = Matrix::Constant(10, 2, 0.3);
  c.data.y = Matrix::Constant(10, 1, -0.2);
  auto cfg = small_config();
  cfg.k_fraction = 0.1;
  Rng rng(12);
  const auto v = init_variational(spec, rng);
  const auto r = coreset_opt_update(spec, c, v, cfg, 6);
  EXPECT_EQ(r.weights.nonzeros(), 1);
  EXPECT_LT(r.objective.quadratic, 1e-18 + 1e-12 * r.objective_trace.front());
  EXPECT_NEAR(r.weights.w.sum(), 10.0, 1e-9);
}

TEST(CoresetOptUpdate, EmptySolutionFallsBack) {
  auto s = small_setup(1, 50);
  ClientState c{0, s.clients[0]};
  auto cfg = small_config();
  cfg.snapshots = 1;  // zero embedding: the solver cannot pick anything
  Rng rng(13);
  const auto v = init_variational(s.spec, rng);
  const auto r = coreset_opt_update(s.spec, c, v, cfg, 7);
  EXPECT_TRUE(r.fallback);
  EXPECT_FALSE(r.weights.empty());
  EXPECT_TRUE(r.weights.valid());
}

TEST(CoresetOptUpdate, FiniteDifferenceKlModeRuns) {
  auto s = small_setup(1, 40);
  ClientState c{0, s.clients[0]};
  auto cfg = small_config();
  cfg.local_rounds = 2;
  cfg.aiht.max_iter = 2;
  cfg.aiht.kl_mode = KlMode::finite_difference;
  Rng rng(14);
  const auto v = init_variational(s.spec, rng);
  const auto r = coreset_opt_update(s.spec, c, v, cfg, 8);
  EXPECT_TRUE(r.weights.valid());
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i) EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1] + 1e-6);
}

TEST(RunFederated, ZeroRoundsRecordsInitialEvaluationOnly) {
  auto s = small_setup(2, 100);
  auto cfg = small_config();
  cfg.rounds = 0;
  const auto run = run_federated(s.spec, cfg, s.clients, s.test, RunMode::coreset);
  ASSERT_FALSE(run.trace.empty());
  for (const auto &r : run.trace.rows()) EXPECT_EQ(r.round, 0);
  EXPECT_EQ(run.trace.series("mse").size(), 1u);
}

TEST(RunFederated, SingleClientFullModeMatchesStandaloneTraining) {
  auto s = small_setup(1, 80);
  auto cfg = small_config();
  cfg.k_fraction = 1.0;
  const auto run = run_federated(s.spec, cfg, s.clients, s.test, RunMode::full);

  // Same computation written directly against the bnn primitives.
  const auto &d = s.clients[0];
  const auto n = d.size();
  Rng init(derive_seed(cfg.seed, {tag(Stream::init)}));
  auto v = init_variational(s.spec, init, cfg.rho0);
  const CoresetWeights ones{Vector::Ones(n), static_cast<int>(n)};
  for (int t = 0; t < cfg.rounds; ++t) {
    const auto seed = derive_seed(cfg.seed, {0, static_cast<std::uint64_t>(t)});
    const auto z = v;
    for (int step = 0; step < cfg.local_rounds; ++step) {
      Rng nr(derive_seed(seed, {tag(Stream::mc_noise), static_cast<std::uint64_t>(step)}));
      Rng wr(derive_seed(seed, {tag(Stream::weighted_batch), static_cast<std::uint64_t>(step)}));
      const auto noise = standard_normal_draws(nr, v.size(), cfg.mc_samples);
      const auto batch = weighted_minibatch(ones, cfg.batch_size, wr);
      sgd_step(v, elbo_gradient(v, z, {s.spec, d, batch, static_cast<double>(n), cfg.zeta, noise}), cfg.eta2);
    }
  }
  EXPECT_EQ(run.v_global, v);
  EXPECT_EQ(*run.trace.last("mse"), evaluate(s.spec, v.mu, s.test).metric);
}

TEST(RunFederated, DeterministicAcrossThreadCounts) {
  auto s = small_setup(3, 150);
  auto cfg = small_config();
  cfg.clients_per_round = 2;
  cfg.threads = 1;
  const auto a = metrics_csv_string(run_federated(s.spec, cfg, s.clients, s.test, RunMode::coreset).trace);
  cfg.threads = 3;
  const auto b = metrics_csv_string(run_federated(s.spec, cfg, s.clients, s.test, RunMode::coreset).trace);
  EXPECT_EQ(a, b);
  cfg.seed = 1;
  EXPECT_NE(a, metrics_csv_string(run_federated(s.spec, cfg, s.clients, s.test, RunMode::coreset).trace));
}

TEST(RunFederated, CoresetWeightsStayValidEveryRound) {
  auto s = small_setup(2, 120);
  auto cfg = small_config();
  cfg.rounds = 4;
  const auto run = run_federated(s.spec, cfg, s.clients, s.test, RunMode::coreset);
  for (int i = 0; i < 2; ++i) {
    const int k = coreset_budget(s.clients[static_cast<std::size_t>(i)].size(), cfg.k_fraction);
    const auto sizes = run.trace.series("support_size", "train", i);
    ASSERT_EQ(sizes.size(), 4u);
    for (double sz : sizes) {
      EXPECT_GE(sz, 1.0);
      EXPECT_LE(sz, k);
    }
    EXPECT_TRUE(run.clients[static_cast<std::size_t>(i)].weights.valid());
  }
  EXPECT_TRUE(run.v_global.mu.allFinite());
  EXPECT_TRUE(run.v_global.rho.allFinite());
}

TEST(RunFederated, RandomSubsetIsFixedOnce) {
  auto s = small_setup(2, 100);
  auto cfg = small_config();
  const auto run = run_federated(s.spec, cfg, s.clients, s.test, RunMode::random_subset);
  for (int i = 0; i < 2; ++i) {
    const auto &c = run.clients[static_cast<std::size_t>(i)];
    const int k = coreset_budget(c.data.size(), cfg.k_fraction);
    EXPECT_EQ(c.weights.nonzeros(), k);
    EXPECT_NEAR(c.weights.w.sum(), static_cast<double>(c.data.size()), 1e-9);
    Rng rng(derive_seed(cfg.seed, {tag(Stream::subset), static_cast<std::uint64_t>(i)}));
    const auto expected = sample_without_replacement(rng, static_cast<std::size_t>(c.data.size()), static_cast<std::size_t>(k));
    EXPECT_EQ(c.weights.support(), expected);
  }
}

TEST(RunFederated, ConfigValidation) {
  auto s = small_setup(2, 60);
  auto cfg = small_config();
  cfg.beta = 0.0;
  EXPECT_THROW(run_federated(s.spec, cfg, s.clients, s.test, RunMode::full), ConfigError);
  cfg = small_config();
  cfg.clients_per_round = 3;
  EXPECT_THROW(run_federated(s.spec, cfg, s.clients, s.test, RunMode::full), ConfigError);
}
