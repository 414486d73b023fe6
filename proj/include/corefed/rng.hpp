#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace corefed {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a master seed and a path of
/// integers, e.g. (seed, client_id, round, purpose). Order matters.
inline constexpr std::uint64_t derive_seed(std::uint64_t master,
                                           std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(master);
  for (auto p : path) {
    h = mix64(h ^ mix64(p + 0x632BE59BD9B4E019ULL));
  }
  return h;
}

/// Stream tags used with derive_seed so different consumers of the same
/// (client, round) never share numbers.
enum class Stream : std::uint64_t {
  client_selection = 1,
  full_batch = 2,
  weighted_batch = 3,
  mc_noise = 4,
  snapshots = 5,
  init = 6,
  data = 7,
  partition = 8,
  subset = 9,
  embedding = 10,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

inline Eigen::VectorXd standard_normal(Rng &rng, Eigen::Index dim) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd g(dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    g[i] = nd(rng);
  }
  return g;
}

inline std::vector<Eigen::VectorXd> standard_normal_draws(Rng &rng, Eigen::Index dim, int count) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    out.push_back(standard_normal(rng, dim));
  }
  return out;
}

/// Uniformly random `k`-subset of {0..n-1} (partial Fisher-Yates), sorted.
inline std::vector<std::size_t> sample_without_replacement(Rng &rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) {
    pool[i] = i;
  }
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

} // namespace corefed
