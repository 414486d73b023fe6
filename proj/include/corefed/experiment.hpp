#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "corefed/baselines.hpp"
#include "corefed/bnn.hpp"
#include "corefed/data.hpp"
#include "corefed/errors.hpp"
#include "corefed/federated.hpp"
#include "corefed/metrics.hpp"

#ifndef COREFED_VERSION
#define COREFED_VERSION "0.1.0-unknown"
#endif

namespace corefed {

inline const char *version_string() { return COREFED_VERSION; }

/// Raw `section.key -> value` settings. Every accepted key has a default, so
/// the map doubles as the documented key list.
class ConfigMap {
public:
  ConfigMap() : values_(defaults()) {}

  static const std::map<std::string, std::string> &defaults() {
    static const std::map<std::string, std::string> d = {
        {"experiment.mode", "coreset"},
        {"experiment.seed", "0"},
        {"experiment.output_dir", "out"},
        {"experiment.threads", "0"},
        {"data.source", "synthetic"},
        {"data.function", "sin"},
        {"data.input_dim", "2"},
        {"data.n_train", "3000"},
        {"data.n_test", "1000"},
        {"data.noise", "0.1"},
        {"data.regions", "0"},
        {"data.train_images", ""},
        {"data.train_labels", ""},
        {"data.test_images", ""},
        {"data.test_labels", ""},
        {"data.limit", "0"},
        {"data.test_limit", "0"},
        {"data.embed_dim", "0"},
        {"partition.clients", "3"},
        {"partition.classes_per_client", "2"},
        {"network.hidden", "32"},
        {"network.activation", "relu"},
        {"network.sigma_eps", "0.1"},
        {"federated.rounds", "20"},
        {"federated.local_rounds", "20"},
        {"federated.clients_per_round", "0"},
        {"federated.beta", "1"},
        {"federated.batch_size", "100"},
        {"federated.mc_samples", "1"},
        {"federated.eta1", "1e-3"},
        {"federated.eta2", "1e-3"},
        {"federated.zeta", "10"},
        {"federated.k_fraction", "0.5"},
        {"federated.snapshots", "64"},
        {"federated.outer_loops", "3"},
        {"federated.outer_tol", "1e-6"},
        {"federated.refresh_every", "1"},
        {"federated.rho0", "-3"},
        {"aiht.max_iter", "10"},
        {"aiht.tol", "1e-6"},
        {"aiht.kl_mode", "monitor"},
        {"fedavg.local_steps", "20"},
        {"fedavg.lr", "0.05"},
        {"fedavg.embed_dim", "64"},
    };
    return d;
  }

  /// Short names accepted at top level or on the command line.
  static std::string canonical(const std::string &key) {
    static const std::map<std::string, std::string> alias = {
        {"mode", "experiment.mode"},
        {"seed", "experiment.seed"},
        {"output_dir", "experiment.output_dir"},
        {"threads", "experiment.threads"},
        {"N_clients", "partition.clients"},
        {"T_rounds", "federated.rounds"},
        {"R_local", "federated.local_rounds"},
        {"S_subset", "federated.clients_per_round"},
        {"beta", "federated.beta"},
        {"b", "federated.batch_size"},
        {"K", "federated.mc_samples"},
        {"zeta", "federated.zeta"},
        {"k_fraction", "federated.k_fraction"},
        {"eta1", "federated.eta1"},
        {"eta2", "federated.eta2"},
    };
    if (auto it = alias.find(key); it != alias.end()) return it->second;
    return key;
  }

  void set(const std::string &key, const std::string &value) {
    const auto k = canonical(key);
    if (!defaults().contains(k)) throw ConfigError("unknown config key '" + key + "'");
    values_[k] = value;
  }

  const std::string &get(const std::string &key) const { return values_.at(canonical(key)); }
  const std::map<std::string, std::string> &values() const { return values_; }

  /// `key = value` lines under optional `[section]` headers; `#` and `;`
  /// start comments. Values land on top of `cfg`.
  static ConfigMap parse(const std::string &text, ConfigMap cfg = {}) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto c = line.find_first_of("#;"); c != std::string::npos) line.erase(c);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ParseError("config: unterminated section header", lineno);
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("config: expected key = value", lineno);
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ParseError("config: empty key", lineno);
      const auto full = section.empty() ? key : section + "." + key;
      try {
        cfg.set(full, trim(line.substr(eq + 1)));
      } catch (const ConfigError &e) {
        throw ConfigError(std::string(e.what()) + " on line " + std::to_string(lineno));
      }
    }
    return cfg;
  }

  static ConfigMap load(const std::string &path, ConfigMap base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), std::move(base));
  }

private:
  std::map<std::string, std::string> values_;
};

enum class DataSource { synthetic, idx };

/// Typed, validated view of a ConfigMap.
struct ExperimentConfig {
  // coreset | full | random_subset | fedavg | fedavg_random | submodular:<objective>
  std::string mode = "coreset";
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  int threads = 1;

  DataSource source = DataSource::synthetic;
  FunctionKind function = FunctionKind::sin;
  int input_dim = 2;
  Eigen::Index n_train = 3000;
  Eigen::Index n_test = 1000;
  double noise = 0.1;
  int regions = 0;  // 0: clients * classes_per_client
  std::string train_images, train_labels, test_images, test_labels;
  Eigen::Index limit = 0, test_limit = 0, embed_dim = 0;

  int clients = 3;
  int classes_per_client = 2;

  std::vector<int> hidden{32};
  Activation activation = Activation::relu;
  double sigma_eps = 0.1;

  FederatedConfig fed;
  FedAvgConfig fedavg;

  ConfigMap raw;

  bool is_federated() const { return mode == "coreset" || mode == "full" || mode == "random_subset"; }

  RunMode run_mode() const {
    if (mode == "full") return RunMode::full;
    if (mode == "random_subset") return RunMode::random_subset;
    return RunMode::coreset;
  }

  /// Parses and checks every field; all problems are reported in one error.
  static ExperimentConfig from_map(const ConfigMap &m) {
    ExperimentConfig c;
    c.raw = m;
    std::vector<std::string> errs;
    auto num = [&]<typename T>(const std::string &key, T &out) {
      const auto &s = m.get(key);
      if constexpr (std::is_floating_point_v<T>) {
        try {
          std::size_t used = 0;
          out = static_cast<T>(std::stod(s, &used));
          if (used != s.size()) throw std::invalid_argument(s);
        } catch (const std::exception &) {
          errs.push_back(key + ": not a number '" + s + "'");
        }
      } else {
        const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) errs.push_back(key + ": not an integer '" + s + "'");
      }
    };
    auto check = [&](bool ok, const std::string &msg) {
      if (!ok) errs.push_back(msg);
    };

    c.mode = m.get("experiment.mode");
    num("experiment.seed", c.seed);
    c.output_dir = m.get("experiment.output_dir");
    num("experiment.threads", c.threads);

    const auto &src = m.get("data.source");
    if (src == "synthetic") {
      c.source = DataSource::synthetic;
    } else if (src == "idx") {
      c.source = DataSource::idx;
    } else {
      errs.push_back("data.source: expected synthetic or idx, got '" + src + "'");
    }
    try {
      c.function = parse_function_kind(m.get("data.function"));
    } catch (const std::exception &e) {
      errs.push_back(std::string("data.function: ") + e.what());
    }
    num("data.input_dim", c.input_dim);
    num("data.n_train", c.n_train);
    num("data.n_test", c.n_test);
    num("data.noise", c.noise);
    num("data.regions", c.regions);
    c.train_images = m.get("data.train_images");
    c.train_labels = m.get("data.train_labels");
    c.test_images = m.get("data.test_images");
    c.test_labels = m.get("data.test_labels");
    num("data.limit", c.limit);
    num("data.test_limit", c.test_limit);
    num("data.embed_dim", c.embed_dim);
    num("partition.clients", c.clients);
    num("partition.classes_per_client", c.classes_per_client);

    c.hidden.clear();
    {
      std::stringstream ss(m.get("network.hidden"));
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        int h = 0;
        const auto b = tok.find_first_not_of(' ');
        const auto t = b == std::string::npos ? std::string() : tok.substr(b, tok.find_last_not_of(' ') - b + 1);
        const auto r = std::from_chars(t.data(), t.data() + t.size(), h);
        if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size() || h < 1) {
          errs.push_back("network.hidden: expected comma-separated positive widths");
          break;
        }
        c.hidden.push_back(h);
      }
    }
    try {
      c.activation = parse_activation(m.get("network.activation"));
    } catch (const std::exception &e) {
      errs.push_back(std::string("network.activation: ") + e.what());
    }
    num("network.sigma_eps", c.sigma_eps);

    auto &f = c.fed;
    num("federated.rounds", f.rounds);
    num("federated.local_rounds", f.local_rounds);
    num("federated.clients_per_round", f.clients_per_round);
    num("federated.beta", f.beta);
    num("federated.batch_size", f.batch_size);
    num("federated.mc_samples", f.mc_samples);
    num("federated.eta1", f.eta1);
    num("federated.eta2", f.eta2);
    num("federated.zeta", f.zeta);
    num("federated.k_fraction", f.k_fraction);
    num("federated.snapshots", f.snapshots);
    num("federated.outer_loops", f.outer_loops);
    num("federated.outer_tol", f.outer_tol);
    num("federated.refresh_every", f.refresh_every);
    num("federated.rho0", f.rho0);
    num("aiht.max_iter", f.aiht.max_iter);
    num("aiht.tol", f.aiht.tol);
    const auto &klm = m.get("aiht.kl_mode");
    if (klm == "monitor") {
      f.aiht.kl_mode = KlMode::monitor;
    } else if (klm == "finite_difference" || klm == "fd") {
      f.aiht.kl_mode = KlMode::finite_difference;
    } else {
      errs.push_back("aiht.kl_mode: expected monitor or finite_difference, got '" + klm + "'");
    }
    f.seed = c.seed;

    auto &g = c.fedavg;
    g.rounds = f.rounds;
    g.batch_size = f.batch_size;
    g.clients_per_round = f.clients_per_round;
    g.k_fraction = f.k_fraction;
    g.rho0 = f.rho0;
    g.seed = c.seed;
    num("fedavg.local_steps", g.local_steps);
    num("fedavg.lr", g.lr);
    num("fedavg.embed_dim", g.embed_dim);
    if (c.mode == "fedavg") {
      g.selector = SelectorKind::none;
    } else if (c.mode == "fedavg_random") {
      g.selector = SelectorKind::random;
    } else if (c.mode.rfind("submodular:", 0) == 0) {
      try {
        g.selector = parse_selector(c.mode.substr(11));
      } catch (const std::exception &e) {
        errs.push_back(std::string("experiment.mode: ") + e.what());
      }
    } else if (!c.is_federated()) {
      errs.push_back("experiment.mode: unknown mode '" + c.mode +
                     "' (coreset, full, random_subset, fedavg, fedavg_random, submodular:<logdet|disparity_sum|disparity_min>)");
    }

    check(c.threads >= 0, "experiment.threads must be >= 0 (0 = all cores)");
    check(!c.output_dir.empty(), "experiment.output_dir must be set");
    check(c.clients >= 1, "partition.clients must be >= 1");
    check(c.classes_per_client >= 1, "partition.classes_per_client must be >= 1");
    check(f.rounds >= 1, "federated.rounds must be >= 1");
    check(f.local_rounds >= 1, "federated.local_rounds must be >= 1");
    check(f.clients_per_round >= 0 && f.clients_per_round <= c.clients,
          "federated.clients_per_round must be in [0, partition.clients]");
    check(f.beta > 0.0 && f.beta <= 1.0, "federated.beta must be in (0, 1]");
    check(f.batch_size >= 1, "federated.batch_size must be >= 1");
    check(f.mc_samples >= 1, "federated.mc_samples must be >= 1");
    check(f.eta1 > 0.0 && f.eta2 > 0.0, "federated.eta1/eta2 must be positive");
    check(f.zeta > 0.0, "federated.zeta must be positive");
    check(f.k_fraction > 0.0 && f.k_fraction <= 1.0, "federated.k_fraction must be in (0, 1]");
    check(f.snapshots >= 1, "federated.snapshots must be >= 1");
    check(f.outer_loops >= 1, "federated.outer_loops must be >= 1");
    check(f.refresh_every >= 1, "federated.refresh_every must be >= 1");
    check(f.aiht.max_iter >= 1, "aiht.max_iter must be >= 1");
    check(g.local_steps >= 1, "fedavg.local_steps must be >= 1");
    check(g.lr > 0.0, "fedavg.lr must be positive");
    check(g.embed_dim >= 1, "fedavg.embed_dim must be >= 1");
    check(c.sigma_eps > 0.0, "network.sigma_eps must be positive");
    check(c.embed_dim >= 0, "data.embed_dim must be >= 0");
    if (c.source == DataSource::synthetic) {
      check(c.input_dim >= 1, "data.input_dim must be >= 1");
      check(c.n_train >= 1 && c.n_test >= 1, "data.n_train and data.n_test must be >= 1");
      check(c.noise >= 0.0, "data.noise must be >= 0");
      check(c.regions >= 0, "data.regions must be >= 0 (0 = clients * classes_per_client)");
      check(c.embed_dim <= c.input_dim, "data.embed_dim cannot exceed data.input_dim");
    } else {
      for (const auto *k : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"}) {
        check(!m.get(k).empty(), std::string(k) + " is required when data.source = idx");
      }
    }
    // Per-client budget check needs the smallest client, which is known only
    // after partitioning; the rough bound here catches the obvious cases.
    if (f.k_fraction > 0.0 && c.source == DataSource::synthetic && c.clients >= 1) {
      check(f.k_fraction * static_cast<double>(c.n_train) / c.clients >= 1.0,
            "federated.k_fraction too small: k_fraction * client size < 1");
    }

    if (const char *env = std::getenv("CORESET_FED_THREADS"); env && *env) {
      int cap = 0;
      const std::string s(env);
      const auto r = std::from_chars(s.data(), s.data() + s.size(), cap);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size() || cap < 1) {
        errs.push_back("CORESET_FED_THREADS must be a positive integer");
      } else {
        if (c.threads == 0) c.threads = cap;
        c.threads = std::min(c.threads, cap);
      }
    }
    if (c.threads == 0) c.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    f.threads = c.threads;
    g.threads = c.threads;

    if (!errs.empty()) {
      std::string msg = "invalid configuration:";
      for (const auto &e : errs) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
    return c;
  }
};

struct ExperimentData {
  std::vector<LabeledDataset> clients;
  LabeledDataset test;
  NetworkSpec spec;
};

/// Builds the train/test data, partitions it non-iid and sizes the network.
inline ExperimentData prepare_data(const ExperimentConfig &c) {
  ExperimentData out;
  LabeledDataset train;
  std::vector<int> shard_labels;
  if (c.source == DataSource::synthetic) {
    const RegressionFunction f(c.function, c.input_dim, c.seed);
    train = synth_regression(f, c.n_train, c.noise, c.seed);
    out.test = synth_regression(f, c.n_test, c.noise, derive_seed(c.seed, {tag(Stream::data), 1}));
    shard_labels = region_labels(train.x, c.regions > 0 ? c.regions : c.clients * c.classes_per_client);
  } else {
    train = load_idx_dataset(c.train_images, c.train_labels, c.limit);
    out.test = load_idx_dataset(c.test_images, c.test_labels, c.test_limit);
    shard_labels = train.labels;
  }
  if (c.embed_dim > 0 && c.embed_dim != train.x.cols()) {
    train.x = embed_vectors(train.x, c.embed_dim, c.seed);
    out.test.x = embed_vectors(out.test.x, c.embed_dim, c.seed);
  }

  const auto plan = partition_noniid(shard_labels, c.clients, c.classes_per_client, c.seed);
  for (const auto &a : plan.assignments) out.clients.push_back(train.subset(a));

  std::size_t smallest = out.clients.front().x.rows();
  for (const auto &d : out.clients) smallest = std::min<std::size_t>(smallest, static_cast<std::size_t>(d.size()));
  if (c.fed.k_fraction * static_cast<double>(smallest) < 1.0) {
    throw ConfigError("federated.k_fraction too small: smallest client has " + std::to_string(smallest) + " points");
  }

  out.spec.layer_sizes.push_back(static_cast<int>(train.x.cols()));
  for (int h : c.hidden) out.spec.layer_sizes.push_back(h);
  out.spec.activation = c.activation;
  if (train.is_classification()) {
    int classes = 2;
    for (int l : train.labels) classes = std::max(classes, l + 1);
    for (int l : out.test.labels) classes = std::max(classes, l + 1);
    out.spec.layer_sizes.push_back(classes);
    out.spec.likelihood = LikelihoodKind::categorical;
  } else {
    out.spec.layer_sizes.push_back(static_cast<int>(train.y.cols()));
    out.spec.likelihood = LikelihoodKind::gaussian_regression;
  }
  out.spec.sigma_eps = c.sigma_eps;
  return out;
}

struct ExperimentResult {
  MetricsTrace trace;
  nlohmann::ordered_json summary;
};

inline nlohmann::ordered_json build_summary(const ExperimentConfig &c, const MetricsTrace &trace) {
  nlohmann::ordered_json j;
  j["version"] = version_string();
  j["mode"] = c.mode;
  j["seed"] = c.seed;
  const int last_round = trace.empty() ? 0 : trace.max_round();
  j["rounds_completed"] = last_round;
  nlohmann::ordered_json fin = nlohmann::ordered_json::object();
  for (const auto &r : trace.rows()) {
    if (r.round == last_round && r.client_id == kGlobalClient) fin[r.split + "." + r.metric] = r.value;
  }
  j["final"] = fin;
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  for (const auto &[k, v] : c.raw.values()) cfg[k] = v;
  j["config"] = cfg;
  return j;
}

/// data -> partition -> runner -> metrics.
inline ExperimentResult run_experiment(const ExperimentConfig &c) {
  const auto data = prepare_data(c);
  ExperimentResult res;
  if (c.is_federated()) {
    res.trace = run_federated(data.spec, c.fed, data.clients, data.test, c.run_mode()).trace;
  } else {
    res.trace = fedavg_run(data.spec, c.fedavg, data.clients, data.test).trace;
  }
  res.summary = build_summary(c, res.trace);
  return res;
}

/// Writes metrics.csv and summary.json into dir (created if missing).
inline void emit_metrics(const MetricsTrace &trace, const nlohmann::ordered_json &summary,
                         const std::filesystem::path &dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  write_text_file(dir / "metrics.csv", metrics_csv_string(trace));
  write_text_file(dir / "summary.json", summary.dump(2) + "\n");
}

} // namespace corefed
