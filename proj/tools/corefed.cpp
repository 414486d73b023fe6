#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "corefed/corefed.hpp"

namespace {

using namespace corefed;

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  std::string mode;
  std::string out;
  double k_fraction = -1.0;
  int rounds = -1;
};

void add_common(CLI::App *cmd, CommonOpts &o, bool with_mode) {
  cmd->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--seed", o.seed, "master seed");
  if (with_mode) cmd->add_option("--mode", o.mode, "run mode");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--k-fraction", o.k_fraction, "coreset budget as a fraction of client size");
  cmd->add_option("--rounds", o.rounds, "global rounds");
}

// Subcommand default, then the config file, then --set, then the dedicated flags.
ExperimentConfig resolve(const CommonOpts &o, const std::string &default_mode = {}) {
  ConfigMap base;
  if (!default_mode.empty()) base.set("experiment.mode", default_mode);
  ConfigMap m = o.config.empty() ? base : ConfigMap::load(o.config, base);
  for (const auto &kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    m.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed >= 0) m.set("experiment.seed", std::to_string(o.seed));
  if (!o.mode.empty()) m.set("experiment.mode", o.mode);
  if (!o.out.empty()) m.set("experiment.output_dir", o.out);
  if (o.k_fraction >= 0.0) m.set("federated.k_fraction", detail::format_double(o.k_fraction));
  if (o.rounds >= 0) m.set("federated.rounds", std::to_string(o.rounds));
  return ExperimentConfig::from_map(m);
}

int run_and_emit(const ExperimentConfig &c) {
  const auto res = run_experiment(c);
  emit_metrics(res.trace, res.summary, c.output_dir);
  std::cout << "wrote " << (std::filesystem::path(c.output_dir) / "metrics.csv").string() << " ("
            << res.trace.size() << " rows)\n";
  return 0;
}

int data_gen(const CommonOpts &o) {
  const auto c = resolve(o);
  const auto d = prepare_data(c);
  const std::filesystem::path dir(c.output_dir);
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < d.clients.size(); ++i) {
    std::ostringstream os;
    write_dataset_csv(os, d.clients[i]);
    write_text_file(dir / ("client_" + std::to_string(i) + ".csv"), os.str());
  }
  std::ostringstream os;
  write_dataset_csv(os, d.test);
  write_text_file(dir / "test.csv", os.str());
  std::cout << "wrote " << d.clients.size() << " client files and test.csv to " << dir.string() << "\n";
  return 0;
}

std::string read_text(const std::string &path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

struct SolveOpts {
  std::string phi, target, out;
  int k = 0;
  int max_iter = 10;
  double tol = 1e-6;
};

int coreset_solve(const SolveOpts &o) {
  LikelihoodEmbedding emb;
  emb.phi = parse_csv_matrix(read_text(o.phi));
  const Matrix t = parse_csv_matrix(read_text(o.target));
  if (t.rows() != 1 && t.cols() != 1) throw DimensionError("target must be a single row or column");
  emb.target = t.reshaped();
  detail::require_same_size(static_cast<std::size_t>(emb.target.size()), static_cast<std::size_t>(emb.phi.rows()),
                            "coreset-solve: target length vs Phi rows");
  AihtOptions opts;
  opts.max_iter = o.max_iter;
  opts.tol = o.tol;
  const auto r = aiht_solve(emb, o.k, opts);
  nlohmann::ordered_json j;
  j["k"] = o.k;
  j["iterations"] = r.iterations;
  j["objective"] = r.quadratic;
  j["support"] = r.weights.support();
  j["weights"] = std::vector<double>(r.weights.w.data(), r.weights.w.data() + r.weights.w.size());
  const auto text = j.dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    write_text_file(o.out, text);
  }
  return 0;
}

struct TheoryOpts {
  double delta = 1.5;
  std::string out;
};

int theory_check(const TheoryOpts &o) {
  struct Arch {
    const char *name;
    int L;
    double T, M, s0;
  };
  const Arch archs[] = {{"small", 1, 50, 16, 4}, {"medium", 2, 500, 64, 16}, {"large", 3, 5000, 256, 64}};
  std::ostringstream os;
  os << "arch,n,n_k,type1_gap,type2_gap,type1_pos,type2_pos,lower_n,lower_n_k,lower_ordered\n";
  bool all = true;
  for (const auto &a : archs) {
    for (double n = 100; n <= 1e6; n *= 10) {
      theory::RateParams p;
      p.L = a.L;
      p.T = a.T;
      p.M = a.M;
      p.s0 = a.s0;
      p.n = n;
      p.n_k = n / 2;
      p.delta = o.delta;
      const auto r = theory::drift_check(p);
      const auto full = theory::minimax_envelope(p, p.n);
      const auto core = theory::minimax_envelope(p, p.n_k);
      const bool ordered = core.first > full.first;
      all = all && r.type1_pos && r.type2_pos && ordered;
      os << a.name << ',' << detail::format_double(n) << ',' << detail::format_double(p.n_k) << ','
         << detail::format_double(r.type1_gap) << ',' << detail::format_double(r.type2_gap) << ','
         << r.type1_pos << ',' << r.type2_pos << ',' << detail::format_double(full.first) << ','
         << detail::format_double(core.first) << ',' << ordered << '\n';
    }
  }
  if (o.out.empty()) {
    std::cout << os.str();
  } else {
    write_text_file(o.out, os.str());
  }
  std::cerr << (all ? "all drift terms positive\n" : "some drift terms are not positive\n");
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Federated Bayesian coreset experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version_string()));

  CommonOpts gen_o, fed_o, base_o;
  auto *gen = app.add_subcommand("data-gen", "generate and partition a dataset into per-client CSV files");
  add_common(gen, gen_o, false);
  auto *fed = app.add_subcommand("fed-run", "variational federated run (coreset, full, random_subset)");
  add_common(fed, fed_o, true);
  auto *base = app.add_subcommand("baseline-run", "FedAvg baselines (fedavg, fedavg_random, submodular:<name>)");
  add_common(base, base_o, true);

  SolveOpts solve_o;
  auto *solve = app.add_subcommand("coreset-solve", "sparse nonnegative solve of min ||P - Phi w||^2 with A-IHT");
  solve->add_option("--phi", solve_o.phi, "CSV matrix Phi (S x n)")->required()->check(CLI::ExistingFile);
  solve->add_option("--target", solve_o.target, "CSV vector P (length S)")->required()->check(CLI::ExistingFile);
  solve->add_option("--k", solve_o.k, "sparsity budget")->required();
  solve->add_option("--max-iter", solve_o.max_iter, "iteration cap");
  solve->add_option("--tol", solve_o.tol, "stopping tolerance on ||w_t+1 - w_t||_inf");
  solve->add_option("--out", solve_o.out, "write JSON here instead of stdout");

  TheoryOpts theory_o;
  auto *th = app.add_subcommand("theory-check", "evaluate the drift terms and minimax envelope on a grid");
  th->add_option("--delta", theory_o.delta, "rate exponent delta");
  th->add_option("--out", theory_o.out, "write CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*gen) return data_gen(gen_o);
    if (*fed) {
      const auto c = resolve(fed_o);
      if (!c.is_federated()) throw ConfigError("fed-run: mode '" + c.mode + "' is a baseline mode; use baseline-run");
      return run_and_emit(c);
    }
    if (*base) {
      const auto c = resolve(base_o, "fedavg");
      if (c.is_federated()) throw ConfigError("baseline-run: mode '" + c.mode + "' is a variational mode; use fed-run");
      return run_and_emit(c);
    }
    if (*solve) return coreset_solve(solve_o);
    if (*th) return theory_check(theory_o);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
