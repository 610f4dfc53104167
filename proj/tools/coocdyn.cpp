// coocdyn: data generation, training, gradient checking and verification.
//
// Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "coocdyn/checks.hpp"
#include "coocdyn/data.hpp"
#include "coocdyn/dynamics.hpp"
#include "coocdyn/gradients.hpp"
#include "coocdyn/rundir.hpp"
#include "coocdyn/trainer.hpp"

namespace fs = std::filesystem;
using namespace coocdyn;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3 };

void add_threshold_flags(CLI::App* cmd, Thresholds& th, double& loss_target) {
  cmd->add_option("--margin-threshold", th.margin_threshold, "phase-1 end margin");
  cmd->add_option("--t1-fraction", th.t1_fraction, "latest allowed T1 as a share of the run");
  cmd->add_option("--g-min", th.g_min, "head value bound at T1");
  cmd->add_option("--phase1-loss", th.phase1_loss_min, "minimum training loss at T1");
  cmd->add_option("--quiescence", th.quiescence_frac, "radius ratio T1 / final");
  cmd->add_option("--trend-floor", th.trend_floor, "minimum net change of a trend");
  cmd->add_option("--combo", th.combo_c, "bound on head-value combinations at T*");
  cmd->add_option("--balance-fraction", th.balance_fraction, "share of steps that must balance");
  cmd->add_option("--r2", th.r2_min, "minimum R^2 of the loss-decay fit");
  cmd->add_option("--intercept-tol", th.intercept_tol, "relative tolerance of the fit intercept");
  cmd->add_option("--sep-factor", th.sep_factor, "special / random coefficient ratio");
  cmd->add_option("--final-loss", th.final_loss_max, "maximum final training loss");
  cmd->add_option("--loss-target", loss_target, "end the window at this training loss");
}

void apply_loss_target(Thresholds& th, double loss_target) {
  if (loss_target > 0) th.loss_target = loss_target;
}

TrainConfig build_config(const std::string& preset, const std::string& config_file,
                         const std::vector<std::string>& overrides) {
  TrainConfig c;
  if (preset == "reference") {
    c = reference_preset();
  } else if (!preset.empty() && preset != "default") {
    throw ConfigError("unknown preset '" + preset + "'");
  }
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw ConfigError("cannot open config file " + config_file);
    read_config(in, c);
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return c;
}

int cmd_gen_data(int n, int L, std::uint64_t seed, bool strict, int d, const std::string& out) {
  Rng rng = make_stream(seed, "data");
  TrainingSetOptions opt;
  opt.n = n;
  opt.L = L;
  opt.seed = seed;
  opt.mode = strict ? DataMode::strict : DataMode::sampled;
  opt.d = d;
  const auto [vocab, ds] = generate_training_set(rng, opt);
  if (out.empty() || out == "-") {
    write_dataset(std::cout, ds);
  } else {
    std::ofstream f(out);
    if (!f) throw InputError("cannot write " + out);
    write_dataset(f, ds);
  }
  std::cerr << "wrote " << ds.size() << " samples, d=" << vocab.d << '\n';
  return kOk;
}

int cmd_gradcheck(int n, int L, int d, int m, int m1, std::uint64_t seed, double eps,
                  double tol) {
  const Instance inst = random_instance(seed, n, L, d, m, m1);
  const Gradients analytic = compute_gradients(inst.params, inst.data, inst.vocab).grads;
  const Gradients numeric = finite_diff_gradients(inst.params, inst.data, inst.vocab, eps);
  const auto errs = gradient_errors(analytic, numeric);
  bool ok = true;
  std::printf("matrix,max_rel_error,tol,pass\n");
  for (int k = 0; k < 4; ++k) {
    const bool pass = errs[k] <= tol;
    ok = ok && pass;
    std::printf("%s,%.3e,%.1e,%s\n", Gradients::kNames[k], errs[k], tol, pass ? "pass" : "FAIL");
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_train(const TrainConfig& config, const std::string& out_dir) {
  const RunResult res = train_to_dir(config, out_dir);
  const auto& last = res.trajectory.snapshots.back();
  std::printf("steps=%ld train_loss=%.6g min_margin=%.6g", last.t, last.train_loss,
              last.min_margin);
  if (last.test_loss) std::printf(" test_loss=%.6g", *last.test_loss);
  std::printf("\n");
  return kOk;
}

int cmd_verify(const std::string& dir, const Thresholds& th) {
  const PhaseReport rep = verify_run_dir(dir, th);
  write_report(std::cout, rep);
  if (rep.T1) std::printf("# T1=%ld T_star=%ld\n", *rep.T1, rep.T_star);
  return rep.all_pass() ? kOk : kCheckFailed;
}

int cmd_decompose(const std::string& params_path, const std::string& params0_path,
                  const std::string& config_path, const std::vector<int>& tokens) {
  const ModelParams params = load_params(params_path);
  const ModelParams params0 = load_params(params0_path);
  if (params.d() != params0.d() || params.m() != params0.m()) {
    throw InputError("parameter files have different shapes");
  }
  EmbeddingMode mode = EmbeddingMode::canonical;
  std::uint64_t seed = 0;
  if (!config_path.empty()) {
    const TrainConfig c = load_config(config_path);
    mode = c.embedding;
    seed = c.seed;
  }
  const Vocabulary vocab = build_vocabulary(params.d(), mode, seed);
  std::vector<TokenId> tracked{kSignal1, kSignal2, kCommon};
  for (int id : tokens) {
    if (std::find(tracked.begin(), tracked.end(), id) == tracked.end()) tracked.push_back(id);
  }
  const AttentionCoeffs c = attention_decomposition(params, params0, vocab, tracked);
  std::printf("key\\query");
  for (TokenId id : c.tokens) std::printf(",%d", id);
  std::printf("\n");
  for (std::size_t a = 0; a < c.tokens.size(); ++a) {
    std::printf("%d", c.tokens[a]);
    for (std::size_t b = 0; b < c.tokens.size(); ++b) {
      std::printf(",%s", format_double(c.C(a, b)).c_str());
    }
    std::printf("\n");
  }
  return kOk;
}

int cmd_sweep(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
              const std::string& out_dir, const Thresholds& th) {
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  fs::create_directories(out_dir);
  std::vector<std::string> order;
  std::map<std::string, int> passes;
  double loss_sum = 0.0, test_sum = 0.0;
  int test_count = 0;
  int all_ok = 0;
  for (std::uint64_t seed : seeds) {
    TrainConfig c = base;
    c.seed = seed;
    const fs::path dir = fs::path(out_dir) / ("seed_" + std::to_string(seed));
    const RunResult res = train_to_dir(c, dir);
    const PhaseReport rep = verify_run_dir(dir, th);
    for (const auto& r : rep.records) {
      if (!passes.count(r.name)) order.push_back(r.name);
      passes[r.name] += r.pass ? 1 : 0;
    }
    const auto& last = res.trajectory.snapshots.back();
    loss_sum += last.train_loss;
    if (last.test_loss) {
      test_sum += *last.test_loss;
      ++test_count;
    }
    all_ok += rep.all_pass();
    std::printf("seed %llu: %s\n", static_cast<unsigned long long>(seed),
                rep.all_pass() ? "all checks pass" : "some checks fail");
  }
  const double runs = static_cast<double>(seeds.size());
  std::ofstream csv(fs::path(out_dir) / "sweep.csv");
  csv << "check,passed,runs,pass_rate\n";
  for (const auto& name : order) {
    csv << name << ',' << passes[name] << ',' << seeds.size() << ','
        << format_double(passes[name] / runs) << '\n';
  }
  csv << "mean_final_train_loss,,," << format_double(loss_sum / runs) << '\n';
  if (test_count) csv << "mean_final_test_loss,,," << format_double(test_sum / test_count) << '\n';
  std::ifstream back(fs::path(out_dir) / "sweep.csv");
  std::cout << back.rdbuf();
  return all_ok == static_cast<int>(seeds.size()) ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-occurrence attention training dynamics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // gen-data
  int gd_n = 60, gd_L = 5, gd_d = 64;
  std::uint64_t gd_seed = 0;
  bool gd_strict = true;
  std::string gd_out;
  auto* gen = app.add_subcommand("gen-data", "write a training set");
  gen->add_option("--n", gd_n, "sample count (multiple of 6)");
  gen->add_option("--L", gd_L, "sequence length");
  gen->add_option("--seed", gd_seed, "seed");
  gen->add_flag("--strict,!--sampled", gd_strict, "unique irrelevant tokens (default)");
  gen->add_option("--d", gd_d, "vocabulary size in sampled mode");
  gen->add_option("--out", gd_out, "output file (stdout if omitted)");

  // train
  std::string tr_config, tr_out = "run", tr_preset;
  std::vector<std::string> tr_set;
  auto* train = app.add_subcommand("train", "train and write a run directory");
  train->add_option("--config", tr_config, "key=value config file")->check(CLI::ExistingFile);
  train->add_option("--out-dir", tr_out, "run directory");
  train->add_option("--preset", tr_preset, "start from a preset (reference)");
  train->add_option("--set", tr_set, "override one config key (key=value)");

  // gradcheck
  int gc_n = 6, gc_L = 4, gc_d = 16, gc_m = 8, gc_m1 = 4;
  std::uint64_t gc_seed = 1;
  double gc_eps = 1e-4, gc_tol = 1e-4;
  auto* grad = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  grad->add_option("--n", gc_n);
  grad->add_option("--L", gc_L);
  grad->add_option("--d", gc_d);
  grad->add_option("--m", gc_m);
  grad->add_option("--m1", gc_m1);
  grad->add_option("--seed", gc_seed);
  grad->add_option("--eps", gc_eps, "finite-difference step scale");
  grad->add_option("--tol", gc_tol, "maximum relative error");

  // verify
  std::string vf_dir;
  Thresholds vf_th;
  double vf_target = 0.0;
  auto* ver = app.add_subcommand("verify", "run every check on a run directory");
  ver->add_option("--trajectory", vf_dir, "run directory")->required();
  add_threshold_flags(ver, vf_th, vf_target);

  // decompose
  std::string dc_params, dc_params0, dc_config;
  std::vector<int> dc_tokens;
  auto* dec = app.add_subcommand("decompose", "print attention coefficients C");
  dec->add_option("--params", dc_params, "final parameters")->required()->check(
      CLI::ExistingFile);
  dec->add_option("--params0", dc_params0, "initial parameters")->required()->check(
      CLI::ExistingFile);
  dec->add_option("--config", dc_config, "run.cfg, for the embedding")->check(CLI::ExistingFile);
  dec->add_option("--tokens", dc_tokens, "extra tokens to track")->delimiter(',');

  // sweep
  std::string sw_config, sw_out = "sweep", sw_preset = "reference";
  std::vector<std::string> sw_set;
  std::vector<std::uint64_t> sw_seeds;
  Thresholds sw_th;
  double sw_target = 0.0;
  auto* sweep = app.add_subcommand("sweep", "train and verify several seeds");
  sweep->add_option("--config", sw_config, "key=value config file")->check(CLI::ExistingFile);
  sweep->add_option("--preset", sw_preset, "start from a preset (reference, default)");
  sweep->add_option("--set", sw_set, "override one config key (key=value)");
  sweep->add_option("--seeds", sw_seeds, "comma separated seeds")->delimiter(',');
  sweep->add_option("--out-dir", sw_out, "output directory");
  add_threshold_flags(sweep, sw_th, sw_target);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gd_n, gd_L, gd_seed, gd_strict, gd_d, gd_out);
    if (*train) return cmd_train(build_config(tr_preset, tr_config, tr_set), tr_out);
    if (*grad) return cmd_gradcheck(gc_n, gc_L, gc_d, gc_m, gc_m1, gc_seed, gc_eps, gc_tol);
    if (*ver) {
      apply_loss_target(vf_th, vf_target);
      return cmd_verify(vf_dir, vf_th);
    }
    if (*dec) return cmd_decompose(dc_params, dc_params0, dc_config, dc_tokens);
    if (*sweep) {
      apply_loss_target(sw_th, sw_target);
      return cmd_sweep(build_config(sw_preset, sw_config, sw_set), sw_seeds, sw_out, sw_th);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
