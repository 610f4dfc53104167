#pragma once

// Initialization and explicit-Euler discretization of the gradient flow.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "coocdyn/data.hpp"
#include "coocdyn/dynamics.hpp"
#include "coocdyn/errors.hpp"
#include "coocdyn/gradients.hpp"
#include "coocdyn/model.hpp"
#include "coocdyn/rng.hpp"

namespace coocdyn {

enum class InitMode { theory, kaiming };

struct TrainConfig {
  int n = 60;
  int L = 5;
  int d = 0;  // 0: computed in strict mode; sampled mode needs it set
  int m = 128;
  int m1 = 256;
  double sigma0 = 0.0;  // 0: sigma0_mult / sqrt(L m)
  double sigma1 = 0.0;  // 0: sigma1_mult / sqrt(m1)
  double sigma0_mult = 1.0;
  double sigma1_mult = 1.0;
  InitMode init_mode = InitMode::theory;
  double eta = 0.01;
  long epochs = 30000;
  std::uint64_t seed = 0;
  long log_every = 100;
  bool balance_a = false;
  DataMode data_mode = DataMode::strict;
  EmbeddingMode embedding = EmbeddingMode::canonical;
  int n_eval = 600;  // 0 disables the evaluation set
  int probe_count = 8;

  double resolved_sigma0() const {
    return sigma0 > 0 ? sigma0 : sigma0_mult / std::sqrt(static_cast<double>(L) * m);
  }
  double resolved_sigma1() const {
    return sigma1 > 0 ? sigma1 : sigma1_mult / std::sqrt(static_cast<double>(m1));
  }
  int resolved_d() const {
    return data_mode == DataMode::strict ? strict_vocabulary_size(n, L) : d;
  }

  void validate() const {
    if (n <= 0 || n % 6 != 0) throw ConfigError("n must be a positive multiple of 6");
    if (L < 3) throw ConfigError("L must be at least 3");
    if (m <= 0 || m1 <= 0) throw ConfigError("m and m1 must be positive");
    if (!(eta > 0) || !std::isfinite(eta)) throw ConfigError("eta must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (log_every < 1) throw ConfigError("log_every must be at least 1");
    if (init_mode == InitMode::theory && (!(resolved_sigma0() > 0) || !(resolved_sigma1() > 0))) {
      throw ConfigError("theory init needs positive sigma0 and sigma1");
    }
    if (data_mode == DataMode::sampled && d < 4) {
      throw ConfigError("sampled data mode needs d >= 4");
    }
    if (data_mode == DataMode::strict && d != 0 && d != strict_vocabulary_size(n, L)) {
      throw ConfigError("strict data mode computes d = " +
                        std::to_string(strict_vocabulary_size(n, L)) + "; leave d unset");
    }
    if (n_eval < 0) throw ConfigError("n_eval must be non-negative");
    if (probe_count < 1) throw ConfigError("probe_count must be positive");
    if (probe_count > resolved_d() - 3) throw ConfigError("probe_count exceeds the token pool");
  }
};

/// Synthetic experiment setup: 60 samples split 30/10/10/10, L = 5, d = 64,
/// m = 128, m1 = 256, Kaiming init, eta = 0.01, 30000 steps.
inline TrainConfig reference_preset(std::uint64_t seed = 0) {
  TrainConfig c;
  c.n = 60;
  c.L = 5;
  c.d = 64;
  c.m = 128;
  c.m1 = 256;
  c.init_mode = InitMode::kaiming;
  c.eta = 0.01;
  c.epochs = 30000;
  c.seed = seed;
  c.log_every = 10;
  c.data_mode = DataMode::sampled;
  c.n_eval = 600;
  return c;
}

/// Multiplier k for sigma0 = 1/(k sqrt(L m)), sigma1 = 1/(k sqrt(m1)) that makes
/// the initial-output bound 2 sigma0 sigma1 sqrt(2 L m1 m log(2 L n / delta))
/// equal `target`.
inline double init_scale_for_output_bound(int L, int n, double delta = 0.1,
                                          double target = 0.01) {
  const double log_term = std::log(2.0 * L * n / delta);
  return std::sqrt(2.0 * std::sqrt(2.0 * log_term) / target);
}

// ---------------------------------------------------------------------------
// key=value config files

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) throw ConfigError("bad value for " + key + ": '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("bad boolean for " + key + ": '" + value + "'");
}

}  // namespace detail

/// Applies one key=value pair; unknown keys are errors.
inline void apply_config_value(TrainConfig& c, const std::string& key, const std::string& raw) {
  using detail::parse_number;
  const std::string v = detail::trim(raw);
  const bool is_auto = v == "auto";
  if (key == "n") c.n = parse_number<int>(key, v);
  else if (key == "L") c.L = parse_number<int>(key, v);
  else if (key == "d") c.d = is_auto ? 0 : parse_number<int>(key, v);
  else if (key == "m") c.m = parse_number<int>(key, v);
  else if (key == "m1") c.m1 = parse_number<int>(key, v);
  else if (key == "sigma0") c.sigma0 = is_auto ? 0.0 : parse_number<double>(key, v);
  else if (key == "sigma1") c.sigma1 = is_auto ? 0.0 : parse_number<double>(key, v);
  else if (key == "sigma0_mult") c.sigma0_mult = parse_number<double>(key, v);
  else if (key == "sigma1_mult") c.sigma1_mult = parse_number<double>(key, v);
  else if (key == "init_mode") {
    if (v == "theory") c.init_mode = InitMode::theory;
    else if (v == "kaiming") c.init_mode = InitMode::kaiming;
    else throw ConfigError("init_mode must be theory or kaiming");
  } else if (key == "eta") c.eta = parse_number<double>(key, v);
  else if (key == "epochs") c.epochs = parse_number<long>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "log_every") c.log_every = parse_number<long>(key, v);
  else if (key == "balance_a") c.balance_a = detail::parse_bool(key, v);
  else if (key == "data_mode") {
    if (v == "strict") c.data_mode = DataMode::strict;
    else if (v == "sampled") c.data_mode = DataMode::sampled;
    else throw ConfigError("data_mode must be strict or sampled");
  } else if (key == "embedding") {
    if (v == "canonical") c.embedding = EmbeddingMode::canonical;
    else if (v == "random_orthonormal") c.embedding = EmbeddingMode::random_orthonormal;
    else throw ConfigError("embedding must be canonical or random_orthonormal");
  } else if (key == "n_eval") c.n_eval = parse_number<int>(key, v);
  else if (key == "probe_count") c.probe_count = parse_number<int>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void read_config(std::istream& in, TrainConfig& c) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    }
    apply_config_value(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void write_config(std::ostream& out, const TrainConfig& c) {
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  out << "n=" << c.n << '\n'
      << "L=" << c.L << '\n'
      << "d=" << c.resolved_d() << '\n'
      << "m=" << c.m << '\n'
      << "m1=" << c.m1 << '\n'
      << "sigma0=" << num(c.resolved_sigma0()) << '\n'
      << "sigma1=" << num(c.resolved_sigma1()) << '\n'
      << "init_mode=" << (c.init_mode == InitMode::theory ? "theory" : "kaiming") << '\n'
      << "eta=" << num(c.eta) << '\n'
      << "epochs=" << c.epochs << '\n'
      << "seed=" << c.seed << '\n'
      << "log_every=" << c.log_every << '\n'
      << "balance_a=" << (c.balance_a ? 1 : 0) << '\n'
      << "data_mode=" << (c.data_mode == DataMode::strict ? "strict" : "sampled") << '\n'
      << "embedding="
      << (c.embedding == EmbeddingMode::canonical ? "canonical" : "random_orthonormal") << '\n'
      << "n_eval=" << c.n_eval << '\n'
      << "probe_count=" << c.probe_count << '\n';
}

// ---------------------------------------------------------------------------
// Initialization and stepping

inline ModelParams init_params(const TrainConfig& config, int d, Rng& rng) {
  const int m = config.m;
  const int m1 = config.m1;
  ModelParams p = ModelParams::zeros(m, m1, d);
  auto fill = [&rng](Eigen::MatrixXd& M, double stddev) {
    std::normal_distribution<double> normal(0.0, stddev);
    for (Eigen::Index c = 0; c < M.cols(); ++c) {
      for (Eigen::Index r = 0; r < M.rows(); ++r) M(r, c) = normal(rng);
    }
  };
  if (config.init_mode == InitMode::theory) {
    const double s0 = config.resolved_sigma0();
    fill(p.W_V, s0);
    fill(p.W_K, s0);
    fill(p.W_Q, s0);
    fill(p.W, config.resolved_sigma1());
  } else {
    // Gaussian fan-in: variance 2 / (input dimension).
    const double s_token = std::sqrt(2.0 / d);
    fill(p.W_V, s_token);
    fill(p.W_K, s_token);
    fill(p.W_Q, s_token);
    fill(p.W, std::sqrt(2.0 / m));
  }
  if (config.balance_a) {
    for (int j = 0; j < m1; ++j) p.a(j) = j < m1 / 2 ? 1.0 : -1.0;
    for (int j = m1 - 1; j > 0; --j) {
      std::uniform_int_distribution<int> pick(0, j);
      std::swap(p.a(j), p.a(pick(rng)));
    }
  } else {
    std::bernoulli_distribution coin(0.5);
    for (int j = 0; j < m1; ++j) p.a(j) = coin(rng) ? 1.0 : -1.0;
  }
  return p;
}

/// Small random problem for gradient and dynamics checks: a sampled-mode
/// training set and Gaussian parameters of standard deviation `scale`.
struct Instance {
  Vocabulary vocab;
  Dataset data;
  ModelParams params;
};

inline Instance random_instance(std::uint64_t seed, int n, int L, int d, int m, int m1,
                                double scale = 0.5) {
  Instance inst;
  Rng data_rng = make_stream(seed, "data");
  TrainingSetOptions opt;
  opt.n = n;
  opt.L = L;
  opt.d = d;
  opt.mode = DataMode::sampled;
  opt.seed = seed;
  std::tie(inst.vocab, inst.data) = generate_training_set(data_rng, opt);
  TrainConfig cfg;
  cfg.n = n;
  cfg.L = L;
  cfg.m = m;
  cfg.m1 = m1;
  cfg.sigma0 = scale;
  cfg.sigma1 = scale;
  Rng init_rng = make_stream(seed, "init");
  inst.params = init_params(cfg, d, init_rng);
  return inst;
}

struct StepMetrics {
  double loss_before = 0.0;
  std::array<double, 4> grad_norms{};  // W, W_V, W_K, W_Q
};

/// One explicit Euler step theta += eta * dtheta on W, W_V, W_K, W_Q.
inline StepMetrics train_step(ModelParams& params, const Dataset& dataset,
                              const Vocabulary& vocab, double eta) {
  GradientResult gr = compute_gradients(params, dataset, vocab);
  StepMetrics out;
  out.loss_before = gr.loss;
  out.grad_norms = gr.grads.norms();
  if (eta != 0.0) {
    for (int k = 0; k < 4; ++k) param_matrix(params, k).noalias() += eta * gr.grads[k];
  }
  return out;
}

inline std::uint64_t params_digest(const ModelParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const Eigen::MatrixXd& M) {
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
      for (Eigen::Index c = 0; c < M.cols(); ++c) {
        const double x = M(r, c);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&x), sizeof x), h);
      }
    }
  };
  mix(p.W);
  mix(p.W_V);
  mix(p.W_K);
  mix(p.W_Q);
  mix(p.a);
  return h;
}

struct Trajectory {
  std::vector<DynamicsSnapshot> snapshots;
  TrainConfig config;
  std::uint64_t final_digest = 0;
};

struct RunResult {
  Trajectory trajectory;
  Vocabulary vocab;
  Dataset train;
  std::optional<Dataset> eval;
  std::vector<TokenId> probes;
  ModelParams params0;
  ModelParams params;
};

inline std::vector<TokenId> choose_probes(Rng& rng, int d, int count) {
  std::vector<TokenId> pool;
  for (TokenId id = kFirstPool; id <= d; ++id) pool.push_back(id);
  if (static_cast<int>(pool.size()) < count) throw ConfigError("not enough pool tokens to probe");
  for (int k = 0; k < count; ++k) {
    std::uniform_int_distribution<int> pick(k, static_cast<int>(pool.size()) - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

/// Thrown when a step goes non-finite; carries the offending step.
class TrainingFailure : public NumericError {
 public:
  TrainingFailure(long step, const std::string& what)
      : NumericError("step " + std::to_string(step) + ": " + what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

using SnapshotObserver = std::function<void(const DynamicsSnapshot&)>;

/// Builds data, initializes, and runs `epochs` full-batch steps. A snapshot
/// is taken at t = 0, every `log_every` steps and at the last step; each one
/// is passed to `observer` as soon as it exists.
inline RunResult run(const TrainConfig& config, const SnapshotObserver& observer = {}) {
  config.validate();
  RunResult res;
  res.trajectory.config = config;

  Rng data_rng = make_stream(config.seed, "data");
  TrainingSetOptions opt;
  opt.n = config.n;
  opt.L = config.L;
  opt.mode = config.data_mode;
  opt.d = config.d;
  opt.embedding = config.embedding;
  opt.seed = config.seed;
  std::tie(res.vocab, res.train) = generate_training_set(data_rng, opt);
  if (config.n_eval > 0) {
    Rng eval_rng = make_stream(config.seed, "eval");
    res.eval = generate_eval_set(eval_rng, res.vocab, config.L, config.n_eval, config.seed);
  }
  Rng probe_rng = make_stream(config.seed, "probe");
  res.probes = choose_probes(probe_rng, res.vocab.d, config.probe_count);

  Rng init_rng = make_stream(config.seed, "init");
  res.params0 = init_params(config, res.vocab.d, init_rng);
  res.params = res.params0;

  const SnapshotContext ctx(res.params0, res.train, res.vocab, res.probes,
                            res.eval ? &*res.eval : nullptr);
  auto record = [&](long t) {
    DynamicsSnapshot snap = ctx.snapshot(res.params, t);
    if (observer) observer(snap);
    res.trajectory.snapshots.push_back(std::move(snap));
  };

  long t = 0;
  try {
    record(0);
    for (t = 1; t <= config.epochs; ++t) {
      train_step(res.params, res.train, res.vocab, config.eta);
      if (t % config.log_every == 0 || t == config.epochs) record(t);
    }
  } catch (const NumericError& e) {
    throw TrainingFailure(t, e.what());
  }
  res.trajectory.final_digest = params_digest(res.params);
  return res;
}

// ---------------------------------------------------------------------------
// Binary parameter files: magic "COOCPRM1", uint64 count, then for each of
// W, W_V, W_K, W_Q, a: uint64 rows, uint64 cols, rows*cols little-endian
// doubles in row-major order.

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw InputError("truncated parameter file");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

inline void put_matrix(std::ostream& out, const Eigen::MatrixXd& M) {
  put_u64(out, static_cast<std::uint64_t>(M.rows()));
  put_u64(out, static_cast<std::uint64_t>(M.cols()));
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) {
      std::uint64_t bits;
      const double x = M(r, c);
      std::memcpy(&bits, &x, sizeof bits);
      put_u64(out, bits);
    }
  }
}

inline Eigen::MatrixXd get_matrix(std::istream& in) {
  const auto rows = get_u64(in);
  const auto cols = get_u64(in);
  if (rows > (1u << 24) || cols > (1u << 24)) throw InputError("implausible matrix shape");
  Eigen::MatrixXd M(rows, cols);
  for (std::uint64_t r = 0; r < rows; ++r) {
    for (std::uint64_t c = 0; c < cols; ++c) {
      const std::uint64_t bits = get_u64(in);
      double x;
      std::memcpy(&x, &bits, sizeof x);
      M(r, c) = x;
    }
  }
  return M;
}

}  // namespace detail

inline void write_params(std::ostream& out, const ModelParams& p) {
  out.write("COOCPRM1", 8);
  detail::put_u64(out, 5);
  detail::put_matrix(out, p.W);
  detail::put_matrix(out, p.W_V);
  detail::put_matrix(out, p.W_K);
  detail::put_matrix(out, p.W_Q);
  detail::put_matrix(out, p.a);
}

inline ModelParams read_params(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "COOCPRM1", 8) != 0) {
    throw InputError("not a parameter file");
  }
  if (detail::get_u64(in) != 5) throw InputError("unexpected matrix count in parameter file");
  ModelParams p;
  p.W = detail::get_matrix(in);
  p.W_V = detail::get_matrix(in);
  p.W_K = detail::get_matrix(in);
  p.W_Q = detail::get_matrix(in);
  const Eigen::MatrixXd a = detail::get_matrix(in);
  if (a.cols() != 1) throw InputError("sign vector must be a column");
  p.a = a.col(0);
  p.validate();
  return p;
}

}  // namespace coocdyn
