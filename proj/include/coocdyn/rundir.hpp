#pragma once

// On-disk layout of a training run. Everything `verify` needs is in the
// directory:
//
//   run.cfg            resolved configuration (key=value)
//   metrics.csv        one row per snapshot
//   snapshots.jsonl    one full record per snapshot
//   init_params.bin    parameters at t = 0
//   final_params.bin   parameters at the last step
//   train.csv          training set
//   eval.csv           evaluation set (when n_eval > 0)
//   probes.txt         probe tokens, comma separated
//   manifest.json      config echo, version, timestamps, file sizes

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "coocdyn/checks.hpp"
#include "coocdyn/dynamics.hpp"
#include "coocdyn/errors.hpp"
#include "coocdyn/trainer.hpp"

namespace coocdyn {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

namespace detail {

inline std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::ofstream open_out(const fs::path& p, bool binary = false) {
  std::ofstream out(p, binary ? std::ios::binary : std::ios::out);
  if (!out) throw InputError("cannot write " + p.string());
  return out;
}

inline std::ifstream open_in(const fs::path& p, bool binary = false) {
  std::ifstream in(p, binary ? std::ios::binary : std::ios::in);
  if (!in) throw InputError("cannot read " + p.string());
  return in;
}

}  // namespace detail

inline void write_probes(std::ostream& out, const std::vector<TokenId>& probes) {
  for (std::size_t k = 0; k < probes.size(); ++k) out << (k ? "," : "") << probes[k];
  out << '\n';
}

inline std::vector<TokenId> read_probes(std::istream& in) {
  std::string line;
  std::getline(in, line);
  std::vector<TokenId> out;
  for (long long v : detail::split_ints(line)) out.push_back(static_cast<TokenId>(v));
  return out;
}

inline ModelParams load_params(const fs::path& p) {
  auto in = detail::open_in(p, true);
  return read_params(in);
}

inline void save_params(const fs::path& p, const ModelParams& params) {
  auto out = detail::open_out(p, true);
  write_params(out, params);
}

inline TrainConfig load_config(const fs::path& p) {
  auto in = detail::open_in(p);
  TrainConfig c;
  read_config(in, c);
  return c;
}

/// Trains and writes the run directory. Metric rows are flushed as they are
/// produced, so a numeric failure still leaves the partial trajectory behind.
inline RunResult train_to_dir(const TrainConfig& config, const fs::path& dir) {
  config.validate();
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["seed"] = config.seed;
  manifest["started"] = detail::utc_now();
  {
    std::ostringstream cfg;
    write_config(cfg, config);
    manifest["config"] = cfg.str();
    auto out = detail::open_out(dir / "run.cfg");
    out << cfg.str();
  }

  auto metrics = detail::open_out(dir / "metrics.csv");
  auto snaps = detail::open_out(dir / "snapshots.jsonl");
  write_metrics_header(metrics);
  auto observer = [&](const DynamicsSnapshot& s) {
    write_metrics_row(metrics, s);
    write_snapshot_line(snaps, s);
    metrics.flush();
    snaps.flush();
  };

  RunResult res = run(config, observer);

  save_params(dir / "init_params.bin", res.params0);
  save_params(dir / "final_params.bin", res.params);
  {
    auto out = detail::open_out(dir / "train.csv");
    write_dataset(out, res.train);
  }
  if (res.eval) {
    auto out = detail::open_out(dir / "eval.csv");
    write_dataset(out, *res.eval);
  }
  {
    auto out = detail::open_out(dir / "probes.txt");
    write_probes(out, res.probes);
  }
  metrics.close();
  snaps.close();

  manifest["finished"] = detail::utc_now();
  char digest[32];
  std::snprintf(digest, sizeof digest, "%016llx",
                static_cast<unsigned long long>(res.trajectory.final_digest));
  manifest["final_params_digest"] = digest;
  nlohmann::json files = nlohmann::json::object();
  for (const char* name : {"run.cfg", "metrics.csv", "snapshots.jsonl", "init_params.bin",
                           "final_params.bin", "train.csv", "eval.csv", "probes.txt"}) {
    if (fs::exists(dir / name)) files[name] = fs::file_size(dir / name);
  }
  manifest["files"] = files;
  auto out = detail::open_out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  return res;
}

struct LoadedRun {
  TrainConfig config;
  Snapshots snapshots;
  std::optional<AttentionCoeffs> coeffs;
};

/// Reads a run directory back. The coefficients are rebuilt from the two
/// parameter files when both are present.
inline LoadedRun load_run_dir(const fs::path& dir) {
  LoadedRun out;
  if (!fs::is_directory(dir)) throw InputError("not a run directory: " + dir.string());
  out.config = load_config(dir / "run.cfg");
  {
    auto in = detail::open_in(dir / "snapshots.jsonl");
    out.snapshots = read_snapshots(in);
  }
  if (out.snapshots.empty()) throw InputError("no snapshots in " + dir.string());
  const fs::path p0 = dir / "init_params.bin";
  const fs::path p1 = dir / "final_params.bin";
  if (fs::exists(p0) && fs::exists(p1)) {
    const ModelParams params0 = load_params(p0);
    const ModelParams params = load_params(p1);
    std::vector<TokenId> probes;
    if (fs::exists(dir / "probes.txt")) {
      auto in = detail::open_in(dir / "probes.txt");
      probes = read_probes(in);
    }
    const Vocabulary vocab =
        build_vocabulary(params.d(), out.config.embedding, out.config.seed);
    out.coeffs = attention_decomposition(params, params0, vocab, tracked_tokens(probes));
  }
  return out;
}

inline PhaseReport verify_run_dir(const fs::path& dir, const Thresholds& th = {}) {
  const LoadedRun run = load_run_dir(dir);
  return verify(run.snapshots, th, run.coeffs ? &*run.coeffs : nullptr);
}

}  // namespace coocdyn
