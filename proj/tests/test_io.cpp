#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "coocdyn/rundir.hpp"

using namespace coocdyn;

namespace {

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig c;
  c.n = 12;
  c.L = 4;
  c.m = 8;
  c.m1 = 8;
  c.sigma0_mult = 4.0;
  c.sigma1_mult = 4.0;
  c.eta = 0.05;
  c.epochs = 60;
  c.log_every = 10;
  c.n_eval = 20;
  c.probe_count = 4;
  c.seed = seed;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("coocdyn_test_io_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(RunDir, WritesEveryFile) {
  const fs::path dir = scratch("files");
  train_to_dir(tiny_config(3), dir);
  for (const char* name : {"run.cfg", "metrics.csv", "snapshots.jsonl", "init_params.bin",
                           "final_params.bin", "train.csv", "eval.csv", "probes.txt",
                           "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["version"], kVersion);
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["files"]["metrics.csv"], fs::file_size(dir / "metrics.csv"));
  fs::remove_all(dir);
}

TEST(RunDir, RoundTrip) {
  const fs::path dir = scratch("roundtrip");
  const RunResult res = train_to_dir(tiny_config(4), dir);
  const LoadedRun back = load_run_dir(dir);
  EXPECT_EQ(back.config.seed, 4u);
  EXPECT_EQ(back.config.epochs, 60);
  ASSERT_EQ(back.snapshots.size(), res.trajectory.snapshots.size());
  for (std::size_t k = 0; k < back.snapshots.size(); ++k) {
    std::ostringstream a, b;
    write_metrics_row(a, back.snapshots[k]);
    write_metrics_row(b, res.trajectory.snapshots[k]);
    EXPECT_EQ(a.str(), b.str());
  }
  ASSERT_TRUE(back.coeffs.has_value());
  const auto direct = attention_decomposition(res.params, res.params0, res.vocab,
                                              tracked_tokens(res.probes));
  EXPECT_EQ(back.coeffs->tokens, direct.tokens);
  EXPECT_EQ(back.coeffs->C, direct.C);

  const ModelParams p = load_params(dir / "final_params.bin");
  EXPECT_EQ(params_digest(p), res.trajectory.final_digest);

  std::ifstream train_in(dir / "train.csv");
  const Dataset train = read_dataset(train_in);
  ASSERT_EQ(train.size(), res.train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    EXPECT_EQ(train.samples[i].tokens, res.train.samples[i].tokens);
  }
  fs::remove_all(dir);
}

TEST(RunDir, VerifyMatchesInMemory) {
  const fs::path dir = scratch("verify");
  const RunResult res = train_to_dir(tiny_config(5), dir);
  const auto coeffs = attention_decomposition(res.params, res.params0, res.vocab,
                                              tracked_tokens(res.probes));
  std::ostringstream a, b;
  write_report(a, verify_run_dir(dir));
  write_report(b, verify(res.trajectory.snapshots, {}, &coeffs));
  EXPECT_EQ(a.str(), b.str());
  fs::remove_all(dir);
}

TEST(RunDir, MetricsMatchSnapshots) {
  const fs::path dir = scratch("metrics");
  const RunResult res = train_to_dir(tiny_config(6), dir);
  std::ostringstream expect;
  write_metrics_header(expect);
  for (const auto& s : res.trajectory.snapshots) write_metrics_row(expect, s);
  EXPECT_EQ(slurp(dir / "metrics.csv"), expect.str());
  fs::remove_all(dir);
}

TEST(RunDir, SameSeedSameBytes) {
  const fs::path a = scratch("det_a");
  const fs::path b = scratch("det_b");
  train_to_dir(tiny_config(7), a);
  train_to_dir(tiny_config(7), b);
  for (const char* name : {"metrics.csv", "snapshots.jsonl", "final_params.bin", "train.csv"}) {
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunDir, MissingPiecesAreInputErrors) {
  EXPECT_THROW(load_run_dir(scratch("nothing")), InputError);
  const fs::path dir = scratch("partial");
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "run.cfg");
    write_config(cfg, tiny_config(1));
  }
  EXPECT_THROW(load_run_dir(dir), InputError);
  { std::ofstream(dir / "snapshots.jsonl") << ""; }
  EXPECT_THROW(load_run_dir(dir), InputError);
  fs::remove_all(dir);
}

TEST(RunDir, ProbesRoundTrip) {
  std::stringstream s;
  write_probes(s, {5, 9, 30});
  EXPECT_EQ(read_probes(s), (std::vector<TokenId>{5, 9, 30}));
}
