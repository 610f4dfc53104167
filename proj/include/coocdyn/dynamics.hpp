#pragma once

// Tracked dynamical quantities at one time point, the attention
// decomposition, and the metrics.csv / snapshots.jsonl formats.
//
// Score convention: score(a, b) = mu_a^T W_K^T W_Q mu_b, i.e. mu_a is the key
// and mu_b the query. S31 is the score of key mu_3 seen from query mu_1.

#include <Eigen/Dense>
#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "coocdyn/data.hpp"
#include "coocdyn/errors.hpp"
#include "coocdyn/model.hpp"

namespace coocdyn {

struct DynamicsSnapshot {
  long t = 0;
  double train_loss = 0.0;
  std::optional<double> test_loss;
  std::array<double, 4> group_loss{};
  std::array<double, 4> group_gsum{};
  double min_margin = 0.0;
  std::array<double, 3> G{};  // G(mu_1), G(mu_2), G(mu_3)
  double G_max_rand = 0.0;    // max |G| over the probe tokens
  Eigen::Matrix3d score = Eigen::Matrix3d::Zero();  // (a-1, b-1) = mu_a^T W_K^T W_Q mu_b
  double score_max_rand = 0.0;
  Eigen::Matrix3d value_corr = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d kself = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d qself = Eigen::Matrix3d::Zero();
  double neuron_sum = 0.0;  // ||sum_j a_j w_j||^2
  // I1 means of p(q <- mu_1, k <- mu_2), p(q <- mu_1, k <- mu_3), and of the
  // probability mu_1 puts on a pool token.
  std::array<double, 3> softmax_probe{};
  double RK = 0.0, RQ = 0.0, RS = 0.0, RP = 0.0;

  double S(int a, int b) const { return score(a - 1, b - 1); }
  double V(int a, int b) const { return value_corr(a - 1, b - 1); }
};

/// Tokens whose pairwise correlations enter the radii: 1, 2, 3 and the probes.
inline std::vector<TokenId> tracked_tokens(const std::vector<TokenId>& probes) {
  std::vector<TokenId> out{kSignal1, kSignal2, kCommon};
  for (TokenId id : probes) {
    if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
  }
  return out;
}

namespace detail {

/// Columns of M for the given tokens.
inline Eigen::MatrixXd columns(const Eigen::MatrixXd& M, const std::vector<TokenId>& ids) {
  Eigen::MatrixXd out(M.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t k = 0; k < ids.size(); ++k) out.col(k) = M.col(column_of(ids[k]));
  return out;
}

struct TrackedCorrelations {
  Eigen::MatrixXd score;  // key row, query column
  Eigen::MatrixXd kself;
  Eigen::MatrixXd qself;
};

inline TrackedCorrelations tracked_correlations(const TokenView& view,
                                                const std::vector<TokenId>& ids) {
  const Eigen::MatrixXd K = columns(view.key(), ids);
  const Eigen::MatrixXd Q = columns(view.query(), ids);
  return {K.transpose() * Q, K.transpose() * K, Q.transpose() * Q};
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace detail

/// State fixed at the start of a run: initial parameters, data, probes, and
/// the t = 0 correlations and I1 attention maps the radii compare against.
class SnapshotContext {
 public:
  SnapshotContext(const ModelParams& params0, const Dataset& train, const Vocabulary& vocab,
                  std::vector<TokenId> probes, const Dataset* eval = nullptr)
      : train_(&train), vocab_(&vocab), eval_(eval), probes_(std::move(probes)) {
    if (train.size() == 0) throw InputError("training set is empty");
    for (TokenId id : probes_) {
      if (id < kFirstPool || id > vocab.d) throw ConfigError("probe token outside the pool");
    }
    tracked_ = tracked_tokens(probes_);
    const TokenView view0(params0, vocab);
    init_ = detail::tracked_correlations(view0, tracked_);
    for (std::size_t i : train.members(Group::I1)) {
      P0_.push_back(detail::attention(view0, train.samples[i]).P);
    }
  }

  const std::vector<TokenId>& probes() const { return probes_; }
  const std::vector<TokenId>& tracked() const { return tracked_; }

  DynamicsSnapshot snapshot(const ModelParams& params, long t) const {
    const TokenView view(params, *vocab_);
    DynamicsSnapshot s;
    s.t = t;

    const DatasetLoss tl = dataset_loss(view, *train_);
    s.train_loss = tl.mean;
    s.group_loss = tl.group_loss;
    s.group_gsum = tl.group_gsum;
    s.min_margin = tl.min_margin;
    if (eval_) s.test_loss = dataset_loss(view, *eval_).mean;

    const Eigen::VectorXd& u = view.head();
    for (int k = 0; k < 3; ++k) s.G[k] = u.dot(view.value().col(k));
    for (TokenId id : probes_) {
      s.G_max_rand = std::max(s.G_max_rand, std::abs(u.dot(view.value().col(column_of(id)))));
    }
    s.neuron_sum = u.squaredNorm();

    const auto now = detail::tracked_correlations(view, tracked_);
    s.score = now.score.topLeftCorner<3, 3>();
    s.kself = now.kself.topLeftCorner<3, 3>();
    s.qself = now.qself.topLeftCorner<3, 3>();
    const Eigen::MatrixXd V3 = view.value().leftCols<3>();
    s.value_corr = V3.transpose() * V3;
    const Eigen::Index T = static_cast<Eigen::Index>(tracked_.size());
    for (Eigen::Index a = 0; a < T; ++a) {
      for (Eigen::Index b = 0; b < T; ++b) {
        if (a < 3 && b < 3) continue;
        s.score_max_rand = std::max(s.score_max_rand, std::abs(now.score(a, b)));
      }
    }
    s.RK = detail::max_abs_diff(now.kself, init_.kself);
    s.RQ = detail::max_abs_diff(now.qself, init_.qself);
    s.RS = detail::max_abs_diff(now.score, init_.score);

    const auto& I1 = train_->members(Group::I1);
    std::array<double, 3> probe_sum{};
    int probe_samples = 0;
    for (std::size_t k = 0; k < I1.size(); ++k) {
      const Sample& smp = train_->samples[I1[k]];
      const Eigen::MatrixXd P = detail::attention(view, smp).P;
      s.RP = std::max(s.RP, detail::max_abs_diff(P, P0_[k]));
      int q1 = -1, k2 = -1, k3 = -1;
      for (int l = 0; l < smp.length(); ++l) {
        if (smp.tokens[l] == kSignal1) q1 = l;
        if (smp.tokens[l] == kSignal2) k2 = l;
        if (smp.tokens[l] == kCommon) k3 = l;
      }
      if (q1 < 0 || k2 < 0 || k3 < 0) continue;
      double pool_mass = 0.0;
      int pool_count = 0;
      for (int h = 0; h < smp.length(); ++h) {
        if (smp.tokens[h] >= kFirstPool) {
          pool_mass += P(h, q1);
          ++pool_count;
        }
      }
      probe_sum[0] += P(k2, q1);
      probe_sum[1] += P(k3, q1);
      probe_sum[2] += pool_count ? pool_mass / pool_count : 0.0;
      ++probe_samples;
    }
    if (probe_samples > 0) {
      for (int k = 0; k < 3; ++k) s.softmax_probe[k] = probe_sum[k] / probe_samples;
    }
    return s;
  }

 private:
  const Dataset* train_;
  const Vocabulary* vocab_;
  const Dataset* eval_;
  std::vector<TokenId> probes_;
  std::vector<TokenId> tracked_;
  detail::TrackedCorrelations init_;
  std::vector<Eigen::MatrixXd> P0_;
};

inline DynamicsSnapshot snapshot(const ModelParams& params, const ModelParams& params0,
                                 const Dataset& dataset, const Vocabulary& vocab, long t,
                                 const std::vector<TokenId>& probes,
                                 const Dataset* eval = nullptr) {
  return SnapshotContext(params0, dataset, vocab, probes, eval).snapshot(params, t);
}

// ---------------------------------------------------------------------------
// Attention decomposition

struct AttentionCoeffs {
  std::vector<TokenId> tokens;
  Eigen::MatrixXd C;  // C(a, b) = mu_a^T (W_K^T W_Q - W_K0^T W_Q0) mu_b over `tokens`

  double at(TokenId a, TokenId b) const {
    const auto ia = std::find(tokens.begin(), tokens.end(), a);
    const auto ib = std::find(tokens.begin(), tokens.end(), b);
    if (ia == tokens.end() || ib == tokens.end()) throw InputError("token not tracked");
    return C(ia - tokens.begin(), ib - tokens.begin());
  }
};

inline AttentionCoeffs attention_decomposition(const ModelParams& params,
                                               const ModelParams& params0,
                                               const Vocabulary& vocab,
                                               const std::vector<TokenId>& tracked) {
  for (TokenId id : {kSignal1, kSignal2, kCommon}) {
    if (std::find(tracked.begin(), tracked.end(), id) == tracked.end()) {
      throw ConfigError("tracked set must contain tokens 1, 2 and 3");
    }
  }
  for (TokenId id : tracked) {
    if (id < 1 || id > vocab.d) throw ConfigError("tracked token out of range");
  }
  const TokenView now(params, vocab);
  const TokenView then(params0, vocab);
  AttentionCoeffs out;
  out.tokens = tracked;
  out.C = detail::tracked_correlations(now, tracked).score -
          detail::tracked_correlations(then, tracked).score;
  return out;
}

// ---------------------------------------------------------------------------
// metrics.csv

inline constexpr const char* kMetricsHeader =
    "t,train_loss,test_loss,loss_I1,loss_I2,loss_I3,loss_I4,gsum_I1,gsum_I2,gsum_I3,gsum_I4,"
    "min_margin,G1,G2,G3,Gmax_rand,S12,S21,S13,S31,S23,S32,Smax_rand,V12,V13,V23,neuron_sum,"
    "RK,RQ,RS,RP";

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_metrics_header(std::ostream& out) { out << kMetricsHeader << '\n'; }

/// One row; a missing test loss is written as nan.
inline void write_metrics_row(std::ostream& out, const DynamicsSnapshot& s) {
  const double test = s.test_loss ? *s.test_loss : std::nan("");
  const double fields[] = {
      s.train_loss,    test,          s.group_loss[0], s.group_loss[1], s.group_loss[2],
      s.group_loss[3], s.group_gsum[0], s.group_gsum[1], s.group_gsum[2], s.group_gsum[3],
      s.min_margin,    s.G[0],        s.G[1],          s.G[2],          s.G_max_rand,
      s.S(1, 2),       s.S(2, 1),     s.S(1, 3),       s.S(3, 1),       s.S(2, 3),
      s.S(3, 2),       s.score_max_rand, s.V(1, 2),    s.V(1, 3),       s.V(2, 3),
      s.neuron_sum,    s.RK,          s.RQ,            s.RS,            s.RP};
  out << s.t;
  for (double x : fields) out << ',' << format_double(x);
  out << '\n';
}

// ---------------------------------------------------------------------------
// snapshots.jsonl

namespace detail {

inline nlohmann::json matrix_json(const Eigen::Matrix3d& M) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({M(r, 0), M(r, 1), M(r, 2)});
  return rows;
}

inline Eigen::Matrix3d matrix_from_json(const nlohmann::json& j) {
  Eigen::Matrix3d M;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) M(r, c) = j.at(r).at(c).get<double>();
  }
  return M;
}

template <std::size_t N>
std::array<double, N> array_from_json(const nlohmann::json& j) {
  std::array<double, N> out{};
  if (j.size() != N) throw InputError("array field has the wrong length");
  for (std::size_t k = 0; k < N; ++k) out[k] = j.at(k).get<double>();
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const DynamicsSnapshot& s) {
  nlohmann::json j;
  j["t"] = s.t;
  j["train_loss"] = s.train_loss;
  j["test_loss"] = s.test_loss ? nlohmann::json(*s.test_loss) : nlohmann::json(nullptr);
  j["group_loss"] = s.group_loss;
  j["group_gsum"] = s.group_gsum;
  j["min_margin"] = s.min_margin;
  j["G"] = s.G;
  j["G_max_rand"] = s.G_max_rand;
  j["score"] = detail::matrix_json(s.score);
  j["score_max_rand"] = s.score_max_rand;
  j["value_corr"] = detail::matrix_json(s.value_corr);
  j["kself"] = detail::matrix_json(s.kself);
  j["qself"] = detail::matrix_json(s.qself);
  j["neuron_sum"] = s.neuron_sum;
  j["softmax_probe"] = s.softmax_probe;
  j["RK"] = s.RK;
  j["RQ"] = s.RQ;
  j["RS"] = s.RS;
  j["RP"] = s.RP;
  return j;
}

inline DynamicsSnapshot snapshot_from_json(const nlohmann::json& j) {
  DynamicsSnapshot s;
  try {
    s.t = j.at("t").get<long>();
    s.train_loss = j.at("train_loss").get<double>();
    if (!j.at("test_loss").is_null()) s.test_loss = j.at("test_loss").get<double>();
    s.group_loss = detail::array_from_json<4>(j.at("group_loss"));
    s.group_gsum = detail::array_from_json<4>(j.at("group_gsum"));
    s.min_margin = j.at("min_margin").get<double>();
    s.G = detail::array_from_json<3>(j.at("G"));
    s.G_max_rand = j.at("G_max_rand").get<double>();
    s.score = detail::matrix_from_json(j.at("score"));
    s.score_max_rand = j.at("score_max_rand").get<double>();
    s.value_corr = detail::matrix_from_json(j.at("value_corr"));
    s.kself = detail::matrix_from_json(j.at("kself"));
    s.qself = detail::matrix_from_json(j.at("qself"));
    s.neuron_sum = j.at("neuron_sum").get<double>();
    s.softmax_probe = detail::array_from_json<3>(j.at("softmax_probe"));
    s.RK = j.at("RK").get<double>();
    s.RQ = j.at("RQ").get<double>();
    s.RS = j.at("RS").get<double>();
    s.RP = j.at("RP").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed snapshot record: ") + e.what());
  }
  return s;
}

inline void write_snapshot_line(std::ostream& out, const DynamicsSnapshot& s) {
  out << to_json(s).dump() << '\n';
}

inline std::vector<DynamicsSnapshot> read_snapshots(std::istream& in) {
  std::vector<DynamicsSnapshot> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("snapshots line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(snapshot_from_json(j));
  }
  return out;
}

}  // namespace coocdyn
