#pragma once

// One-layer softmax self-attention followed by a linear MLP head:
//
//   F(X) = sum_l sum_j a_j w_j^T W_V X softmax(X^T W_K^T W_Q x_l / sqrt(m))
//
// Every query position contributes, so the output is an L-fold sum.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "coocdyn/data.hpp"
#include "coocdyn/errors.hpp"

namespace coocdyn {

struct ModelParams {
  Eigen::MatrixXd W;    // m1 x m, rows are the neurons w_j^T
  Eigen::MatrixXd W_V;  // m x d
  Eigen::MatrixXd W_K;  // m x d
  Eigen::MatrixXd W_Q;  // m x d
  Eigen::VectorXd a;    // m1 signs, frozen

  int m() const { return static_cast<int>(W_V.rows()); }
  int m1() const { return static_cast<int>(W.rows()); }
  int d() const { return static_cast<int>(W_V.cols()); }

  static ModelParams zeros(int m, int m1, int d) {
    ModelParams p;
    p.W = Eigen::MatrixXd::Zero(m1, m);
    p.W_V = Eigen::MatrixXd::Zero(m, d);
    p.W_K = Eigen::MatrixXd::Zero(m, d);
    p.W_Q = Eigen::MatrixXd::Zero(m, d);
    p.a = Eigen::VectorXd::Ones(m1);
    return p;
  }

  /// Throws ConfigError on shape mismatch, NumericError on non-finite entries.
  void validate() const {
    const auto m_ = W_V.rows();
    const auto d_ = W_V.cols();
    if (W_K.rows() != m_ || W_Q.rows() != m_ || W_K.cols() != d_ || W_Q.cols() != d_ ||
        W.cols() != m_ || a.size() != W.rows()) {
      throw ConfigError("inconsistent parameter shapes");
    }
    for (double s : a) {
      if (s != 1.0 && s != -1.0) throw ConfigError("output signs must be +1 or -1");
    }
    if (!W.allFinite()) throw NumericError("non-finite entry in W");
    if (!W_V.allFinite()) throw NumericError("non-finite entry in W_V");
    if (!W_K.allFinite()) throw NumericError("non-finite entry in W_K");
    if (!W_Q.allFinite()) throw NumericError("non-finite entry in W_Q");
  }
};

/// Per-sample forward state.
struct ForwardCache {
  Eigen::MatrixXd S;  // L x L, S(l', l) = k_{l'}^T q_l / sqrt(m); column l is s_l
  Eigen::MatrixXd P;  // L x L, column l is softmax(s_l)
  Eigen::MatrixXd V;  // m x L value projections
  double F = 0.0;
  double g = 0.5;  // 1 / (1 + exp(y F))
};

struct AttentionMaps {
  Eigen::MatrixXd S;
  Eigen::MatrixXd P;
};

/// Parameters expressed in token coordinates (M * E), plus the collapsed head
/// u = W^T a. With the canonical basis the matrices are used as they are.
class TokenView {
 public:
  TokenView(const ModelParams& params, const Vocabulary& vocab) : params_(&params) {
    if (params.d() != vocab.d) {
      throw ConfigError("parameter width d=" + std::to_string(params.d()) +
                        " does not match vocabulary d=" + std::to_string(vocab.d));
    }
    if (!vocab.canonical()) {
      V_ = params.W_V * vocab.embedding;
      K_ = params.W_K * vocab.embedding;
      Q_ = params.W_Q * vocab.embedding;
    }
    u_ = params.W.transpose() * params.a;
  }

  const Eigen::MatrixXd& value() const { return V_ ? *V_ : params_->W_V; }
  const Eigen::MatrixXd& key() const { return K_ ? *K_ : params_->W_K; }
  const Eigen::MatrixXd& query() const { return Q_ ? *Q_ : params_->W_Q; }
  const Eigen::VectorXd& head() const { return u_; }
  const ModelParams& params() const { return *params_; }
  int m() const { return params_->m(); }

 private:
  const ModelParams* params_;
  std::optional<Eigen::MatrixXd> V_, K_, Q_;
  Eigen::VectorXd u_;
};

namespace detail {

inline Eigen::MatrixXd gather(const Eigen::MatrixXd& M, const Sample& s) {
  Eigen::MatrixXd out(M.rows(), s.length());
  for (int l = 0; l < s.length(); ++l) out.col(l) = M.col(column_of(s.tokens[l]));
  return out;
}

/// Column-wise softmax with max subtraction.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& S) {
  Eigen::MatrixXd P(S.rows(), S.cols());
  for (Eigen::Index l = 0; l < S.cols(); ++l) {
    const double top = S.col(l).maxCoeff();
    P.col(l) = (S.col(l).array() - top).exp().matrix();
    P.col(l) /= P.col(l).sum();
  }
  return P;
}

inline void require_finite(const Eigen::MatrixXd& M, const char* what) {
  for (Eigen::Index c = 0; c < M.cols(); ++c) {
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
      if (!std::isfinite(M(r, c))) {
        throw NumericError(std::string("non-finite ") + what + " at (" + std::to_string(r) +
                           ", " + std::to_string(c) + ")");
      }
    }
  }
}

inline AttentionMaps attention(const TokenView& view, const Sample& s) {
  const Eigen::MatrixXd K = gather(view.key(), s);
  const Eigen::MatrixXd Q = gather(view.query(), s);
  AttentionMaps out;
  out.S = (K.transpose() * Q) / std::sqrt(static_cast<double>(view.m()));
  require_finite(out.S, "attention score");
  out.P = softmax_columns(out.S);
  require_finite(out.P, "attention probability");
  return out;
}

}  // namespace detail

struct LossValue {
  double loss = 0.0;
  double g = 0.0;
};

/// Logistic loss log(1 + exp(-yF)) in softplus form, and g = 1 / (1 + exp(yF)).
inline LossValue loss(double F, int y) {
  const double margin = static_cast<double>(y) * F;
  LossValue out;
  out.loss = margin > 0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));
  if (margin >= 0) {
    const double e = std::exp(-margin);
    out.g = e / (1.0 + e);
  } else {
    out.g = 1.0 / (1.0 + std::exp(margin));
  }
  return out;
}

inline AttentionMaps attention(const ModelParams& params, const Sample& sample,
                               const Vocabulary& vocab) {
  return detail::attention(TokenView(params, vocab), sample);
}

/// G(mu) = sum_j a_j w_j^T W_V mu.
inline double mlp_head(const ModelParams& params, TokenId token, const Vocabulary& vocab) {
  if (token < 1 || token > vocab.d) throw ConfigError("token index out of range");
  if (params.d() != vocab.d) throw ConfigError("parameter width does not match vocabulary");
  const Eigen::VectorXd u = params.W.transpose() * params.a;
  if (vocab.canonical()) return u.dot(params.W_V.col(column_of(token)));
  return u.dot(params.W_V * vocab.mu(token));
}

inline ForwardCache forward(const TokenView& view, const Sample& sample) {
  ForwardCache cache;
  AttentionMaps att = detail::attention(view, sample);
  cache.S = std::move(att.S);
  cache.P = std::move(att.P);
  cache.V = detail::gather(view.value(), sample);
  const Eigen::VectorXd head_values = cache.V.transpose() * view.head();  // G(x_h)
  cache.F = head_values.dot(cache.P.rowwise().sum());
  if (!std::isfinite(cache.F)) throw NumericError("non-finite network output");
  cache.g = loss(cache.F, sample.label).g;
  return cache;
}

inline ForwardCache forward(const ModelParams& params, const Sample& sample,
                            const Vocabulary& vocab) {
  return forward(TokenView(params, vocab), sample);
}

struct DatasetLoss {
  double mean = 0.0;
  std::array<double, 4> group_loss{};  // mean loss per group, 0 for an empty group
  std::array<double, 4> group_gsum{};  // sum of g_i per group
  double min_margin = std::numeric_limits<double>::infinity();
  std::vector<double> margins;
};

inline DatasetLoss dataset_loss(const TokenView& view, const Dataset& dataset) {
  if (dataset.size() == 0) throw InputError("dataset is empty");
  DatasetLoss out;
  out.margins.reserve(dataset.size());
  std::array<double, 4> sums{};
  std::array<int, 4> counts{};
  double total = 0.0;
  for (const Sample& s : dataset.samples) {
    const ForwardCache c = forward(view, s);
    const LossValue lv = loss(c.F, s.label);
    const int k = group_index(s.group);
    total += lv.loss;
    sums[k] += lv.loss;
    counts[k] += 1;
    out.group_gsum[k] += lv.g;
    const double margin = s.label * c.F;
    out.margins.push_back(margin);
    out.min_margin = std::min(out.min_margin, margin);
  }
  out.mean = total / static_cast<double>(dataset.size());
  for (int k = 0; k < 4; ++k) out.group_loss[k] = counts[k] ? sums[k] / counts[k] : 0.0;
  return out;
}

inline DatasetLoss dataset_loss(const ModelParams& params, const Dataset& dataset,
                                const Vocabulary& vocab) {
  return dataset_loss(TokenView(params, vocab), dataset);
}

}  // namespace coocdyn
