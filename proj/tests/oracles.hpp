#pragma once

// Independent reference implementations used only by the tests. They work
// from the written formulas with explicit loops and materialized embedding
// vectors, sharing nothing with the library beyond the data types.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "coocdyn/data.hpp"
#include "coocdyn/gradients.hpp"
#include "coocdyn/model.hpp"

namespace oracle {

using coocdyn::Dataset;
using coocdyn::ModelParams;
using coocdyn::Sample;
using coocdyn::Vocabulary;

/// X: d x L with column l the embedding of token l.
inline Eigen::MatrixXd embed(const Sample& s, const Vocabulary& v) {
  Eigen::MatrixXd X(v.d, s.length());
  for (int l = 0; l < s.length(); ++l) X.col(l) = v.embedding.col(s.tokens[l] - 1);
  return X;
}

inline Eigen::VectorXd matvec(const Eigen::MatrixXd& A, const Eigen::VectorXd& x) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(A.rows());
  for (int r = 0; r < A.rows(); ++r) {
    for (int c = 0; c < A.cols(); ++c) y(r) += A(r, c) * x(c);
  }
  return y;
}

inline double dot(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double s = 0.0;
  for (int k = 0; k < a.size(); ++k) s += a(k) * b(k);
  return s;
}

struct NaiveForward {
  std::vector<Eigen::VectorXd> k, q, v;  // per position, m-vectors
  std::vector<std::vector<double>> p;    // p[l][h]: probability query l puts on key h
  double F = 0.0;
};

/// F = sum_l sum_j a_j w_j^T V p_l with every product spelled out.
inline NaiveForward forward(const ModelParams& P, const Sample& s, const Vocabulary& voc) {
  const Eigen::MatrixXd X = embed(s, voc);
  const int L = s.length();
  const double m = static_cast<double>(P.m());
  NaiveForward out;
  for (int l = 0; l < L; ++l) {
    out.k.push_back(matvec(P.W_K, X.col(l)));
    out.q.push_back(matvec(P.W_Q, X.col(l)));
    out.v.push_back(matvec(P.W_V, X.col(l)));
  }
  out.p.assign(L, std::vector<double>(L, 0.0));
  for (int l = 0; l < L; ++l) {
    std::vector<double> score(L);
    double top = -INFINITY;
    for (int h = 0; h < L; ++h) {
      score[h] = dot(out.k[h], out.q[l]) / std::sqrt(m);
      top = std::max(top, score[h]);
    }
    double z = 0.0;
    for (int h = 0; h < L; ++h) z += std::exp(score[h] - top);
    for (int h = 0; h < L; ++h) out.p[l][h] = std::exp(score[h] - top) / z;
  }
  for (int l = 0; l < L; ++l) {
    for (int j = 0; j < P.m1(); ++j) {
      for (int h = 0; h < L; ++h) {
        double wv = 0.0;
        for (int r = 0; r < P.m(); ++r) wv += P.W(j, r) * out.v[h](r);
        out.F += P.a(j) * wv * out.p[l][h];
      }
    }
  }
  return out;
}

inline double g_of(double F, int y) { return 1.0 / (1.0 + std::exp(y * F)); }

/// Flow-convention gradients, one literal term per (i, l, j) triple.
/// The diag(...) arguments subtract the scalar w_j^T V p_l from every entry.
inline coocdyn::Gradients gradients(const ModelParams& P, const Dataset& ds,
                                    const Vocabulary& voc) {
  const int m = P.m(), m1 = P.m1(), d = P.d();
  const double n = static_cast<double>(ds.size());
  const double sm = std::sqrt(static_cast<double>(m));
  coocdyn::Gradients G;
  G.dW = Eigen::MatrixXd::Zero(m1, m);
  G.dW_V = Eigen::MatrixXd::Zero(m, d);
  G.dW_K = Eigen::MatrixXd::Zero(m, d);
  G.dW_Q = Eigen::MatrixXd::Zero(m, d);
  for (const Sample& s : ds.samples) {
    const NaiveForward f = oracle::forward(P, s, voc);
    const Eigen::MatrixXd X = embed(s, voc);
    const int L = s.length();
    const double gy = g_of(f.F, s.label) * s.label;
    Eigen::MatrixXd V(m, L), K(m, L);
    for (int h = 0; h < L; ++h) {
      V.col(h) = f.v[h];
      K.col(h) = f.k[h];
    }
    for (int l = 0; l < L; ++l) {
      Eigen::VectorXd pl(L);
      for (int h = 0; h < L; ++h) pl(h) = f.p[l][h];
      const Eigen::VectorXd Vp = V * pl;
      const Eigen::VectorXd Xp = X * pl;
      for (int j = 0; j < m1; ++j) {
        const Eigen::VectorXd wj = P.W.row(j).transpose();
        const double a = P.a(j);
        // dW row j
        G.dW.row(j) += (gy / n) * a * Vp.transpose();
        // dW_V
        G.dW_V += (gy / n) * a * wj * Xp.transpose();
        // row vector w_j^T V minus the scalar w_j^T V p_l
        const Eigen::RowVectorXd wV = wj.transpose() * V;
        const double wVp = dot(wj, Vp);
        Eigen::VectorXd diag(L);
        for (int h = 0; h < L; ++h) diag(h) = wV(h) - wVp;
        // dW_K: q_l p_l^T diag(.) X^T
        Eigen::RowVectorXd pd(L);
        for (int h = 0; h < L; ++h) pd(h) = pl(h) * diag(h);
        G.dW_K += (gy / (n * sm)) * a * f.q[l] * (pd * X.transpose());
        // dW_Q: K diag(.) p_l x_l^T
        Eigen::VectorXd dp(L);
        for (int h = 0; h < L; ++h) dp(h) = diag(h) * pl(h);
        G.dW_Q += (gy / (n * sm)) * a * (K * dp) * X.col(l).transpose();
      }
    }
  }
  return G;
}

/// d/dt of a tracked quantity by the chain rule, given flow gradients.
inline double chain_rule(const ModelParams& P, const coocdyn::Gradients& G,
                         const Vocabulary& voc, const coocdyn::Quantity& q) {
  using namespace coocdyn::quantity;
  auto mu = [&](int id) -> Eigen::VectorXd { return voc.embedding.col(id - 1); };
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Mlp>) {
          const Eigen::VectorXd wj = P.W.row(v.j).transpose();
          const Eigen::VectorXd dwj = G.dW.row(v.j).transpose();
          return dot(dwj, P.W_V * mu(v.mu)) + dot(wj, G.dW_V * mu(v.mu));
        } else if constexpr (std::is_same_v<T, Neuron>) {
          const Eigen::VectorXd w1 = P.W.row(v.j1).transpose(), w2 = P.W.row(v.j2).transpose();
          const Eigen::VectorXd d1 = G.dW.row(v.j1).transpose(), d2 = G.dW.row(v.j2).transpose();
          return dot(d1, w2) + dot(w1, d2);
        } else {
          const Eigen::MatrixXd* A = nullptr;
          const Eigen::MatrixXd* B = nullptr;
          const Eigen::MatrixXd* dA = nullptr;
          const Eigen::MatrixXd* dB = nullptr;
          if constexpr (std::is_same_v<T, Score>) {
            A = &P.W_K, B = &P.W_Q, dA = &G.dW_K, dB = &G.dW_Q;
          } else if constexpr (std::is_same_v<T, Value>) {
            A = &P.W_V, B = &P.W_V, dA = &G.dW_V, dB = &G.dW_V;
          } else if constexpr (std::is_same_v<T, QSelf>) {
            A = &P.W_Q, B = &P.W_Q, dA = &G.dW_Q, dB = &G.dW_Q;
          } else {
            A = &P.W_K, B = &P.W_K, dA = &G.dW_K, dB = &G.dW_K;
          }
          return dot(*dA * mu(v.nu), *B * mu(v.mu)) + dot(*A * mu(v.nu), *dB * mu(v.mu));
        }
      },
      q);
}

/// Entrywise relative error with an absolute floor.
inline double rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-9) {
  double worst = 0.0;
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < a.cols(); ++c) {
      const double den = std::max({std::abs(a(r, c)), std::abs(b(r, c)), floor});
      worst = std::max(worst, std::abs(a(r, c) - b(r, c)) / den);
    }
  }
  return worst;
}

inline double rel_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle
