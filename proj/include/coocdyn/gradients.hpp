#pragma once

// Closed-form gradient-flow updates for W, W_V, W_K, W_Q, a central-difference
// oracle, and right-hand sides of the tracked dynamical system.
//
// All gradients are reported in flow convention: dtheta = -grad L, so an
// explicit Euler step is theta += eta * dtheta.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "coocdyn/data.hpp"
#include "coocdyn/errors.hpp"
#include "coocdyn/model.hpp"

namespace coocdyn {

struct Gradients {
  Eigen::MatrixXd dW;
  Eigen::MatrixXd dW_V;
  Eigen::MatrixXd dW_K;
  Eigen::MatrixXd dW_Q;

  static constexpr std::array<const char*, 4> kNames{"W", "W_V", "W_K", "W_Q"};

  const Eigen::MatrixXd& operator[](int k) const {
    switch (k) {
      case 0: return dW;
      case 1: return dW_V;
      case 2: return dW_K;
      default: return dW_Q;
    }
  }
  Eigen::MatrixXd& operator[](int k) {
    return const_cast<Eigen::MatrixXd&>(static_cast<const Gradients&>(*this)[k]);
  }

  std::array<double, 4> norms() const {
    return {dW.norm(), dW_V.norm(), dW_K.norm(), dW_Q.norm()};
  }
};

inline const Eigen::MatrixXd& param_matrix(const ModelParams& p, int k) {
  switch (k) {
    case 0: return p.W;
    case 1: return p.W_V;
    case 2: return p.W_K;
    default: return p.W_Q;
  }
}

inline Eigen::MatrixXd& param_matrix(ModelParams& p, int k) {
  return const_cast<Eigen::MatrixXd&>(param_matrix(static_cast<const ModelParams&>(p), k));
}

struct GradientResult {
  Gradients grads;
  std::vector<ForwardCache> caches;
  double loss = 0.0;  // empirical loss at the evaluation point
};

/// Per-matrix updates with the neuron sum collapsed through u = W^T a.
/// Samples are accumulated in ascending index order.
inline GradientResult compute_gradients(const ModelParams& params, const Dataset& dataset,
                                        const Vocabulary& vocab) {
  if (dataset.size() == 0) throw InputError("dataset is empty");
  const TokenView view(params, vocab);
  const int m = params.m();
  const int d = params.d();
  const double n = static_cast<double>(dataset.size());
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));
  const Eigen::VectorXd& u = view.head();

  Eigen::VectorXd z = Eigen::VectorXd::Zero(m);          // dW = a z^T
  Eigen::VectorXd token_mass = Eigen::VectorXd::Zero(d);  // dW_V = u token_mass^T
  Eigen::MatrixXd dK = Eigen::MatrixXd::Zero(m, d);
  Eigen::MatrixXd dQ = Eigen::MatrixXd::Zero(m, d);

  GradientResult out;
  out.caches.reserve(dataset.size());
  double total_loss = 0.0;
  for (const Sample& s : dataset.samples) {
    ForwardCache cache = forward(view, s);
    total_loss += loss(cache.F, s.label).loss;
    const double c = cache.g * s.label / n;
    const int L = s.length();

    const Eigen::VectorXd r = cache.P.rowwise().sum();           // r_h = sum_l p_{l,h}
    const Eigen::VectorXd b = cache.V.transpose() * u;            // b_h = G(x_h)
    const Eigen::VectorXd bp = cache.P.transpose() * b;           // bp_l = b^T p_l
    Eigen::MatrixXd D(L, L);                                      // p_{l,h} (b_h - b^T p_l)
    for (int l = 0; l < L; ++l) D.col(l) = cache.P.col(l).cwiseProduct((b.array() - bp(l)).matrix());

    z.noalias() += c * (cache.V * r);
    const Eigen::MatrixXd Kx = detail::gather(view.key(), s);
    const Eigen::MatrixXd Qx = detail::gather(view.query(), s);
    const Eigen::MatrixXd key_grad = Qx * D.transpose();  // column h -> token x_h
    const Eigen::MatrixXd query_grad = Kx * D;            // column l -> token x_l
    for (int h = 0; h < L; ++h) {
      const int col = column_of(s.tokens[h]);
      token_mass(col) += c * r(h);
      dK.col(col) += (c * inv_sqrt_m) * key_grad.col(h);
      dQ.col(col) += (c * inv_sqrt_m) * query_grad.col(h);
    }
    out.caches.push_back(std::move(cache));
  }
  out.loss = total_loss / n;

  Gradients& g = out.grads;
  g.dW = params.a * z.transpose();
  g.dW_V = u * token_mass.transpose();
  g.dW_K = std::move(dK);
  g.dW_Q = std::move(dQ);
  if (!vocab.canonical()) {
    // theta E = M  =>  dtheta = dM E^T
    const Eigen::MatrixXd Et = vocab.embedding.transpose();
    g.dW_V = g.dW_V * Et;
    g.dW_K = g.dW_K * Et;
    g.dW_Q = g.dW_Q * Et;
  }
  for (int k = 0; k < 4; ++k) {
    if (!g[k].allFinite()) {
      throw NumericError(std::string("non-finite gradient entry in ") + Gradients::kNames[k]);
    }
  }
  return out;
}

/// Central differences of f at theta with step eps_scale * (1 + |theta_k|).
/// Returns the raw gradient (not negated).
inline Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                          Eigen::VectorXd theta, double eps_scale = 1e-4) {
  Eigen::VectorXd grad(theta.size());
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    const double saved = theta(k);
    const double h = eps_scale * (1.0 + std::abs(saved));
    theta(k) = saved + h;
    const double up = f(theta);
    theta(k) = saved - h;
    const double down = f(theta);
    theta(k) = saved;
    grad(k) = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Entrywise central-difference gradient of the empirical loss, negated into
/// flow convention so it compares directly with compute_gradients.
inline Gradients finite_diff_gradients(const ModelParams& params, const Dataset& dataset,
                                       const Vocabulary& vocab, double eps_scale = 1e-4) {
  ModelParams probe = params;
  Gradients out;
  for (int k = 0; k < 4; ++k) {
    Eigen::MatrixXd& target = param_matrix(probe, k);
    Eigen::MatrixXd flow(target.rows(), target.cols());
    for (Eigen::Index c = 0; c < target.cols(); ++c) {
      for (Eigen::Index r = 0; r < target.rows(); ++r) {
        const double saved = target(r, c);
        const double h = eps_scale * (1.0 + std::abs(saved));
        target(r, c) = saved + h;
        const double up = dataset_loss(probe, dataset, vocab).mean;
        target(r, c) = saved - h;
        const double down = dataset_loss(probe, dataset, vocab).mean;
        target(r, c) = saved;
        flow(r, c) = -(up - down) / (2.0 * h);
      }
    }
    out[k] = std::move(flow);
  }
  return out;
}

/// Max entrywise relative error |x - y| / max(|x|, |y|, floor), per matrix.
inline std::array<double, 4> gradient_errors(const Gradients& x, const Gradients& y,
                                             double abs_floor = 1e-9) {
  std::array<double, 4> err{};
  for (int k = 0; k < 4; ++k) {
    const Eigen::MatrixXd& a = x[k];
    const Eigen::MatrixXd& b = y[k];
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw ConfigError("gradient shapes differ");
    }
    double worst = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double scale = std::max({std::abs(a(r, c)), std::abs(b(r, c)), abs_floor});
        worst = std::max(worst, std::abs(a(r, c) - b(r, c)) / scale);
      }
    }
    err[k] = worst;
  }
  return err;
}

// ---------------------------------------------------------------------------
// Tracked dynamical quantities.

namespace quantity {
struct Mlp { int j; TokenId mu; };          // w_j^T W_V mu
struct Score { TokenId nu; TokenId mu; };   // nu^T W_K^T W_Q mu
struct Neuron { int j1; int j2; };          // <w_j1, w_j2>
struct Value { TokenId nu; TokenId mu; };   // nu^T W_V^T W_V mu
struct QSelf { TokenId nu; TokenId mu; };   // nu^T W_Q^T W_Q mu
struct KSelf { TokenId nu; TokenId mu; };   // nu^T W_K^T W_K mu
}  // namespace quantity

using Quantity = std::variant<quantity::Mlp, quantity::Score, quantity::Neuron, quantity::Value,
                              quantity::QSelf, quantity::KSelf>;

inline std::string to_string(const Quantity& q) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, quantity::Mlp>) {
          return "mlp(" + std::to_string(v.j) + "," + std::to_string(v.mu) + ")";
        } else if constexpr (std::is_same_v<T, quantity::Neuron>) {
          return "neuron(" + std::to_string(v.j1) + "," + std::to_string(v.j2) + ")";
        } else {
          const char* name = std::is_same_v<T, quantity::Score>   ? "score"
                             : std::is_same_v<T, quantity::Value> ? "value"
                             : std::is_same_v<T, quantity::QSelf> ? "qself"
                                                                  : "kself";
          return std::string(name) + "(" + std::to_string(v.nu) + "," + std::to_string(v.mu) + ")";
        }
      },
      q);
}

/// Parses "family(x,y)" where family is one of mlp, score, neuron, value,
/// qself, kself. Neuron indices are 0-based; token ids are 1-based.
inline Quantity parse_quantity(std::string_view text) {
  const auto open = text.find('(');
  const auto comma = text.find(',');
  const auto close = text.find(')');
  if (open == std::string_view::npos || comma == std::string_view::npos ||
      close == std::string_view::npos || !(open < comma && comma < close)) {
    throw InputError("malformed quantity '" + std::string(text) + "'");
  }
  const std::string family(text.substr(0, open));
  int x = 0, y = 0;
  try {
    x = std::stoi(std::string(text.substr(open + 1, comma - open - 1)));
    y = std::stoi(std::string(text.substr(comma + 1, close - comma - 1)));
  } catch (const std::exception&) {
    throw InputError("malformed quantity '" + std::string(text) + "'");
  }
  if (family == "mlp") return quantity::Mlp{x, y};
  if (family == "score") return quantity::Score{x, y};
  if (family == "neuron") return quantity::Neuron{x, y};
  if (family == "value") return quantity::Value{x, y};
  if (family == "qself") return quantity::QSelf{x, y};
  if (family == "kself") return quantity::KSelf{x, y};
  throw InputError("unknown quantity identifier '" + family + "'");
}

namespace detail {

inline void check_token(const Vocabulary& vocab, TokenId id) {
  if (id < 1 || id > vocab.d) throw InputError("token id " + std::to_string(id) + " out of range");
}

inline void check_neuron(const ModelParams& p, int j) {
  if (j < 0 || j >= p.m1()) throw InputError("neuron index " + std::to_string(j) + " out of range");
}

/// Per-sample state shared by the right-hand sides below.
struct SampleTerms {
  const Sample* sample;
  double c;                 // g_i y_i / n
  Eigen::MatrixXd P;        // column l = p_l
  Eigen::MatrixXd K, Q, V;  // m x L
  Eigen::VectorXd b;        // G(x_h)
  Eigen::VectorXd bp;       // b^T p_l
};

inline std::vector<SampleTerms> sample_terms(const TokenView& view, const Dataset& ds) {
  std::vector<SampleTerms> out;
  out.reserve(ds.size());
  const double n = static_cast<double>(ds.size());
  for (const Sample& s : ds.samples) {
    ForwardCache cache = forward(view, s);
    SampleTerms t;
    t.sample = &s;
    t.c = cache.g * s.label / n;
    t.P = std::move(cache.P);
    t.V = std::move(cache.V);
    t.K = gather(view.key(), s);
    t.Q = gather(view.query(), s);
    t.b = t.V.transpose() * view.head();
    t.bp = t.P.transpose() * t.b;
    out.push_back(std::move(t));
  }
  return out;
}

/// nu^T W_Q^T K diag(b - b^T p_l) p_l at the query positions holding `mu`,
/// summed over those positions (the first-order change of nu^T W_Q^T W_Q mu
/// through dW_Q mu).
inline double query_side(const TokenView& view, const SampleTerms& t, TokenId nu, TokenId mu) {
  const Eigen::VectorXd qn = view.query().col(column_of(nu));
  double acc = 0.0;
  for (int l = 0; l < t.sample->length(); ++l) {
    if (t.sample->tokens[l] != mu) continue;
    const Eigen::VectorXd weights = t.P.col(l).cwiseProduct((t.b.array() - t.bp(l)).matrix());
    acc += qn.dot(t.K * weights);
  }
  return acc;
}

/// sum_l (k(nu)^T q_l) sum_{h: x_h = mu} p_{l,h} (b_h - b^T p_l).
inline double key_side(const TokenView& view, const SampleTerms& t, TokenId nu, TokenId mu) {
  const Eigen::VectorXd kn = view.key().col(column_of(nu));
  double acc = 0.0;
  for (int l = 0; l < t.sample->length(); ++l) {
    double mass = 0.0;
    for (int h = 0; h < t.sample->length(); ++h) {
      if (t.sample->tokens[h] == mu) mass += t.P(h, l) * (t.b(h) - t.bp(l));
    }
    if (mass != 0.0) acc += kn.dot(t.Q.col(l)) * mass;
  }
  return acc;
}

inline double attention_to(const SampleTerms& t, TokenId mu) {
  double acc = 0.0;
  for (int h = 0; h < t.sample->length(); ++h) {
    if (t.sample->tokens[h] == mu) acc += t.P.row(h).sum();
  }
  return acc;
}

}  // namespace detail

/// Right-hand side of the gradient-flow equation for one tracked quantity,
/// evaluated from the dynamical-system formulas (not from Gradients).
/// Tokens absent from every sample contribute empty sums.
inline double dynamics_rhs(const ModelParams& params, const Dataset& dataset,
                           const Vocabulary& vocab, const Quantity& q) {
  if (dataset.size() == 0) throw InputError("dataset is empty");
  const TokenView view(params, vocab);
  const auto terms = detail::sample_terms(view, dataset);
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(params.m()));
  const Eigen::VectorXd& u = view.head();

  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        double acc = 0.0;
        if constexpr (std::is_same_v<T, quantity::Mlp>) {
          detail::check_neuron(params, v.j);
          detail::check_token(vocab, v.mu);
          const Eigen::VectorXd wj = params.W.row(v.j).transpose();
          const double neuron_corr = wj.dot(u);  // sum_j2 a_j2 <w_j, w_j2>
          const Eigen::VectorXd v_mu = view.value().col(column_of(v.mu));
          for (const auto& t : terms) {
            acc += t.c * neuron_corr * detail::attention_to(t, v.mu);
            const Eigen::VectorXd pooled = t.V * t.P.rowwise().sum();  // sum_l V p_l
            acc += t.c * params.a(v.j) * pooled.dot(v_mu);
          }
        } else if constexpr (std::is_same_v<T, quantity::Score>) {
          detail::check_token(vocab, v.nu);
          detail::check_token(vocab, v.mu);
          const Eigen::VectorXd kn = view.key().col(column_of(v.nu));
          const Eigen::VectorXd qm = view.query().col(column_of(v.mu));
          for (const auto& t : terms) {
            // nu^T W_K^T (dW_Q mu): query positions holding mu
            for (int l = 0; l < t.sample->length(); ++l) {
              if (t.sample->tokens[l] != v.mu) continue;
              const Eigen::VectorXd w = t.P.col(l).cwiseProduct((t.b.array() - t.bp(l)).matrix());
              acc += t.c * inv_sqrt_m * kn.dot(t.K * w);
            }
            // (W_Q mu)^T (dW_K nu): key positions holding nu
            for (int l = 0; l < t.sample->length(); ++l) {
              double mass = 0.0;
              for (int h = 0; h < t.sample->length(); ++h) {
                if (t.sample->tokens[h] == v.nu) mass += t.P(h, l) * (t.b(h) - t.bp(l));
              }
              if (mass != 0.0) acc += t.c * inv_sqrt_m * qm.dot(t.Q.col(l)) * mass;
            }
          }
        } else if constexpr (std::is_same_v<T, quantity::Neuron>) {
          detail::check_neuron(params, v.j1);
          detail::check_neuron(params, v.j2);
          const Eigen::VectorXd w1 = params.W.row(v.j1).transpose();
          const Eigen::VectorXd w2 = params.W.row(v.j2).transpose();
          for (const auto& t : terms) {
            const Eigen::VectorXd pooled = t.V * t.P.rowwise().sum();
            acc += t.c * (params.a(v.j2) * w1.dot(pooled) + params.a(v.j1) * w2.dot(pooled));
          }
        } else if constexpr (std::is_same_v<T, quantity::Value>) {
          detail::check_token(vocab, v.nu);
          detail::check_token(vocab, v.mu);
          const double head_nu = u.dot(view.value().col(column_of(v.nu)));
          const double head_mu = u.dot(view.value().col(column_of(v.mu)));
          for (const auto& t : terms) {
            acc += t.c * head_nu * detail::attention_to(t, v.mu);
            acc += t.c * head_mu * detail::attention_to(t, v.nu);
          }
        } else if constexpr (std::is_same_v<T, quantity::QSelf>) {
          detail::check_token(vocab, v.nu);
          detail::check_token(vocab, v.mu);
          for (const auto& t : terms) {
            acc += t.c * inv_sqrt_m * detail::query_side(view, t, v.nu, v.mu);
            acc += t.c * inv_sqrt_m * detail::query_side(view, t, v.mu, v.nu);
          }
        } else {
          detail::check_token(vocab, v.nu);
          detail::check_token(vocab, v.mu);
          for (const auto& t : terms) {
            acc += t.c * inv_sqrt_m * detail::key_side(view, t, v.nu, v.mu);
            acc += t.c * inv_sqrt_m * detail::key_side(view, t, v.mu, v.nu);
          }
        }
        return acc;
      },
      q);
}

/// Current value of a tracked quantity.
inline double tracked_value(const ModelParams& params, const Vocabulary& vocab,
                            const Quantity& q) {
  const TokenView view(params, vocab);
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, quantity::Mlp>) {
          detail::check_neuron(params, v.j);
          detail::check_token(vocab, v.mu);
          return params.W.row(v.j).dot(view.value().col(column_of(v.mu)));
        } else if constexpr (std::is_same_v<T, quantity::Neuron>) {
          detail::check_neuron(params, v.j1);
          detail::check_neuron(params, v.j2);
          return params.W.row(v.j1).dot(params.W.row(v.j2));
        } else {
          detail::check_token(vocab, v.nu);
          detail::check_token(vocab, v.mu);
          const int cn = column_of(v.nu);
          const int cm = column_of(v.mu);
          if constexpr (std::is_same_v<T, quantity::Score>) {
            return view.key().col(cn).dot(view.query().col(cm));
          } else if constexpr (std::is_same_v<T, quantity::Value>) {
            return view.value().col(cn).dot(view.value().col(cm));
          } else if constexpr (std::is_same_v<T, quantity::QSelf>) {
            return view.query().col(cn).dot(view.query().col(cm));
          } else {
            return view.key().col(cn).dot(view.key().col(cm));
          }
        }
      },
      q);
}

}  // namespace coocdyn
