#pragma once

// Pass/fail verdicts over a logged trajectory: phase detection, Phase-1
// conditions, Phase-2 trends, gradient balancing, loss-decay fit and
// attention-coefficient structure.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "coocdyn/data.hpp"
#include "coocdyn/dynamics.hpp"
#include "coocdyn/errors.hpp"

namespace coocdyn {

struct CheckRecord {
  std::string name;
  bool pass = false;
  std::vector<double> measured;
  double threshold = 0.0;
};

struct Thresholds {
  double margin_threshold = 0.05;
  double t1_fraction = 0.1;  // T1 must come within this share of the run
  double g_min = 0.1;
  double phase1_loss_min = 0.1;
  double quiescence_frac = 0.1;
  double trend_floor = 1e-6;
  double combo_c = 0.1;
  double balance_fraction = 0.95;
  double r2_min = 0.98;
  double intercept_tol = 0.25;
  double sep_factor = 5.0;
  double final_loss_max = 0.05;
  double test_gap = 0.05;            // test <= 2 train + gap
  std::optional<double> loss_target;  // stop the window at the first step reaching it
  int min_fit_points = 10;
};

struct PhaseReport {
  std::optional<long> T1;
  long T_star = 0;
  std::vector<CheckRecord> records;

  bool all_pass() const {
    return std::all_of(records.begin(), records.end(), [](const CheckRecord& r) { return r.pass; });
  }
  const CheckRecord* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
};

using Snapshots = std::vector<DynamicsSnapshot>;

namespace detail {

inline const DynamicsSnapshot& at_step(const Snapshots& traj, long t) {
  for (const auto& s : traj) {
    if (s.t == t) return s;
  }
  throw InputError("no snapshot at step " + std::to_string(t));
}

inline std::vector<const DynamicsSnapshot*> window(const Snapshots& traj, long from, long to) {
  std::vector<const DynamicsSnapshot*> out;
  for (const auto& s : traj) {
    if (s.t >= from && s.t <= to) out.push_back(&s);
  }
  return out;
}

inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
  }
  return sxx > 0 ? sxy / sxx : 0.0;
}

}  // namespace detail

/// Smallest logged t whose min margin reaches `margin_threshold`.
inline std::optional<long> detect_phase1_end(const Snapshots& traj, double margin_threshold) {
  if (traj.empty()) throw InputError("trajectory is empty");
  for (const auto& s : traj) {
    if (s.min_margin >= margin_threshold) return s.t;
  }
  return std::nullopt;
}

/// Last logged step, or the first one whose training loss reaches the target.
inline long find_t_star(const Snapshots& traj, const std::optional<double>& loss_target) {
  if (traj.empty()) throw InputError("trajectory is empty");
  if (loss_target) {
    for (const auto& s : traj) {
      if (s.train_loss <= *loss_target) return s.t;
    }
  }
  return traj.back().t;
}

inline std::vector<CheckRecord> check_phase1(const Snapshots& traj, long T1, long T_star,
                                             const Thresholds& th = {}) {
  const DynamicsSnapshot& a = detail::at_step(traj, T1);
  const DynamicsSnapshot& z = detail::at_step(traj, T_star);
  std::vector<CheckRecord> out;
  out.push_back({"phase1.G1", a.G[0] >= th.g_min, {a.G[0]}, th.g_min});
  out.push_back({"phase1.G2", a.G[1] >= th.g_min, {a.G[1]}, th.g_min});
  out.push_back({"phase1.G3", a.G[2] <= -th.g_min, {a.G[2]}, -th.g_min});
  out.push_back({"phase1.loss", a.train_loss >= th.phase1_loss_min, {a.train_loss},
                 th.phase1_loss_min});
  auto quiet = [&](const char* name, double at_t1, double at_end) {
    const double ratio = at_end > 0 ? at_t1 / at_end : (at_t1 > 0 ? INFINITY : 0.0);
    out.push_back({name, ratio <= th.quiescence_frac, {ratio, at_t1, at_end}, th.quiescence_frac});
  };
  quiet("phase1.RS", a.RS, z.RS);
  quiet("phase1.RK", a.RK, z.RK);
  quiet("phase1.RQ", a.RQ, z.RQ);
  quiet("phase1.RP", a.RP, z.RP);
  return out;
}

struct TrendSpec {
  const char* name;
  int direction;  // +1 increases, -1 decreases
  std::function<double(const DynamicsSnapshot&)> series;
};

inline std::vector<TrendSpec> trend_specs() {
  return {
      {"trend.S12", +1, [](const DynamicsSnapshot& s) { return s.S(1, 2); }},
      {"trend.S21", +1, [](const DynamicsSnapshot& s) { return s.S(2, 1); }},
      {"trend.S31", -1, [](const DynamicsSnapshot& s) { return s.S(3, 1); }},
      {"trend.S32", -1, [](const DynamicsSnapshot& s) { return s.S(3, 2); }},
      {"trend.V12", +1, [](const DynamicsSnapshot& s) { return s.V(1, 2); }},
      {"trend.V13", -1, [](const DynamicsSnapshot& s) { return s.V(1, 3); }},
      {"trend.V23", -1, [](const DynamicsSnapshot& s) { return s.V(2, 3); }},
      {"trend.G1", +1, [](const DynamicsSnapshot& s) { return s.G[0]; }},
      {"trend.G2", +1, [](const DynamicsSnapshot& s) { return s.G[1]; }},
      {"trend.G3", -1, [](const DynamicsSnapshot& s) { return s.G[2]; }},
  };
}

/// Ten trend records on [T1, T_star] followed by the three margin combinations
/// at T_star. Measured values of a trend record: slope, end - start.
inline std::vector<CheckRecord> check_phase2_trends(const Snapshots& traj, long T1, long T_star,
                                                    const Thresholds& th = {}) {
  const auto win = detail::window(traj, T1, T_star);
  std::vector<CheckRecord> out;
  std::vector<double> x;
  for (const auto* s : win) x.push_back(static_cast<double>(s->t));
  for (const auto& spec : trend_specs()) {
    std::vector<double> y;
    for (const auto* s : win) y.push_back(spec.series(*s));
    if (y.size() < 2) {
      out.push_back({spec.name, false, {0.0, 0.0}, th.trend_floor});
      continue;
    }
    const double slope = detail::ols_slope(x, y);
    const double delta = y.back() - y.front();
    const bool ok = spec.direction * slope > 0 && spec.direction * delta >= th.trend_floor;
    out.push_back({spec.name, ok, {slope, delta}, th.trend_floor});
  }
  const DynamicsSnapshot& z = detail::at_step(traj, T_star);
  const double all3 = z.G[0] + z.G[1] + z.G[2];
  const double g13 = z.G[0] + z.G[2];
  const double g23 = z.G[1] + z.G[2];
  out.push_back({"margin.G1+G2+G3", all3 >= th.combo_c, {all3}, th.combo_c});
  out.push_back({"margin.G1+G3", g13 <= -th.combo_c, {g13}, -th.combo_c});
  out.push_back({"margin.G2+G3", g23 <= -th.combo_c, {g23}, -th.combo_c});
  return out;
}

inline bool balance_ratio_ok(const std::array<double, 4>& g) {
  if (!(g[2] > 0)) return false;
  const double r = g[1] / g[2];
  return r >= 0.5 && r <= 2.0;
}

inline bool balance_order_ok(const std::array<double, 4>& g) {
  const double lo = std::min(g[1], g[2]);
  const double hi = std::max(g[1], g[2]);
  return g[3] <= lo && hi <= g[0] && g[0] <= g[1] + g[2] + g[3];
}

/// Fractions of logged steps in [T1, T_star] meeting the I2/I3 ratio bound and
/// the group ordering chain.
inline std::vector<CheckRecord> check_gradient_balancing(const Snapshots& traj, long T1,
                                                         long T_star, const Thresholds& th = {}) {
  const auto win = detail::window(traj, T1, T_star);
  int ratio_ok = 0, order_ok = 0;
  for (const auto* s : win) {
    ratio_ok += balance_ratio_ok(s->group_gsum);
    order_ok += balance_order_ok(s->group_gsum);
  }
  const double n = static_cast<double>(win.size());
  const double fr = n > 0 ? ratio_ok / n : 0.0;
  const double fo = n > 0 ? order_ok / n : 0.0;
  return {{"balance.ratio", n > 0 && fr >= th.balance_fraction, {fr}, th.balance_fraction},
          {"balance.order", n > 0 && fo >= th.balance_fraction, {fo}, th.balance_fraction}};
}

struct LossDecayFit {
  double C1 = 0.0;  // slope of 1/loss against t - T1
  double C2 = 0.0;  // intercept
  double r2 = 0.0;
  double inv_loss_T1 = 0.0;
  int points = 0;
};

/// Least squares of 1/loss against t - T1 over [T1, T_star].
inline LossDecayFit fit_loss_decay(const Snapshots& traj, long T1, long T_star) {
  const auto win = detail::window(traj, T1, T_star);
  LossDecayFit f;
  f.points = static_cast<int>(win.size());
  if (win.empty()) return f;
  std::vector<double> x, y;
  for (const auto* s : win) {
    x.push_back(static_cast<double>(s->t - T1));
    y.push_back(1.0 / s->train_loss);
  }
  f.inv_loss_T1 = y.front();
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  f.C1 = detail::ols_slope(x, y);
  f.C2 = my - f.C1 * mx;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double r = y[k] - (f.C2 + f.C1 * x[k]);
    ss_res += r * r;
    ss_tot += (y[k] - my) * (y[k] - my);
  }
  f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : (ss_res == 0 ? 1.0 : 0.0);
  return f;
}

inline std::vector<CheckRecord> check_loss_decay(const LossDecayFit& f, const Thresholds& th = {}) {
  const bool enough = f.points >= th.min_fit_points;
  const double gap = std::abs(f.C2 - f.inv_loss_T1);
  return {{"decay.slope", enough && f.C1 > 0, {f.C1}, 0.0},
          {"decay.r2", enough && f.r2 >= th.r2_min, {f.r2}, th.r2_min},
          {"decay.intercept", enough && gap <= th.intercept_tol * f.inv_loss_T1,
           {f.C2, f.inv_loss_T1},
           th.intercept_tol}};
}

inline std::vector<CheckRecord> check_attention_structure(const AttentionCoeffs& c,
                                                          const Thresholds& th = {}) {
  const double c12 = c.at(1, 2), c21 = c.at(2, 1), c31 = c.at(3, 1), c32 = c.at(3, 2);
  double rand_max = 0.0;
  for (std::size_t a = 0; a < c.tokens.size(); ++a) {
    for (std::size_t b = 0; b < c.tokens.size(); ++b) {
      if (c.tokens[a] >= kFirstPool || c.tokens[b] >= kFirstPool) {
        rand_max = std::max(rand_max, std::abs(c.C(a, b)));
      }
    }
  }
  const double special_min =
      std::min({std::abs(c12), std::abs(c21), std::abs(c31), std::abs(c32)});
  const double ratio = rand_max > 0 ? special_min / rand_max : INFINITY;
  return {{"attention.C12", c12 > 0, {c12}, 0.0},
          {"attention.C21", c21 > 0, {c21}, 0.0},
          {"attention.C31", c31 < 0, {c31}, 0.0},
          {"attention.C32", c32 < 0, {c32}, 0.0},
          {"attention.separation", ratio >= th.sep_factor, {ratio, special_min, rand_max},
           th.sep_factor}};
}

/// Loss level, margins and generalization at T_star.
inline std::vector<CheckRecord> check_final_fit(const Snapshots& traj, long T_star,
                                                const Thresholds& th = {}) {
  const DynamicsSnapshot& z = detail::at_step(traj, T_star);
  std::vector<CheckRecord> out;
  out.push_back({"final.loss", z.train_loss <= th.final_loss_max, {z.train_loss},
                 th.final_loss_max});
  out.push_back({"final.margins", z.min_margin > 0, {z.min_margin}, 0.0});
  if (z.test_loss) {
    const double bound = 2.0 * z.train_loss + th.test_gap;
    out.push_back({"final.test", *z.test_loss <= bound, {*z.test_loss}, bound});
  }
  return out;
}

/// Every check in a fixed order. Attention records need the coefficients,
/// which come from parameter files rather than the snapshots.
inline PhaseReport verify(const Snapshots& traj, const Thresholds& th = {},
                          const AttentionCoeffs* coeffs = nullptr) {
  if (traj.empty()) throw InputError("trajectory is empty");
  PhaseReport rep;
  rep.T_star = find_t_star(traj, th.loss_target);
  for (auto& r : check_final_fit(traj, rep.T_star, th)) rep.records.push_back(std::move(r));

  rep.T1 = detect_phase1_end(traj, th.margin_threshold);
  if (!rep.T1 || *rep.T1 > rep.T_star) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& s : traj) best = std::max(best, s.min_margin);
    rep.T1.reset();
    rep.records.push_back({"phase1.detected", false, {best}, th.margin_threshold});
  } else {
    const long T1 = *rep.T1;
    const long total = traj.back().t;
    rep.records.push_back({"phase1.detected", true, {static_cast<double>(T1)},
                           th.margin_threshold});
    const double share = total > 0 ? static_cast<double>(T1) / total : 0.0;
    rep.records.push_back({"phase1.early", share <= th.t1_fraction, {share}, th.t1_fraction});
    auto append = [&rep](std::vector<CheckRecord> rs) {
      for (auto& r : rs) rep.records.push_back(std::move(r));
    };
    append(check_phase1(traj, T1, rep.T_star, th));
    append(check_phase2_trends(traj, T1, rep.T_star, th));
    append(check_gradient_balancing(traj, T1, rep.T_star, th));
    append(check_loss_decay(fit_loss_decay(traj, T1, rep.T_star), th));
  }
  if (coeffs) {
    for (auto& r : check_attention_structure(*coeffs, th)) rep.records.push_back(std::move(r));
  }
  return rep;
}

inline std::string format_measured(const std::vector<double>& values) {
  std::string out;
  char buf[32];
  for (std::size_t k = 0; k < values.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.6g", values[k]);
    if (k) out += ';';
    out += buf;
  }
  return out;
}

/// check,pass,measured,threshold
inline void write_report(std::ostream& out, const PhaseReport& rep) {
  out << "check,pass,measured,threshold\n";
  char buf[32];
  for (const auto& r : rep.records) {
    std::snprintf(buf, sizeof buf, "%.6g", r.threshold);
    out << r.name << ',' << (r.pass ? "pass" : "FAIL") << ',' << format_measured(r.measured)
        << ',' << buf << '\n';
  }
}

}  // namespace coocdyn
