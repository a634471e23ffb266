#pragma once

// Population dynamics of the incoherent rate equations. Two independent
// solvers are provided: a closed-form spectral solution of the 3x3 system
// and an adaptive Dormand-Prince integrator. They serve as the reference
// against which the analytic g2 expressions are checked.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "photophys/models.hpp"

namespace photophys {

struct PopulationState {
  double n1 = 1.0;
  double n2 = 0.0;
  double n3 = 0.0;
  double t = 0.0;  // ns

  double total() const { return n1 + n2 + n3; }

  void validate() const {
    for (double n : {n1, n2, n3})
      detail::require(n >= 0.0 && n <= 1.0, "PopulationState: occupations must lie in [0, 1]");
    detail::require(std::abs(total() - 1.0) <= 1e-12, "PopulationState: occupations must sum to 1");
  }
};

using RateMatrix = std::array<std::array<double, 3>, 3>;

/// dn/dt = M n for the three-level scheme; the two-level scheme is the same
/// matrix with r23 = r31 = 0 and level 3 left empty. Columns sum to zero.
inline RateMatrix rate_matrix(const RateSet& rates) {
  const double r23 = rates.scheme == Scheme::ThreeLevel ? rates.r23 : 0.0;
  const double r31 = rates.scheme == Scheme::ThreeLevel ? rates.r31 : 0.0;
  return {{{-rates.r12, rates.r21, r31},
           {rates.r12, -rates.r21 - r23, 0.0},
           {0.0, r23, -r31}}};
}

namespace detail {

inline std::array<double, 3> apply(const RateMatrix& m, const std::array<double, 3>& v) {
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) out[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
  return out;
}

// (e^{-a t} - e^{-b t}) / (b - a), symmetric in a and b and continuous
// through a == b where it becomes t e^{-a t}.
inline double exp_difference(double a, double b, double t) {
  const double lo = std::min(a, b), hi = std::max(a, b);
  const double gap = hi - lo;
  if (gap <= 1e-9 * hi) return t * std::exp(-0.5 * (lo + hi) * t);
  return std::exp(-lo * t) * (-std::expm1(-gap * t)) / gap;
}

}  // namespace detail

/// Normalised null vector of the rate matrix. With no excitation the ground
/// state is returned; with an inescapable shelf, the shelf.
inline PopulationState steady_state(const RateSet& rates) {
  rates.validate();
  const bool three = rates.scheme == Scheme::ThreeLevel;
  const double r23 = three ? rates.r23 : 0.0;
  // Unnormalised weights, each multiplied through by r12 * r31.
  const double r31 = three ? rates.r31 : 1.0;
  double w1 = (rates.r21 + r23) * r31;
  double w2 = rates.r12 * r31;
  double w3 = rates.r12 * r23;
  const double sum = w1 + w2 + w3;
  if (rates.r12 == 0.0 || sum == 0.0) return {1.0, 0.0, 0.0, INFINITY};
  return {w1 / sum, w2 / sum, w3 / sum, INFINITY};
}

/// Closed-form solution at time t from `init`.
inline PopulationState populations_at(double t, const RateSet& rates, const PopulationState& init) {
  rates.validate();
  detail::require(std::isfinite(t) && t >= 0.0, "populations_at: time must be non-negative");
  const bool three = rates.scheme == Scheme::ThreeLevel;
  if (!three) detail::require(init.n3 == 0.0, "populations_at: two-level state with n3 != 0");
  const double r12 = rates.r12, r21 = rates.r21;
  const double r23 = three ? rates.r23 : 0.0;
  const double r31 = three ? rates.r31 : 0.0;
  PopulationState out;
  out.t = init.t + t;

  if (r12 == 0.0) {
    // Pure relaxation: 2 -> {1, 3}, 3 -> 1.
    const double k2 = r21 + r23;
    out.n2 = init.n2 * std::exp(-k2 * t);
    out.n3 = init.n3 * std::exp(-r31 * t) + r23 * init.n2 * detail::exp_difference(k2, r31, t);
    out.n1 = 1.0 - out.n2 - out.n3;
    return out;
  }
  if (r23 == 0.0 && r31 == 0.0) {
    // Level 3 is decoupled; the (1, 2) block relaxes at lambda1.
    const double lambda = r12 + r21;
    const double active = init.n1 + init.n2;
    const double n2_inf = active * r12 / lambda;
    out.n3 = init.n3;
    out.n2 = n2_inf + (init.n2 - n2_inf) * std::exp(-lambda * t);
    out.n1 = active - out.n2;
    return out;
  }

  const double trace = r12 + r21 + r23 + r31;
  const double det = r12 * r23 + r12 * r31 + r21 * r31 + r23 * r31;
  const double disc = trace * trace - 4.0 * det;
  detail::require(disc >= 0.0, "populations_at: complex eigenvalues are not supported");
  const double mu1 = 0.5 * (trace + std::sqrt(disc));
  const double mu2 = det / mu1;

  const PopulationState inf = steady_state(rates);
  const std::array<double, 3> d{init.n1 - inf.n1, init.n2 - inf.n2, init.n3 - inf.n3};
  const std::array<double, 3> u = detail::apply(rate_matrix(rates), {init.n1, init.n2, init.n3});
  // n(t) = n_inf + u E + d (e^{-mu1 t} + mu1 E),  E = (e^{-mu1 t} - e^{-mu2 t})/(mu2 - mu1)
  const double e = detail::exp_difference(mu1, mu2, t);
  const double c = std::exp(-mu1 * t) + mu1 * e;
  out.n1 = inf.n1 + u[0] * e + d[0] * c;
  out.n2 = inf.n2 + u[1] * e + d[1] * c;
  out.n3 = inf.n3 + u[2] * e + d[2] * c;
  return out;
}

struct IntegratorOptions {
  double rel_tol = 1e-13;
  double abs_tol = 1e-16;
  double initial_step = 0.0;  // ns; 0 picks one from the fastest rate
  std::size_t max_steps = 10'000'000;
};

/// Adaptive Dormand-Prince 5(4) integration of the rate equations, sampled at
/// the ascending times `times` (ns, measured from init.t = 0).
inline std::vector<PopulationState> integrate_populations(const RateSet& rates,
                                                          const PopulationState& init,
                                                          std::span<const double> times,
                                                          const IntegratorOptions& opt = {}) {
  rates.validate();
  detail::require(std::is_sorted(times.begin(), times.end()),
                  "integrate_populations: times must be ascending");
  detail::require(times.empty() || times.front() >= 0.0,
                  "integrate_populations: times must be non-negative");
  // Occupations sum to one, so only (n2, n3) are integrated and n1 is
  // recovered from the constraint.
  const bool three = rates.scheme == Scheme::ThreeLevel;
  const double r12 = rates.r12, k2 = rates.r21 + (three ? rates.r23 : 0.0);
  const double r23 = three ? rates.r23 : 0.0, r31 = three ? rates.r31 : 0.0;
  using Vec = std::array<double, 2>;
  auto f = [&](const Vec& y) {
    return Vec{r12 * (1.0 - y[0] - y[1]) - k2 * y[0], r23 * y[0] - r31 * y[1]};
  };
  auto axpy = [](Vec y, double h, std::initializer_list<std::pair<double, const Vec*>> terms) {
    for (auto [c, k] : terms)
      for (int i = 0; i < 2; ++i) y[i] += h * c * (*k)[i];
    return y;
  };

  // Dormand-Prince tableau.
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                   a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                   a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                   b6 = 11.0 / 84;
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                   e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

  Vec y{init.n2, init.n3};
  double t = 0.0;
  const double fastest = std::max({rates.r12 + rates.r21 + rates.r23, rates.r31, 1e-300});
  double h = opt.initial_step > 0.0 ? opt.initial_step : 1e-3 / fastest;
  Vec k1 = f(y);
  Vec carry{};
  std::size_t steps = 0;

  std::vector<PopulationState> out;
  out.reserve(times.size());
  for (double target : times) {
    while (t < target) {
      if (++steps > opt.max_steps) throw std::runtime_error("integrate_populations: too many steps");
      const bool last = t + h >= target;
      const double step = last ? target - t : h;
      const Vec k2 = f(axpy(y, step, {{a21, &k1}}));
      const Vec k3 = f(axpy(y, step, {{a31, &k1}, {a32, &k2}}));
      const Vec k4 = f(axpy(y, step, {{a41, &k1}, {a42, &k2}, {a43, &k3}}));
      const Vec k5 = f(axpy(y, step, {{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}));
      const Vec k6 = f(axpy(y, step, {{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}));
      const Vec delta = axpy(Vec{}, step, {{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
      Vec y5;
      for (int i = 0; i < 2; ++i) y5[i] = y[i] + delta[i];
      const Vec k7 = f(y5);
      double err = 0.0;
      for (int i = 0; i < 2; ++i) {
        const double ei = step * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] +
                                  e6 * k6[i] + e7 * k7[i]);
        const double scale = opt.abs_tol + opt.rel_tol * std::max(std::abs(y[i]), std::abs(y5[i]));
        err = std::max(err, std::abs(ei) / scale);
      }
      if (err <= 1.0) {
        t = last ? target : t + step;
        // Compensated update keeps the summed occupation from drifting over
        // long integrations.
        for (int i = 0; i < 2; ++i) {
          const double inc = delta[i] - carry[i];
          const double sum = y[i] + inc;
          carry[i] = (sum - y[i]) - inc;
          y[i] = sum;
        }
        k1 = f(y);
      }
      const double factor = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
      if (!last || err > 1.0) h = step * factor;
    }
    out.push_back({1.0 - y[0] - y[1], y[0], y[1], target});
  }
  return out;
}

/// n2(tau)/n2(inf) from the numerically integrated populations, starting in
/// the ground state.
inline std::vector<double> g2_oracle(std::span<const double> taus, const RateSet& rates,
                                     const IntegratorOptions& opt = {}) {
  const PopulationState inf = steady_state(rates);
  detail::require(inf.n2 > 0.0, "g2_oracle: steady-state emission probability is zero");
  std::vector<double> abs_taus(taus.size());
  std::transform(taus.begin(), taus.end(), abs_taus.begin(), [](double x) { return std::abs(x); });
  std::vector<std::size_t> order(taus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return abs_taus[a] < abs_taus[b]; });
  std::vector<double> sorted(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = abs_taus[order[i]];
  const auto states = integrate_populations(rates, PopulationState{}, sorted, opt);
  std::vector<double> out(taus.size());
  for (std::size_t i = 0; i < order.size(); ++i) out[order[i]] = states[i].n2 / inf.n2;
  return out;
}

inline double g2_oracle(double tau, const RateSet& rates) {
  const double t[] = {tau};
  return g2_oracle(std::span<const double>(t), rates).front();
}

}  // namespace photophys
