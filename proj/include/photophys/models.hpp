#pragma once

// Closed-form photophysics of two- and three-level emitters: antibunching
// curves, power dependence of the decay rates, saturation and count-rate
// formulas. Everything here is a pure function of its arguments.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "photophys/units.hpp"

namespace photophys {

enum class Scheme { TwoLevel, ThreeLevel };

inline const char* to_string(Scheme s) {
  return s == Scheme::TwoLevel ? "two-level" : "three-level";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "two-level" || s == "two" || s == "2") return Scheme::TwoLevel;
  if (s == "three-level" || s == "three" || s == "3") return Scheme::ThreeLevel;
  throw std::invalid_argument("unknown level scheme '" + s + "'");
}

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::domain_error(what);
}
inline bool finite_nonneg(double x) { return std::isfinite(x) && x >= 0.0; }
}  // namespace detail

/// Transition rates of a single emitter, all in ns^-1.
///
/// Level 1 is the ground state, 2 the emitting state and 3 the metastable
/// shelf. For a two-level scheme r23 must be zero and r31 is ignored.
/// `quantum_efficiency` is the fraction of 2->1 decays that produce a photon;
/// it only matters to the photon-level simulation and the count-rate model.
struct RateSet {
  double r12 = 0.0;
  double r21 = 1.0;
  double r23 = 0.0;
  double r31 = 0.0;
  Scheme scheme = Scheme::TwoLevel;
  double quantum_efficiency = 1.0;

  static RateSet two_level(double r12, double r21) {
    RateSet r;
    r.r12 = r12;
    r.r21 = r21;
    r.validate();
    return r;
  }

  static RateSet three_level(double r12, double r21, double r23, double r31) {
    RateSet r;
    r.r12 = r12;
    r.r21 = r21;
    r.r23 = r23;
    r.r31 = r31;
    r.scheme = Scheme::ThreeLevel;
    r.validate();
    return r;
  }

  void validate() const {
    detail::require(detail::finite_nonneg(r12) && detail::finite_nonneg(r23) &&
                        detail::finite_nonneg(r31),
                    "RateSet: rates must be finite and non-negative");
    detail::require(std::isfinite(r21) && r21 > 0.0, "RateSet: r21 must be positive");
    detail::require(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0,
                    "RateSet: quantum efficiency must lie in (0, 1]");
    if (scheme == Scheme::TwoLevel)
      detail::require(r23 == 0.0, "RateSet: a two-level scheme has no shelving rate");
  }

  bool shelving() const { return scheme == Scheme::ThreeLevel && r23 > 0.0; }

  /// Antibunching rate r12 + r21.
  double lambda1() const { return r12 + r21; }

  /// Bunching decay rate to first order in r23/lambda1 and r31/lambda1.
  double lambda2() const {
    if (scheme == Scheme::TwoLevel) return 0.0;
    return r31 + (lambda1() > 0.0 ? r23 * r12 / lambda1() : 0.0);
  }
};

/// Power dependence of the decay rates. Powers are in mW.
///
/// The excitation rate is linear in power, r12 = pump_slope * P. When no
/// pump slope is given it defaults to alpha * r21_0, the value for which
/// lambda1 = r21_0 (1 + alpha P) holds exactly and P_sat = 1/alpha.
struct PowerLaw {
  double r21_0 = 1.0;  // ns^-1
  double alpha = 0.0;  // mW^-1
  double r31_0 = 0.0;  // ns^-1
  double beta = 0.0;   // mW^-1
  double r23 = 0.0;    // ns^-1, power independent
  std::optional<double> pump_slope;  // ns^-1 mW^-1
  Scheme scheme = Scheme::TwoLevel;
  double quantum_efficiency = 1.0;

  void validate() const {
    detail::require(std::isfinite(r21_0) && r21_0 > 0.0, "PowerLaw: r21_0 must be positive");
    detail::require(detail::finite_nonneg(alpha) && detail::finite_nonneg(r31_0) &&
                        detail::finite_nonneg(beta) && detail::finite_nonneg(r23),
                    "PowerLaw: coefficients must be finite and non-negative");
    detail::require(!pump_slope || detail::finite_nonneg(*pump_slope),
                    "PowerLaw: pump slope must be non-negative");
    detail::require(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0,
                    "PowerLaw: quantum efficiency must lie in (0, 1]");
    if (scheme == Scheme::TwoLevel)
      detail::require(r23 == 0.0, "PowerLaw: a two-level scheme has no shelving rate");
  }

  double effective_pump_slope() const { return pump_slope.value_or(alpha * r21_0); }

  /// Rates at optical power `p_mw`. Only r12 and r31 depend on power.
  RateSet rates_at(double p_mw) const {
    detail::require(detail::finite_nonneg(p_mw), "PowerLaw: power must be non-negative");
    RateSet r;
    r.scheme = scheme;
    r.r12 = effective_pump_slope() * p_mw;
    r.r21 = r21_0;
    r.quantum_efficiency = quantum_efficiency;
    if (scheme == Scheme::ThreeLevel) {
      r.r23 = r23;
      r.r31 = r31_0 * (1.0 + beta * p_mw);
    }
    return r;
  }
};

/// Saturation behaviour of the detected count rate.
struct SaturationModel {
  double phi_inf = 1.0;  // counts/s
  double p_sat = 1.0;    // uW

  void validate() const {
    detail::require(std::isfinite(phi_inf) && phi_inf > 0.0,
                    "SaturationModel: phi_inf must be positive");
    detail::require(std::isfinite(p_sat) && p_sat > 0.0,
                    "SaturationModel: p_sat must be positive");
  }

  /// phi_inf = r21_0 * eta and P_sat = 1/alpha for a two-level power law.
  static SaturationModel from_power_law(const PowerLaw& law, double eta) {
    detail::require(law.alpha > 0.0, "SaturationModel: alpha must be positive");
    SaturationModel m;
    m.phi_inf = units::per_ns_to_per_s(law.r21_0) * eta;
    m.p_sat = units::mw_to_uw(1.0 / law.alpha);
    m.validate();
    return m;
  }
};

/// Product decomposition of the end-to-end collection efficiency.
struct CollectionBudget {
  double eta_opt = 1.0;
  double eta_det = 1.0;
  double eta_theta = 1.0;
  double eta_cr = 1.0;

  void validate() const {
    for (double f : {eta_opt, eta_det, eta_theta, eta_cr})
      detail::require(f >= 0.0 && f <= 1.0, "CollectionBudget: factors must lie in [0, 1]");
  }

  double eta_total() const { return eta_opt * eta_det * eta_theta * eta_cr; }
};

// ---------------------------------------------------------------------------
// g2 curves. Delays may be signed; the curves are symmetric.

inline double g2_two_level(double tau, double lambda1) {
  detail::require(std::isfinite(lambda1) && lambda1 > 0.0, "g2_two_level: lambda1 must be positive");
  return -std::expm1(-lambda1 * std::abs(tau));
}

inline double g2_three_level(double tau, double lambda1, double lambda2, double a) {
  detail::require(lambda2 > 0.0, "g2_three_level: lambda2 must be positive");
  detail::require(lambda1 > lambda2, "g2_three_level: requires lambda1 > lambda2");
  detail::require(a >= 0.0, "g2_three_level: bunching amplitude must be non-negative");
  const double t = std::abs(tau);
  // 1 - (1+a) e1 + a e2, written so that tau = 0 gives exactly 0.
  return -std::expm1(-lambda1 * t) + a * (std::exp(-lambda2 * t) - std::exp(-lambda1 * t));
}

/// Parameters of the two-exponential g2 form.
struct G2Parameters {
  double lambda1 = 0.0;
  double lambda2 = 0.0;  // zero for a two-level scheme
  double a = 0.0;
};

/// Bunching amplitude r12 r23 / (lambda1 r31).
inline double bunching_amplitude(const RateSet& rates) {
  detail::require(rates.r31 > 0.0, "bunching_amplitude: r31 must be positive");
  if (rates.r12 == 0.0 || rates.r23 == 0.0) return 0.0;
  return rates.r12 * rates.r23 / (rates.lambda1() * rates.r31);
}

inline double shelving_ratio(const RateSet& rates) {
  detail::require(rates.r31 > 0.0, "shelving_ratio: r31 must be positive");
  return rates.r23 / rates.r31;
}

/// lambda1, lambda2 and a to first order in the shelving rates, as used when
/// relating fitted curves to the power laws.
inline G2Parameters first_order_g2_parameters(const RateSet& rates) {
  G2Parameters p;
  p.lambda1 = rates.lambda1();
  if (rates.scheme == Scheme::ThreeLevel) {
    p.lambda2 = rates.lambda2();
    p.a = rates.r31 > 0.0 ? bunching_amplitude(rates) : 0.0;
  }
  return p;
}

/// Exact eigen-rates and amplitude of n2(t)/n2(inf) for an emitter prepared
/// in the ground state. The two-exponential form is exact once lambda1 and
/// lambda2 are the non-zero eigenvalues of the rate matrix; the first-order
/// expressions above differ from these at O(r23/lambda1, r31/lambda1).
inline G2Parameters exact_g2_parameters(const RateSet& rates) {
  rates.validate();
  detail::require(rates.r12 > 0.0, "exact_g2_parameters: no excitation, g2 undefined");
  G2Parameters p;
  if (!rates.shelving()) {
    p.lambda1 = rates.lambda1();
    return p;
  }
  detail::require(rates.r31 > 0.0, "exact_g2_parameters: shelf never empties, g2 undefined");
  const double r12 = rates.r12, r21 = rates.r21, r23 = rates.r23, r31 = rates.r31;
  const double trace = r12 + r21 + r23 + r31;
  const double det = r12 * r23 + r12 * r31 + r21 * r31 + r23 * r31;
  const double disc = trace * trace - 4.0 * det;
  detail::require(disc >= 0.0, "exact_g2_parameters: complex eigenvalues (oscillatory g2)");
  const double mu1 = 0.5 * (trace + std::sqrt(disc));
  const double mu2 = det / mu1;
  detail::require(mu1 - mu2 > 1e-9 * mu1, "exact_g2_parameters: degenerate eigenvalues");
  p.lambda1 = mu1;
  p.lambda2 = mu2;
  // a = (r12/n2_inf - mu1)/(mu1 - mu2), with r12/n2_inf - mu1 rewritten
  // through mu1 = trace - mu2 to avoid cancellation.
  p.a = (r12 * r23 / r31 - r31 + mu2) / (mu1 - mu2);
  return p;
}

/// g2 of an emitter evaluated from its rates via the exact parameters.
inline double g2_from_rates(double tau, const RateSet& rates) {
  const G2Parameters p = exact_g2_parameters(rates);
  if (!rates.shelving()) return g2_two_level(tau, p.lambda1);
  const double t = std::abs(tau);
  // a may be slightly negative outside the usual regime, so no range check.
  return -std::expm1(-p.lambda1 * t) + p.a * (std::exp(-p.lambda2 * t) - std::exp(-p.lambda1 * t));
}

// ---------------------------------------------------------------------------
// Power dependence. Powers in mW, rates in ns^-1.

inline double lambda1_of_power(double p_mw, const PowerLaw& law) {
  detail::require(detail::finite_nonneg(p_mw), "lambda1_of_power: power must be non-negative");
  return law.r21_0 * (1.0 + law.alpha * p_mw);
}

inline double lambda2_of_power(double p_mw, const PowerLaw& law) {
  detail::require(detail::finite_nonneg(p_mw), "lambda2_of_power: power must be non-negative");
  detail::require(law.scheme == Scheme::ThreeLevel, "lambda2_of_power: needs a three-level law");
  const double r12 = law.effective_pump_slope() * p_mw;
  return law.r31_0 * (1.0 + law.beta * p_mw) + law.r23 * r12 / lambda1_of_power(p_mw, law);
}

// ---------------------------------------------------------------------------
// Count rates.

/// phi_inf P / (P_sat + P); both powers in uW, result in counts/s.
inline double saturation_rate(double p_uw, const SaturationModel& model) {
  detail::require(detail::finite_nonneg(p_uw), "saturation_rate: power must be non-negative");
  return model.phi_inf * p_uw / (model.p_sat + p_uw);
}

/// Detected rate of a three-level emitter in counts/s. The denominator omits
/// the r23/r12 term of the exact steady state, which is second order here.
inline double three_level_count_rate(const RateSet& rates, double eta, double eta_qe) {
  detail::require(eta > 0.0 && eta <= 1.0, "three_level_count_rate: eta must lie in (0, 1]");
  detail::require(eta_qe > 0.0 && eta_qe <= 1.0, "three_level_count_rate: eta_qe must lie in (0, 1]");
  if (rates.r12 == 0.0) return 0.0;
  double shelf = 0.0;
  if (rates.r23 > 0.0) {
    detail::require(rates.r31 > 0.0, "three_level_count_rate: r31 must be positive");
    shelf = rates.r23 / rates.r31;
  }
  const double per_ns = eta_qe * eta * rates.r21 / (1.0 + rates.r21 / rates.r12 + shelf);
  return units::per_ns_to_per_s(per_ns);
}

}  // namespace photophys
