#pragma once

// Internal units: time in ns, rates in ns^-1, optical power in mW.
// Everything else (MHz, counts/s, uW, ps, s) is converted at the boundary.

namespace photophys::units {

inline constexpr double kFwhmPerSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)

constexpr double mhz_to_per_ns(double mhz) { return mhz * 1e-3; }
constexpr double per_ns_to_mhz(double rate) { return rate * 1e3; }
constexpr double per_s_to_per_ns(double rate) { return rate * 1e-9; }
constexpr double per_ns_to_per_s(double rate) { return rate * 1e9; }
constexpr double uw_to_mw(double p) { return p * 1e-3; }
constexpr double mw_to_uw(double p) { return p * 1e3; }
constexpr double ps_to_ns(double t) { return t * 1e-3; }
constexpr double ns_to_ps(double t) { return t * 1e3; }
constexpr double s_to_ns(double t) { return t * 1e9; }
constexpr double ns_to_s(double t) { return t * 1e-9; }

}  // namespace photophys::units
