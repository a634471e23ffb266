#pragma once

// One summary row per emitter, assembled from its fits: quantum efficiency,
// saturated count rate, pulsed and CW lifetimes, shelving rates.

#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "photophys/fitting.hpp"
#include "photophys/serialize.hpp"

namespace photophys {

struct EmitterReport {
  std::string label;
  Scheme scheme = Scheme::TwoLevel;
  std::optional<double> tau21_cw;      // ns
  std::optional<double> tau21_pulsed;  // ns
  std::optional<double> phi_inf;       // counts/s
  std::optional<double> p_sat;         // uW
  std::optional<double> r31;           // MHz
  std::optional<double> r23;           // MHz
  std::optional<double> eta;
  std::optional<double> eta_qe;
  std::optional<double> g2_zero;
  std::optional<double> shelving_ratio;
  std::vector<std::string> gaps;   // fits that were missing
  std::vector<std::string> flags;  // e.g. lifetime_discrepancy
  std::vector<std::string> warnings;

  bool flagged(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }
};

struct ReportOptions {
  double lifetime_discrepancy = 0.20;  // relative CW vs pulsed mismatch that is flagged
};

namespace detail {

inline const FitResult* find_kind(const std::vector<FitResult>& fits, const std::string& kind) {
  for (const auto& f : fits)
    if (f.kind == kind) return &f;
  return nullptr;
}

inline std::optional<double> positive(double v) {
  if (std::isfinite(v) && v > 0.0) return v;
  return std::nullopt;
}

}  // namespace detail

/// Assembles the row. Throws on an empty input or on inconsistent labels;
/// missing fits leave the corresponding fields empty and are listed in gaps.
inline EmitterReport build_report(const std::vector<FitResult>& fits, const ReportOptions& opt = {}) {
  if (fits.empty()) throw std::invalid_argument("build_report: no fits");
  EmitterReport r;
  for (const auto& f : fits) {
    if (f.label.empty()) continue;
    if (r.label.empty()) r.label = f.label;
    else if (f.label != r.label)
      throw std::invalid_argument("build_report: inconsistent emitter labels '" + r.label + "' and '" + f.label + "'");
  }

  const FitResult* l1 = detail::find_kind(fits, "lambda1");
  const FitResult* l2 = detail::find_kind(fits, "lambda2");
  const FitResult* sat = detail::find_kind(fits, "saturation");
  const FitResult* qe = detail::find_kind(fits, "quantum_efficiency");
  const FitResult* life = detail::find_kind(fits, "lifetime");

  // g2(0) from the lowest-power g2 fit, where saturation blurs it least.
  const FitResult* g2 = nullptr;
  for (const auto& f : fits) {
    if (f.kind != "g2") continue;
    auto power = [](const FitResult& x) {
      auto it = x.derived.find("power_uw");
      return it == x.derived.end() ? HUGE_VAL : it->second;
    };
    if (!g2 || power(f) < power(*g2)) g2 = &f;
  }

  const bool three = l2 || qe || (g2 && g2->has("lambda2"));
  r.scheme = three ? Scheme::ThreeLevel : Scheme::TwoLevel;

  if (g2) r.g2_zero = detail::positive(g2->derived.at("g2_zero_model"));
  else r.gaps.push_back("g2");
  if (l1) {
    r.tau21_cw = detail::positive(l1->derived.at("tau21"));
    if (l1->derived.count("p_sat_uw")) r.p_sat = detail::positive(l1->derived.at("p_sat_uw"));
  } else {
    r.gaps.push_back("lambda1");
  }
  if (life) r.tau21_pulsed = detail::positive(life->value("tau"));

  if (three) {
    if (l2) {
      r.r31 = detail::positive(l2->derived.at("r31_0_mhz"));
      r.r23 = detail::positive(l2->derived.at("r23_mhz"));
      r.shelving_ratio = detail::positive(l2->derived.at("shelving_ratio"));
    } else {
      r.gaps.push_back("lambda2");
    }
    if (qe) {
      r.eta_qe = detail::positive(qe->value("eta_qe"));
      r.eta = detail::positive(qe->derived.at("eta"));
      r.phi_inf = detail::positive(qe->derived.at("phi_inf"));
    } else {
      r.gaps.push_back("quantum_efficiency");
    }
  } else {
    r.eta_qe = 1.0;
    if (sat) {
      r.phi_inf = detail::positive(sat->value("phi_inf"));
      r.p_sat = detail::positive(sat->value("p_sat"));
      if (l1 && r.phi_inf) r.eta = collection_efficiency_cw(*r.phi_inf, l1->value("r21_0"));
    } else {
      r.gaps.push_back("saturation");
    }
  }

  if (r.tau21_cw && r.tau21_pulsed) {
    const double rel = std::abs(*r.tau21_cw - *r.tau21_pulsed) / *r.tau21_pulsed;
    if (rel > opt.lifetime_discrepancy) {
      r.flags.push_back("lifetime_discrepancy");
      char buf[160];
      std::snprintf(buf, sizeof buf, "CW and pulsed lifetimes differ by %.0f%% (%.3g ns vs %.3g ns)", 100.0 * rel,
                    *r.tau21_cw, *r.tau21_pulsed);
      r.warnings.push_back(buf);
    }
  }
  for (const auto& f : fits) {
    if (!f.converged) r.warnings.push_back(f.kind + " fit did not converge");
    for (const auto& fl : f.flags) r.warnings.push_back(f.kind + ": " + fl);
  }
  return r;
}

inline json to_json(const EmitterReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"label", r.label},
          {"scheme", to_string(r.scheme)},
          {"eta_qe", opt(r.eta_qe)},
          {"phi_inf", opt(r.phi_inf)},
          {"tau21_pulsed_ns", opt(r.tau21_pulsed)},
          {"tau21_cw_ns", opt(r.tau21_cw)},
          {"r31_mhz", opt(r.r31)},
          {"r23_mhz", opt(r.r23)},
          {"p_sat_uw", opt(r.p_sat)},
          {"eta", opt(r.eta)},
          {"g2_zero", opt(r.g2_zero)},
          {"shelving_ratio", opt(r.shelving_ratio)},
          {"gaps", r.gaps},
          {"flags", r.flags},
          {"warnings", r.warnings}};
}

/// Fixed-width table with one row per report.
inline std::string render_table(const std::vector<EmitterReport>& rows) {
  auto cell = [](const std::optional<double>& v, const char* fmt) -> std::string {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, fmt, *v);
    return buf;
  };
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-7s %-12s %-10s %-10s %-9s %-9s\n", "lambda", "eta_QE", "phi_inf",
                "tau21", "tau21", "r31", "r23");
  out += line;
  std::snprintf(line, sizeof line, "%-10s %-7s %-12s %-10s %-10s %-9s %-9s\n", "(nm)", "", "(counts/s)",
                "(pulsed)", "(CW)", "(MHz)", "(MHz)");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s %-7s %-12s %-10s %-10s %-9s %-9s\n", r.label.c_str(),
                  cell(r.eta_qe, "%.2g").c_str(), cell(r.phi_inf, "%.2e").c_str(), cell(r.tau21_pulsed, "%.3g").c_str(),
                  cell(r.tau21_cw, "%.3g").c_str(), cell(r.r31, "%.3g").c_str(), cell(r.r23, "%.3g").c_str());
    out += line;
  }
  return out;
}

}  // namespace photophys
