#pragma once

// Run configuration: one JSON document describing the emitter, excitation,
// detection chain, analysis settings, seed and output directory. Unknown
// keys anywhere are rejected.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "photophys/io.hpp"
#include "photophys/serialize.hpp"

namespace photophys {

struct EmitterSpec {
  std::optional<PowerLaw> law;    // power-dependent rates
  std::optional<RateSet> rates;   // fixed rates

  Scheme scheme() const { return law ? law->scheme : rates->scheme; }

  /// Rates at a CW power in uW; fixed rate sets ignore the power.
  RateSet rates_at(double p_uw) const { return law ? law->rates_at(units::uw_to_mw(p_uw)) : *rates; }
};

struct AnalysisConfig {
  double bin_width_ns = 0.154;
  double window_ns = 100.0;
  std::optional<double> irf_fwhm_ps;  // default: HBT response of the chain jitter
  double t_min_ns = 0.5;
  double decay_bin_ns = 0.05;
  double decay_guard_ns = 2.0;
  std::optional<double> rho;  // background correction of g2 curves
  std::optional<double> eta;  // collection efficiency for the quantum-efficiency fit

  void validate() const {
    detail::require(std::isfinite(bin_width_ns) && bin_width_ns > 0.0, "bin width must be positive");
    detail::require(std::isfinite(window_ns) && window_ns > bin_width_ns, "window must exceed the bin width");
    detail::require(!irf_fwhm_ps || detail::finite_nonneg(*irf_fwhm_ps), "IRF FWHM must be non-negative");
    detail::require(detail::finite_nonneg(t_min_ns), "t_min must be non-negative");
    detail::require(std::isfinite(decay_bin_ns) && decay_bin_ns > 0.0, "decay bin must be positive");
    detail::require(detail::finite_nonneg(decay_guard_ns), "decay guard must be non-negative");
    detail::require(!rho || (*rho > 0.0 && *rho <= 1.0), "rho must lie in (0, 1]");
    detail::require(!eta || (*eta > 0.0 && *eta <= 1.0), "eta must lie in (0, 1]");
  }
};

struct RunConfig {
  std::string label = "emitter";
  EmitterSpec emitter;
  ExcitationProgram excitation;
  std::vector<double> powers_uw;  // CW sweep; empty means excitation.power_uw only
  DetectionChain chain;
  AnalysisConfig analysis;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  std::uint64_t max_events = SimulationOptions{}.max_events;
  std::map<std::string, double> reference;     // tabulated values for comparison
  std::map<std::string, std::string> sources;  // provenance of the settings

  /// Powers to simulate, in order.
  std::vector<double> sweep() const {
    if (excitation.mode == ExcitationMode::Pulsed || powers_uw.empty()) return {excitation.power_uw};
    return powers_uw;
  }
};

inline json to_json(const AnalysisConfig& a) {
  json j{{"bin_width_ns", a.bin_width_ns}, {"window_ns", a.window_ns}, {"t_min_ns", a.t_min_ns},
         {"decay_bin_ns", a.decay_bin_ns}, {"decay_guard_ns", a.decay_guard_ns}};
  if (a.irf_fwhm_ps) j["irf_fwhm_ps"] = *a.irf_fwhm_ps;
  if (a.rho) j["rho"] = *a.rho;
  if (a.eta) j["eta"] = *a.eta;
  return j;
}

inline AnalysisConfig analysis_from_json(const json& j, const std::string& path = "analysis") {
  detail::ObjectReader in(j, path);
  AnalysisConfig a;
  in.number("bin_width_ns", a.bin_width_ns);
  in.number("window_ns", a.window_ns);
  in.number("t_min_ns", a.t_min_ns);
  in.number("decay_bin_ns", a.decay_bin_ns);
  in.number("decay_guard_ns", a.decay_guard_ns);
  auto opt = [&](const char* key, std::optional<double>& out) {
    if (!in.has(key)) return;
    double v = 0.0;
    in.number(key, v);
    out = v;
  };
  opt("irf_fwhm_ps", a.irf_fwhm_ps);
  opt("rho", a.rho);
  opt("eta", a.eta);
  in.finish();
  detail::validated(path, [&] { a.validate(); });
  return a;
}

inline json to_json(const RunConfig& c) {
  json emitter;
  if (c.emitter.law) emitter["power_law"] = to_json(*c.emitter.law);
  else emitter["rates"] = to_json(*c.emitter.rates);
  json exc = to_json(c.excitation);
  if (!c.powers_uw.empty()) exc["powers_uw"] = c.powers_uw;
  json j{{"label", c.label},   {"emitter", emitter},           {"excitation", exc},
         {"chain", to_json(c.chain)}, {"analysis", to_json(c.analysis)}, {"seed", c.seed},
         {"output_dir", c.output_dir}, {"max_events", c.max_events}};
  if (!c.reference.empty()) j["reference"] = c.reference;
  if (!c.sources.empty()) j["sources"] = c.sources;
  return j;
}

inline RunConfig config_from_json(const json& j, const std::string& path = "config") {
  detail::ObjectReader in(j, path);
  RunConfig c;
  in.string("label", c.label);
  {
    detail::ObjectReader em(in.at("emitter"), in.where("emitter"));
    if (em.has("power_law") == em.has("rates"))
      throw InputError(in.where("emitter") + ": give exactly one of power_law or rates");
    if (em.has("power_law")) c.emitter.law = power_law_from_json(em.at("power_law"), em.where("power_law"));
    else c.emitter.rates = rate_set_from_json(em.at("rates"), em.where("rates"));
    em.finish();
  }
  {
    detail::ObjectReader ex(in.at("excitation"), in.where("excitation"));
    c.excitation = read_program(ex);
    ex.numbers("powers_uw", c.powers_uw);
    ex.finish();
    detail::validated(in.where("excitation"), [&] { c.excitation.validate(); });
    for (double p : c.powers_uw)
      if (!(std::isfinite(p) && p >= 0.0)) throw InputError(in.where("excitation") + ".powers_uw: powers must be non-negative");
  }
  if (in.has("chain")) c.chain = chain_from_json(in.at("chain"), in.where("chain"));
  if (in.has("analysis")) c.analysis = analysis_from_json(in.at("analysis"), in.where("analysis"));
  in.integer("seed", c.seed);
  in.string("output_dir", c.output_dir);
  in.integer("max_events", c.max_events);
  if (in.has("reference")) {
    const json& r = in.at("reference");
    if (!r.is_object()) throw InputError(in.where("reference") + ": expected an object");
    for (auto it = r.begin(); it != r.end(); ++it) {
      if (!it.value().is_number()) throw InputError(in.where("reference") + "." + it.key() + ": expected a number");
      c.reference[it.key()] = it.value().get<double>();
    }
  }
  if (in.has("sources")) {
    const json& s = in.at("sources");
    if (!s.is_object()) throw InputError(in.where("sources") + ": expected an object");
    for (auto it = s.begin(); it != s.end(); ++it) {
      if (!it.value().is_string()) throw InputError(in.where("sources") + "." + it.key() + ": expected a string");
      c.sources[it.key()] = it.value().get<std::string>();
    }
  }
  in.finish();
  if (c.excitation.mode == ExcitationMode::CW && c.emitter.law && c.sweep().size() == 1 && c.sweep()[0] == 0.0)
    throw InputError(path + ".excitation: CW run with a power law needs power_uw or powers_uw");
  return c;
}

inline RunConfig load_config(const std::string& path) { return config_from_json(io::read_json(path), path); }

}  // namespace photophys
