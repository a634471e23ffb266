#pragma once

// JSON forms of the domain types. Readers are strict: unknown keys and
// wrong types raise InputError naming the offending path.

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "photophys/correlate.hpp"
#include "photophys/fitting.hpp"
#include "photophys/models.hpp"
#include "photophys/montecarlo.hpp"

namespace photophys {

using json = nlohmann::ordered_json;

/// Malformed input file or configuration.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Reads fields of one JSON object and remembers which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InputError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& at(const std::string& key) {
    if (!j_.contains(key)) throw InputError(where(key) + ": missing");
    seen_.insert(key);
    return j_.at(key);
  }

  // Numbers; null reads as NaN so that NaN survives a round trip.
  void number(const std::string& key, double& out, bool required = false) {
    if (!j_.contains(key)) {
      if (required) throw InputError(where(key) + ": missing");
      return;
    }
    const json& v = at(key);
    if (v.is_null()) out = std::numeric_limits<double>::quiet_NaN();
    else if (v.is_number()) out = v.get<double>();
    else throw InputError(where(key) + ": expected a number");
  }

  template <class Int>
  void integer(const std::string& key, Int& out, bool required = false) {
    if (!j_.contains(key)) {
      if (required) throw InputError(where(key) + ": missing");
      return;
    }
    const json& v = at(key);
    if (!v.is_number_integer()) throw InputError(where(key) + ": expected an integer");
    if constexpr (std::is_unsigned_v<Int>) {
      if (v.is_number_unsigned()) out = static_cast<Int>(v.get<std::uint64_t>());
      else if (v.get<std::int64_t>() >= 0) out = static_cast<Int>(v.get<std::int64_t>());
      else throw InputError(where(key) + ": expected a non-negative integer");
    } else {
      out = static_cast<Int>(v.get<std::int64_t>());
    }
  }

  void string(const std::string& key, std::string& out, bool required = false) {
    if (!j_.contains(key)) {
      if (required) throw InputError(where(key) + ": missing");
      return;
    }
    const json& v = at(key);
    if (!v.is_string()) throw InputError(where(key) + ": expected a string");
    out = v.get<std::string>();
  }

  void boolean(const std::string& key, bool& out) {
    if (!j_.contains(key)) return;
    const json& v = at(key);
    if (!v.is_boolean()) throw InputError(where(key) + ": expected true or false");
    out = v.get<bool>();
  }

  void numbers(const std::string& key, std::vector<double>& out) {
    if (!j_.contains(key)) return;
    const json& v = at(key);
    if (!v.is_array()) throw InputError(where(key) + ": expected an array");
    out.clear();
    for (const auto& e : v) {
      if (e.is_null()) out.push_back(std::numeric_limits<double>::quiet_NaN());
      else if (e.is_number()) out.push_back(e.get<double>());
      else throw InputError(where(key) + ": expected numbers");
    }
  }

  void strings(const std::string& key, std::vector<std::string>& out) {
    if (!j_.contains(key)) return;
    const json& v = at(key);
    if (!v.is_array()) throw InputError(where(key) + ": expected an array");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_string()) throw InputError(where(key) + ": expected strings");
      out.push_back(e.get<std::string>());
    }
  }

  // Marks a key as known without interpreting it (free-form annotations).
  void ignore(const std::string& key) {
    if (j_.contains(key)) seen_.insert(key);
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

  /// Throws on keys that no reader consumed.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InputError(where(it.key()) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Wraps domain validation failures as input errors.
template <class F>
void validated(const std::string& path, F&& check) {
  try {
    check();
  } catch (const std::domain_error& e) {
    throw InputError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw InputError(path + ": " + e.what());
  }
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Models

inline json to_json(const RateSet& r) {
  return {{"scheme", to_string(r.scheme)}, {"r12", r.r12}, {"r21", r.r21}, {"r23", r.r23},
          {"r31", r.r31}, {"quantum_efficiency", r.quantum_efficiency}};
}

inline RateSet rate_set_from_json(const json& j, const std::string& path = "rates") {
  detail::ObjectReader in(j, path);
  RateSet r;
  std::string scheme = to_string(r.scheme);
  in.string("scheme", scheme);
  detail::validated(in.where("scheme"), [&] { r.scheme = scheme_from_string(scheme); });
  in.number("r12", r.r12);
  in.number("r21", r.r21);
  in.number("r23", r.r23);
  in.number("r31", r.r31);
  in.number("quantum_efficiency", r.quantum_efficiency);
  in.finish();
  detail::validated(path, [&] { r.validate(); });
  return r;
}

inline json to_json(const PowerLaw& law) {
  json j{{"scheme", to_string(law.scheme)}, {"r21_0", law.r21_0}, {"alpha", law.alpha}};
  if (law.scheme == Scheme::ThreeLevel) {
    j["r31_0"] = law.r31_0;
    j["beta"] = law.beta;
    j["r23"] = law.r23;
  }
  if (law.pump_slope) j["pump_slope"] = *law.pump_slope;
  j["quantum_efficiency"] = law.quantum_efficiency;
  return j;
}

inline PowerLaw power_law_from_json(const json& j, const std::string& path = "power_law") {
  detail::ObjectReader in(j, path);
  PowerLaw law;
  std::string scheme = to_string(law.scheme);
  in.string("scheme", scheme);
  detail::validated(in.where("scheme"), [&] { law.scheme = scheme_from_string(scheme); });
  in.number("r21_0", law.r21_0, true);
  in.number("alpha", law.alpha);
  in.number("r31_0", law.r31_0);
  in.number("beta", law.beta);
  in.number("r23", law.r23);
  if (in.has("pump_slope")) {
    double k = 0.0;
    in.number("pump_slope", k);
    law.pump_slope = k;
  }
  in.number("quantum_efficiency", law.quantum_efficiency);
  in.finish();
  detail::validated(path, [&] { law.validate(); });
  return law;
}

inline json to_json(const DetectionChain& c) {
  return {{"split_ratio", c.split_ratio},   {"jitter_fwhm_ps", c.jitter_fwhm_ps},
          {"dead_time_ns", c.dead_time_ns}, {"dark_rate", c.dark_rate},
          {"background_rate", c.background_rate}, {"eta_total", c.eta_total}};
}

inline DetectionChain chain_from_json(const json& j, const std::string& path = "chain") {
  detail::ObjectReader in(j, path);
  DetectionChain c;
  in.number("split_ratio", c.split_ratio);
  in.number("jitter_fwhm_ps", c.jitter_fwhm_ps);
  in.number("dead_time_ns", c.dead_time_ns);
  in.number("dark_rate", c.dark_rate);
  in.number("background_rate", c.background_rate);
  in.number("eta_total", c.eta_total);
  in.finish();
  detail::validated(path, [&] { c.validate(); });
  return c;
}

inline json to_json(const ExcitationProgram& p) {
  json j{{"mode", to_string(p.mode)}, {"duration_s", p.duration_s}};
  if (p.mode == ExcitationMode::CW) {
    j["power_uw"] = p.power_uw;
  } else {
    j["rep_rate_mhz"] = p.rep_rate_mhz;
    j["pulse_width_ps"] = p.pulse_width_ps;
    j["pulse_energy_scale"] = p.pulse_energy_scale;
    j["fast_background_per_pulse"] = p.fast_background_per_pulse;
    j["fast_background_lifetime_ns"] = p.fast_background_lifetime_ns;
  }
  return j;
}

// Reads the program fields of `in`; the caller finishes the reader so that
// extra keys (such as a power list) can live alongside.
inline ExcitationProgram read_program(detail::ObjectReader& in) {
  ExcitationProgram p;
  std::string mode = to_string(p.mode);
  in.string("mode", mode);
  if (mode == "cw") p.mode = ExcitationMode::CW;
  else if (mode == "pulsed") p.mode = ExcitationMode::Pulsed;
  else throw InputError(in.where("mode") + ": expected \"cw\" or \"pulsed\"");
  in.number("power_uw", p.power_uw);
  in.number("duration_s", p.duration_s);
  in.number("rep_rate_mhz", p.rep_rate_mhz);
  in.number("pulse_width_ps", p.pulse_width_ps);
  in.number("pulse_energy_scale", p.pulse_energy_scale);
  in.number("fast_background_per_pulse", p.fast_background_per_pulse);
  in.number("fast_background_lifetime_ns", p.fast_background_lifetime_ns);
  return p;
}

inline ExcitationProgram program_from_json(const json& j, const std::string& path = "excitation") {
  detail::ObjectReader in(j, path);
  ExcitationProgram p = read_program(in);
  in.finish();
  detail::validated(path, [&] { p.validate(); });
  return p;
}

inline json to_json(const RecordMeta& m) {
  return {{"label", m.label},
          {"seed", m.seed},
          {"ticks_per_ns", m.ticks_per_ns},
          {"emitted_photons", m.emitted_photons},
          {"rates", to_json(m.rates)},
          {"excitation", to_json(m.program)},
          {"chain", to_json(m.chain)}};
}

inline RecordMeta record_meta_from_json(const json& j, const std::string& path = "meta") {
  detail::ObjectReader in(j, path);
  RecordMeta m;
  in.string("label", m.label);
  in.integer("seed", m.seed);
  in.number("ticks_per_ns", m.ticks_per_ns);
  in.integer("emitted_photons", m.emitted_photons);
  if (in.has("rates")) m.rates = rate_set_from_json(in.at("rates"), in.where("rates"));
  if (in.has("excitation")) m.program = program_from_json(in.at("excitation"), in.where("excitation"));
  if (in.has("chain")) m.chain = chain_from_json(in.at("chain"), in.where("chain"));
  in.ignore("counts");
  in.ignore("generator");
  in.finish();
  if (!(m.ticks_per_ns > 0.0)) throw InputError(path + ".ticks_per_ns: must be positive");
  return m;
}

// ---------------------------------------------------------------------------
// Curves (metadata only; values live in CSV)

inline json curve_meta(const G2Curve& c) {
  return {{"kind", "g2"},
          {"bin_width_ns", c.bin_width},
          {"acquisition_s", c.acquisition_s},
          {"rate_a", c.rate_a},
          {"rate_b", c.rate_b},
          {"normalization", c.normalization},
          {"warnings", c.warnings}};
}

inline json curve_meta(const DecayCurve& c) {
  return {{"kind", "decay"}, {"bin_width_ns", c.bin_width}, {"rep_rate_mhz", c.rep_rate_mhz}, {"warnings", c.warnings}};
}

// ---------------------------------------------------------------------------
// Fit results

inline json to_json(const FitResult& f) {
  json params = json::array();
  for (const auto& p : f.params)
    params.push_back({{"name", p.name}, {"value", detail::number_or_null(p.value)},
                      {"error", detail::number_or_null(p.error)}, {"unit", p.unit}});
  json cov = json::array();
  for (Eigen::Index i = 0; i < f.covariance.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < f.covariance.cols(); ++k) row.push_back(detail::number_or_null(f.covariance(i, k)));
    cov.push_back(row);
  }
  json derived = json::object();
  for (const auto& [k, v] : f.derived) derived[k] = detail::number_or_null(v);
  return {{"kind", f.kind},
          {"label", f.label},
          {"converged", f.converged},
          {"iterations", f.iterations},
          {"message", f.message},
          {"chi2", detail::number_or_null(f.chi2)},
          {"chi2_dof", detail::number_or_null(f.chi2_dof)},
          {"dof", f.dof},
          {"params", params},
          {"covariance", cov},
          {"derived", derived},
          {"flags", f.flags},
          {"warnings", f.warnings}};
}

inline FitResult fit_result_from_json(const json& j, const std::string& path = "fit") {
  detail::ObjectReader in(j, path);
  FitResult f;
  in.string("kind", f.kind, true);
  in.string("label", f.label);
  in.boolean("converged", f.converged);
  in.integer("iterations", f.iterations);
  in.string("message", f.message);
  in.number("chi2", f.chi2);
  in.number("chi2_dof", f.chi2_dof);
  in.integer("dof", f.dof);
  if (in.has("params")) {
    const json& ps = in.at("params");
    if (!ps.is_array()) throw InputError(in.where("params") + ": expected an array");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      detail::ObjectReader pin(ps[i], in.where("params") + "[" + std::to_string(i) + "]");
      FitParameter p;
      pin.string("name", p.name, true);
      pin.number("value", p.value, true);
      pin.number("error", p.error);
      pin.string("unit", p.unit);
      pin.finish();
      f.params.push_back(p);
    }
  }
  const auto n = static_cast<Eigen::Index>(f.params.size());
  f.covariance = Eigen::MatrixXd::Zero(n, n);
  if (in.has("covariance")) {
    const json& c = in.at("covariance");
    if (!c.is_array() || static_cast<Eigen::Index>(c.size()) != n)
      throw InputError(in.where("covariance") + ": expected a square matrix matching params");
    for (Eigen::Index i = 0; i < n; ++i) {
      const json& row = c[static_cast<std::size_t>(i)];
      if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n)
        throw InputError(in.where("covariance") + ": expected a square matrix matching params");
      for (Eigen::Index k = 0; k < n; ++k) {
        const json& v = row[static_cast<std::size_t>(k)];
        if (v.is_null()) f.covariance(i, k) = std::numeric_limits<double>::quiet_NaN();
        else if (v.is_number()) f.covariance(i, k) = v.get<double>();
        else throw InputError(in.where("covariance") + ": expected numbers");
      }
    }
  }
  if (in.has("derived")) {
    const json& d = in.at("derived");
    if (!d.is_object()) throw InputError(in.where("derived") + ": expected an object");
    for (auto it = d.begin(); it != d.end(); ++it) {
      if (it.value().is_null()) f.derived[it.key()] = std::numeric_limits<double>::quiet_NaN();
      else if (it.value().is_number()) f.derived[it.key()] = it.value().get<double>();
      else throw InputError(in.where("derived") + "." + it.key() + ": expected a number");
    }
  }
  in.strings("flags", f.flags);
  in.strings("warnings", f.warnings);
  in.finish();
  return f;
}

}  // namespace photophys
