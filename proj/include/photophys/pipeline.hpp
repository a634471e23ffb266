#pragma once

// The simulate -> correlate -> fit -> extrapolate chain, as library calls.
// The command-line tool is a thin layer over these functions.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "photophys/config.hpp"
#include "photophys/correlate.hpp"
#include "photophys/fitting.hpp"
#include "photophys/montecarlo.hpp"

namespace photophys {

struct SimulationJob {
  std::string name;  // file stem
  RateSet rates;
  ExcitationProgram program;
  std::uint64_t seed = 0;
};

inline std::string power_tag(double p_uw) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%guW", p_uw);
  return buf;
}

/// One job per power of the sweep; seeds are named sub-streams of the run seed.
inline std::vector<SimulationJob> plan_runs(const RunConfig& cfg) {
  const SeedStreams streams(cfg.seed);
  std::vector<SimulationJob> jobs;
  const auto powers = cfg.sweep();
  for (std::size_t i = 0; i < powers.size(); ++i) {
    SimulationJob job;
    job.program = cfg.excitation;
    job.program.power_uw = powers[i];
    job.rates = cfg.emitter.rates_at(powers[i]);
    char idx[24];
    std::snprintf(idx, sizeof idx, "%02zu", i);
    if (cfg.excitation.mode == ExcitationMode::Pulsed) {
      job.name = cfg.label + "_pulsed";
      job.seed = streams.child("pulsed");
    } else {
      job.name = cfg.label + "_" + idx + "_" + power_tag(powers[i]);
      job.seed = streams.child("cw/" + std::string(idx));
    }
    jobs.push_back(job);
  }
  return jobs;
}

inline TimestampRecord run_job(const SimulationJob& job, const RunConfig& cfg) {
  SimulationOptions opt;
  opt.max_events = cfg.max_events;
  TimestampRecord rec = job.program.mode == ExcitationMode::CW
                            ? simulate_cw(job.rates, job.program, cfg.chain, job.seed, opt)
                            : simulate_pulsed(job.rates, job.program, cfg.chain, job.seed, opt);
  rec.meta.label = cfg.label;
  return rec;
}

/// Runs every job, `threads` at a time; results are in job order whatever
/// the thread count. The first exception is rethrown.
template <class Job, class Fn>
auto parallel_map(const std::vector<Job>& jobs, int threads, Fn fn) {
  using Out = decltype(fn(jobs.front()));
  std::vector<std::optional<Out>> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        out[i].emplace(fn(jobs[i]));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(jobs.size(), 1)));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<Out> result;
  result.reserve(jobs.size());
  for (auto& o : out) result.push_back(std::move(*o));
  return result;
}

inline std::vector<TimestampRecord> simulate_all(const RunConfig& cfg, int threads = 1) {
  const auto jobs = plan_runs(cfg);
  return parallel_map(jobs, threads, [&](const SimulationJob& j) { return run_job(j, cfg); });
}

// ---------------------------------------------------------------------------
// Analysis of single records

inline G2Curve correlate_record(const TimestampRecord& rec, const AnalysisConfig& a) {
  G2Curve c = cross_correlate(rec, a.bin_width_ns, a.window_ns);
  if (a.rho) c = background_correct(std::move(c), *a.rho);
  return c;
}

inline DecayCurve decay_of(const TimestampRecord& rec, const AnalysisConfig& a) {
  return decay_histogram(rec, rec.meta.program.rep_rate_mhz, a.decay_bin_ns, a.decay_guard_ns);
}

/// IRF for g2 fits: explicit FWHM if configured, else the HBT response of
/// the detector jitter.
inline Irf analysis_irf(const AnalysisConfig& a, const DetectionChain& chain) {
  return a.irf_fwhm_ps ? Irf::gaussian(*a.irf_fwhm_ps) : hbt_irf(chain.jitter_fwhm_ps);
}

/// Emitter count rate behind a curve: dead-time corrected, dark counts and
/// known background removed.
inline SaturationPoint saturation_point(double p_uw, const G2Curve& c, const DetectionChain& chain) {
  SaturationPoint s;
  s.p_uw = p_uw;
  s.phi = signal_rate(c.rate_a, c.rate_b, chain.dead_time_ns, chain.dark_rate, chain.background_rate);
  // Poisson error of the total count, carried through the corrections.
  const double total = (c.rate_a + c.rate_b) * c.acquisition_s;
  s.phi_err = total > 0.0 ? s.phi / std::sqrt(total) : 0.0;
  return s;
}

inline FitResult fit_curve(const G2Curve& curve, const Irf& irf, Scheme scheme, double p_uw, const std::string& label) {
  FitResult f = fit_g2(curve, irf, scheme);
  f.label = label;
  f.derived["power_uw"] = p_uw;
  return f;
}

// ---------------------------------------------------------------------------
// Power sweeps

struct SweepAnalysis {
  std::vector<double> powers_uw;
  std::vector<G2Curve> curves;
  std::vector<FitResult> g2;
  PowerSeries series;
  std::optional<FitResult> lambda1;
  std::optional<FitResult> lambda2;
  std::vector<SaturationPoint> saturation;
  std::optional<FitResult> saturation_fit;  // two-level
  std::optional<FitResult> quantum_efficiency;  // three-level with eta known
  std::vector<std::string> warnings;

  /// All fits, in a fixed order, for reports and files.
  std::vector<FitResult> fits() const {
    std::vector<FitResult> out = g2;
    for (const auto* f : {&lambda1, &lambda2, &saturation_fit, &quantum_efficiency})
      if (*f) out.push_back(**f);
    return out;
  }
};

/// Power-series inversion from per-power g2 fits. Extrapolations need at
/// least three powers; the quantum-efficiency fit needs eta.
inline SweepAnalysis analyze_fits(std::vector<FitResult> g2, std::vector<G2Curve> curves,
                                  const std::vector<double>& powers_uw, Scheme scheme, const DetectionChain& chain,
                                  std::optional<double> eta, const std::string& label) {
  SweepAnalysis out;
  out.powers_uw = powers_uw;
  out.g2 = std::move(g2);
  out.curves = std::move(curves);
  out.series.label = label;
  for (std::size_t i = 0; i < out.g2.size(); ++i) {
    out.series.entries.push_back(power_point(powers_uw[i], out.g2[i]));
    if (i < out.curves.size()) out.saturation.push_back(saturation_point(powers_uw[i], out.curves[i], chain));
  }
  if (out.series.entries.size() < 3) {
    out.warnings.push_back("fewer than 3 powers: no extrapolation");
    return out;
  }
  out.lambda1 = extrapolate_lambda1(out.series);
  out.lambda1->label = label;
  if (scheme == Scheme::ThreeLevel) {
    out.lambda2 = extrapolate_lambda2(out.series, *out.lambda1);
    out.lambda2->label = label;
    if (eta && !out.saturation.empty()) {
      out.quantum_efficiency = fit_quantum_efficiency(out.saturation, power_law_from_fits(*out.lambda1, &*out.lambda2), *eta);
      out.quantum_efficiency->label = label;
    }
  } else if (out.saturation.size() >= 3) {
    out.saturation_fit = fit_saturation(out.saturation);
    out.saturation_fit->label = label;
    out.saturation_fit->derived["r21_0"] = out.lambda1->value("r21_0");
  }
  return out;
}

/// Correlates and fits every record of a CW sweep.
inline SweepAnalysis analyze_sweep(const std::vector<TimestampRecord>& records, const RunConfig& cfg, int threads = 1) {
  const Irf irf = analysis_irf(cfg.analysis, cfg.chain);
  const Scheme scheme = cfg.emitter.scheme();
  struct Item {
    G2Curve curve;
    FitResult fit;
  };
  auto items = parallel_map(records, threads, [&](const TimestampRecord& rec) {
    Item it;
    it.curve = correlate_record(rec, cfg.analysis);
    it.fit = fit_curve(it.curve, irf, scheme, rec.meta.program.power_uw, cfg.label);
    return it;
  });
  std::vector<FitResult> fits;
  std::vector<G2Curve> curves;
  std::vector<double> powers;
  for (std::size_t i = 0; i < items.size(); ++i) {
    fits.push_back(std::move(items[i].fit));
    curves.push_back(std::move(items[i].curve));
    powers.push_back(records[i].meta.program.power_uw);
  }
  return analyze_fits(std::move(fits), std::move(curves), powers, scheme, cfg.chain, cfg.analysis.eta, cfg.label);
}

/// Lifetime fit of a pulsed record, labelled for the report.
inline FitResult analyze_pulsed(const TimestampRecord& rec, const AnalysisConfig& a, const std::string& label) {
  LifetimeOptions opt;
  opt.t_min = a.t_min_ns;
  FitResult f = fit_lifetime(decay_of(rec, a), opt);
  f.label = label;
  return f;
}

}  // namespace photophys
