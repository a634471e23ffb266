#pragma once

// Photon-level simulation of a single emitter observed through a
// Hanbury-Brown-Twiss setup: a 50:50 splitter feeding two detectors with
// timing jitter, dead time and dark counts.
//
// The emitter is an exact continuous-time Markov chain. Under CW excitation
// the default sampler jumps directly from one detected photon to the next:
// between two kept emissions the number of visits to the excited state is
// geometric, the number of shelving excursions among them is binomial and
// the summed dwell times are gamma distributed. This has the same law as
// stepping every transition and thinning afterwards, at a cost proportional
// to the number of detected photons instead of emitted ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "photophys/kinetics.hpp"
#include "photophys/models.hpp"
#include "photophys/random.hpp"
#include "photophys/units.hpp"

namespace photophys {

struct DetectionChain {
  double split_ratio = 0.5;       // probability a photon goes to channel A
  double jitter_fwhm_ps = 350.0;  // per detector
  double dead_time_ns = 50.0;     // per detector
  double dark_rate = 150.0;       // counts/s per detector
  double background_rate = 0.0;   // uncorrelated counts/s reaching the detectors
  double eta_total = 0.013;       // detection probability per emitted photon

  void validate() const {
    detail::require(split_ratio > 0.0 && split_ratio < 1.0, "DetectionChain: split ratio must lie in (0, 1)");
    detail::require(detail::finite_nonneg(jitter_fwhm_ps), "DetectionChain: jitter must be non-negative");
    detail::require(detail::finite_nonneg(dead_time_ns), "DetectionChain: dead time must be non-negative");
    detail::require(detail::finite_nonneg(dark_rate), "DetectionChain: dark rate must be non-negative");
    detail::require(detail::finite_nonneg(background_rate), "DetectionChain: background rate must be non-negative");
    detail::require(eta_total >= 0.0 && eta_total <= 1.0, "DetectionChain: eta_total must lie in [0, 1]");
  }
};

enum class ExcitationMode { CW, Pulsed };

inline const char* to_string(ExcitationMode m) { return m == ExcitationMode::CW ? "cw" : "pulsed"; }

struct ExcitationProgram {
  ExcitationMode mode = ExcitationMode::CW;
  double power_uw = 0.0;             // CW power, informational for the record
  double rep_rate_mhz = 20.0;        // pulsed
  double pulse_width_ps = 200.0;     // pulsed, FWHM; promotion is instantaneous
  double pulse_energy_scale = 10.0;  // pulsed, p_exc = 1 - exp(-scale)
  double duration_s = 1.0;
  // Fast luminescence from the host crystal following each pulse.
  double fast_background_per_pulse = 0.0;    // mean emitted photons per pulse
  double fast_background_lifetime_ns = 0.3;

  void validate() const {
    detail::require(std::isfinite(duration_s) && duration_s > 0.0, "ExcitationProgram: duration must be positive");
    detail::require(detail::finite_nonneg(power_uw), "ExcitationProgram: power must be non-negative");
    if (mode == ExcitationMode::Pulsed) {
      detail::require(std::isfinite(rep_rate_mhz) && rep_rate_mhz > 0.0,
                      "ExcitationProgram: repetition rate must be positive");
      detail::require(detail::finite_nonneg(pulse_energy_scale),
                      "ExcitationProgram: pulse energy scale must be non-negative");
      detail::require(detail::finite_nonneg(pulse_width_ps), "ExcitationProgram: pulse width must be non-negative");
      detail::require(detail::finite_nonneg(fast_background_per_pulse),
                      "ExcitationProgram: fast background must be non-negative");
      detail::require(fast_background_per_pulse == 0.0 || fast_background_lifetime_ns > 0.0,
                      "ExcitationProgram: fast background lifetime must be positive");
    }
  }

  double pulse_period_ns() const { return 1e3 / rep_rate_mhz; }
  double excitation_probability() const { return -std::expm1(-pulse_energy_scale); }
};

struct RecordMeta {
  std::string label;
  ExcitationProgram program;
  DetectionChain chain;
  RateSet rates;
  std::uint64_t seed = 0;
  std::uint64_t emitted_photons = 0;
  double ticks_per_ns = 1000.0;  // timestamps are integer picoseconds
};

/// Two channels of detection timestamps in integer ticks.
struct TimestampRecord {
  std::vector<std::int64_t> channel_a;
  std::vector<std::int64_t> channel_b;
  RecordMeta meta;

  double duration_ns() const { return units::s_to_ns(meta.program.duration_s); }
  double tick_ns() const { return 1.0 / meta.ticks_per_ns; }
  double to_ns(std::int64_t tick) const { return static_cast<double>(tick) / meta.ticks_per_ns; }

  const std::vector<std::int64_t>& channel(int i) const { return i == 0 ? channel_a : channel_b; }

  /// Mean count rate of one channel in counts/s.
  double count_rate(int i) const {
    return static_cast<double>(channel(i).size()) / meta.program.duration_s;
  }

  std::size_t total_events() const { return channel_a.size() + channel_b.size(); }

  /// Throws if a channel is not strictly increasing or violates the dead time.
  void validate() const {
    const auto dead = static_cast<std::int64_t>(std::llround(meta.chain.dead_time_ns * meta.ticks_per_ns));
    for (int c = 0; c < 2; ++c) {
      const auto& ch = channel(c);
      for (std::size_t i = 1; i < ch.size(); ++i) {
        if (ch[i] <= ch[i - 1]) throw std::runtime_error("TimestampRecord: channel not strictly increasing");
        if (ch[i] - ch[i - 1] < dead) throw std::runtime_error("TimestampRecord: dead time violated");
      }
    }
  }

  bool operator==(const TimestampRecord& o) const {
    return channel_a == o.channel_a && channel_b == o.channel_b;
  }
};

class SizingError : public std::runtime_error {
 public:
  SizingError(double expected, std::uint64_t cap)
      : std::runtime_error("expected " + std::to_string(static_cast<std::uint64_t>(expected)) +
                           " recorded events exceeds the cap of " + std::to_string(cap) +
                           "; shorten the duration or raise the cap"),
        expected_(expected) {}
  double expected_events() const { return expected_; }

 private:
  double expected_;
};

enum class CwSampling { Aggregated, PerTransition };

struct SimulationOptions {
  std::uint64_t max_events = 200'000'000;
  CwSampling sampling = CwSampling::Aggregated;
};

/// One step of the emitter's Markov chain.
struct Transition {
  int from = 1;
  int to = 1;
  double dwell = 0.0;  // ns spent in `from`
  double time = 0.0;   // ns, time of the jump
};

/// Exact transition-by-transition sampling of the level scheme, starting in
/// the ground state at t = 0.
class EmitterTrajectory {
 public:
  EmitterTrajectory(const RateSet& rates, std::uint64_t seed)
      : rates_(rates), engine_(SeedStreams(seed).engine("trajectory")) {
    rates_.validate();
  }

  int state() const { return state_; }
  double time() const { return time_; }

  /// Total exit rate of a level.
  double exit_rate(int level) const {
    switch (level) {
      case 1: return rates_.r12;
      case 2: return rates_.r21 + (rates_.scheme == Scheme::ThreeLevel ? rates_.r23 : 0.0);
      default: return rates_.scheme == Scheme::ThreeLevel ? rates_.r31 : 0.0;
    }
  }

  /// Advances one jump. Returns a transition with infinite time when the
  /// current level has no way out.
  Transition next() {
    Transition tr;
    tr.from = state_;
    const double k = exit_rate(state_);
    if (k == 0.0) {
      tr.to = state_;
      tr.dwell = tr.time = std::numeric_limits<double>::infinity();
      return tr;
    }
    tr.dwell = std::exponential_distribution<double>(k)(engine_);
    if (state_ == 1) {
      tr.to = 2;
    } else if (state_ == 2) {
      const double r23 = rates_.scheme == Scheme::ThreeLevel ? rates_.r23 : 0.0;
      tr.to = uniform_(engine_) * k < r23 ? 3 : 1;
    } else {
      tr.to = 1;
    }
    time_ += tr.dwell;
    tr.time = time_;
    state_ = tr.to;
    return tr;
  }

 private:
  RateSet rates_;
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  int state_ = 1;
  double time_ = 0.0;
};

namespace detail {

inline double expected_cw_emission_rate(const RateSet& rates) {
  return rates.r21 * steady_state(rates).n2;  // ns^-1
}

inline void check_event_budget(double expected, std::uint64_t cap) {
  if (expected > static_cast<double>(cap)) throw SizingError(expected, cap);
}

inline void append_poisson(std::vector<double>& out, double rate_per_ns, double t_end,
                           std::mt19937_64& engine) {
  if (rate_per_ns <= 0.0) return;
  std::exponential_distribution<double> gap(rate_per_ns);
  for (double t = gap(engine); t < t_end; t += gap(engine)) out.push_back(t);
}

inline std::vector<std::int64_t> to_ticks(const std::vector<double>& times, double t_end,
                                          double ticks_per_ns) {
  std::vector<std::int64_t> ticks;
  ticks.reserve(times.size());
  for (double t : times)
    if (t >= 0.0 && t < t_end) ticks.push_back(static_cast<std::int64_t>(std::floor(t * ticks_per_ns)));
  std::sort(ticks.begin(), ticks.end());
  return ticks;
}

// Earliest-survivor rule: a count is kept only if the detector has been live
// for the full dead time since the previous kept count.
inline void prune_dead_time(std::vector<std::int64_t>& ticks, std::int64_t dead) {
  std::size_t kept = 0;
  for (std::size_t i = 0; i < ticks.size(); ++i) {
    if (kept > 0 && (ticks[i] <= ticks[kept - 1] || ticks[i] - ticks[kept - 1] < dead)) continue;
    ticks[kept++] = ticks[i];
  }
  ticks.resize(kept);
}

// Splitter, jitter, background, dark counts and dead time for photons that
// already survived collection/detection thinning.
inline TimestampRecord route_to_detectors(const std::vector<double>& photons, const DetectionChain& chain,
                                          double duration_s, std::uint64_t seed) {
  chain.validate();
  const SeedStreams streams(seed);
  auto split_rng = streams.engine("split");
  auto jitter_rng = streams.engine("jitter");
  auto background_rng = streams.engine("background");
  auto dark_rng = streams.engine("dark");

  const double t_end = units::s_to_ns(duration_s);
  const double sigma = units::ps_to_ns(chain.jitter_fwhm_ps) / units::kFwhmPerSigma;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, sigma > 0.0 ? sigma : 1.0);

  std::vector<double> a, b;
  a.reserve(photons.size() / 2 + 16);
  b.reserve(photons.size() / 2 + 16);
  auto route = [&](double t) {
    const bool to_a = uniform(split_rng) < chain.split_ratio;
    if (sigma > 0.0) t += jitter(jitter_rng);
    (to_a ? a : b).push_back(t);
  };
  for (double t : photons) route(t);

  std::vector<double> background;
  append_poisson(background, units::per_s_to_per_ns(chain.background_rate), t_end, background_rng);
  for (double t : background) route(t);

  append_poisson(a, units::per_s_to_per_ns(chain.dark_rate), t_end, dark_rng);
  append_poisson(b, units::per_s_to_per_ns(chain.dark_rate), t_end, dark_rng);

  TimestampRecord rec;
  rec.meta.chain = chain;
  rec.meta.seed = seed;
  rec.meta.program.duration_s = duration_s;
  const auto dead = static_cast<std::int64_t>(std::llround(chain.dead_time_ns * rec.meta.ticks_per_ns));
  rec.channel_a = to_ticks(a, t_end, rec.meta.ticks_per_ns);
  rec.channel_b = to_ticks(b, t_end, rec.meta.ticks_per_ns);
  prune_dead_time(rec.channel_a, dead);
  prune_dead_time(rec.channel_b, dead);
  return rec;
}

// Kept emissions between consecutive kept photons, sampled in aggregate.
inline std::uint64_t sample_cw_aggregated(const RateSet& rates, double keep, double t_end,
                                          std::mt19937_64& engine, std::vector<double>& out) {
  const bool three = rates.scheme == Scheme::ThreeLevel;
  const double r23 = three ? rates.r23 : 0.0;
  const double k2 = rates.r21 + r23;
  const double shelve = r23 / k2;
  // A visit to level 2 ends in a kept photon with this probability.
  const double p_stop = (1.0 - shelve) * keep;
  const double p_shelf_given_continue = p_stop < 1.0 ? shelve / (1.0 - p_stop) : 0.0;
  std::geometric_distribution<std::uint64_t> extra_visits(p_stop < 1.0 ? p_stop : 0.5);
  std::uint64_t emitted = 0;
  double t = 0.0;
  while (true) {
    const std::uint64_t visits = p_stop < 1.0 ? 1 + extra_visits(engine) : 1;
    const std::uint64_t shelved =
        visits > 1 && shelve > 0.0
            ? std::binomial_distribution<std::uint64_t>(visits - 1, std::min(1.0, p_shelf_given_continue))(engine)
            : 0;
    const auto v = static_cast<double>(visits);
    double dt = std::gamma_distribution<double>(v, 1.0 / rates.r12)(engine) +
                std::gamma_distribution<double>(v, 1.0 / k2)(engine);
    if (shelved > 0) {
      if (rates.r31 == 0.0) break;  // trapped for good
      dt += std::gamma_distribution<double>(static_cast<double>(shelved), 1.0 / rates.r31)(engine);
    }
    t += dt;
    if (t >= t_end) break;
    emitted += visits - shelved;
    out.push_back(t);
  }
  return emitted;
}

inline std::uint64_t sample_cw_per_transition(const RateSet& rates, double keep, double t_end,
                                              std::uint64_t seed, std::mt19937_64& keep_rng,
                                              std::vector<double>& out) {
  EmitterTrajectory traj(rates, seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::uint64_t emitted = 0;
  while (true) {
    const Transition tr = traj.next();
    if (!(tr.time < t_end)) break;
    if (tr.from == 2 && tr.to == 1) {
      ++emitted;
      if (uniform(keep_rng) < keep) out.push_back(tr.time);
    }
  }
  return emitted;
}

}  // namespace detail

/// Passes emitted photons (ns, ascending) through the detection chain.
inline TimestampRecord apply_detection(const std::vector<double>& emissions, const DetectionChain& chain,
                                       double duration_s, std::uint64_t seed) {
  chain.validate();
  detail::require(std::isfinite(duration_s) && duration_s > 0.0, "apply_detection: duration must be positive");
  auto thin_rng = SeedStreams(seed).engine("thinning");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> kept;
  kept.reserve(static_cast<std::size_t>(static_cast<double>(emissions.size()) * chain.eta_total) + 16);
  for (double t : emissions)
    if (chain.eta_total >= 1.0 || uniform(thin_rng) < chain.eta_total) kept.push_back(t);
  TimestampRecord rec = detail::route_to_detectors(kept, chain, duration_s, seed);
  rec.meta.emitted_photons = emissions.size();
  return rec;
}

/// Continuous-wave excitation at the constant rates `rates`.
inline TimestampRecord simulate_cw(const RateSet& rates, const ExcitationProgram& program,
                                   const DetectionChain& chain, std::uint64_t seed,
                                   const SimulationOptions& options = {}) {
  rates.validate();
  program.validate();
  chain.validate();
  detail::require(program.mode == ExcitationMode::CW, "simulate_cw: program is not CW");
  const double t_end = units::s_to_ns(program.duration_s);
  const double keep = chain.eta_total * rates.quantum_efficiency;
  const double expected =
      program.duration_s * (units::per_ns_to_per_s(detail::expected_cw_emission_rate(rates)) * keep +
                            chain.background_rate + 2.0 * chain.dark_rate);
  detail::check_event_budget(expected, options.max_events);

  const SeedStreams streams(seed);
  std::vector<double> photons;
  photons.reserve(static_cast<std::size_t>(expected * 1.05) + 16);
  std::uint64_t emitted = 0;
  if (rates.r12 > 0.0) {
    if (options.sampling == CwSampling::Aggregated && keep > 0.0) {
      auto rng = streams.engine("emitter");
      emitted = detail::sample_cw_aggregated(rates, keep, t_end, rng, photons);
    } else {
      auto keep_rng = streams.engine("thinning");
      emitted = detail::sample_cw_per_transition(rates, keep, t_end, streams.child("trajectory"), keep_rng,
                                                 photons);
    }
  }
  TimestampRecord rec = detail::route_to_detectors(photons, chain, program.duration_s, seed);
  rec.meta.program = program;
  rec.meta.rates = rates;
  rec.meta.emitted_photons = emitted;
  return rec;
}

/// Pulsed excitation: pulses at k / rep_rate, each promoting a ground-state
/// emitter with probability 1 - exp(-pulse_energy_scale). No excitation
/// happens between pulses.
inline TimestampRecord simulate_pulsed(const RateSet& rates, const ExcitationProgram& program,
                                       const DetectionChain& chain, std::uint64_t seed,
                                       const SimulationOptions& options = {}) {
  rates.validate();
  program.validate();
  chain.validate();
  detail::require(program.mode == ExcitationMode::Pulsed, "simulate_pulsed: program is not pulsed");
  const double t_end = units::s_to_ns(program.duration_s);
  const double period = program.pulse_period_ns();
  const auto pulses = static_cast<std::uint64_t>(std::ceil(t_end / period));
  const double p_exc = program.excitation_probability();
  const double keep = chain.eta_total * rates.quantum_efficiency;
  const double expected = static_cast<double>(pulses) *
                              (p_exc * keep + program.fast_background_per_pulse * chain.eta_total) +
                          program.duration_s * (chain.background_rate + 2.0 * chain.dark_rate);
  detail::check_event_budget(expected, options.max_events);

  const SeedStreams streams(seed);
  auto rng = streams.engine("emitter");
  auto keep_rng = streams.engine("thinning");
  auto fast_rng = streams.engine("fast-background");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  const bool three = rates.scheme == Scheme::ThreeLevel;
  const double r23 = three ? rates.r23 : 0.0;
  const double k2 = rates.r21 + r23;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> photons;
  photons.reserve(static_cast<std::size_t>(expected * 1.05) + 16);
  std::uint64_t emitted = 0;

  int state = 1;
  double t_next = inf;
  auto relax_until = [&](double t_limit) {
    while (state != 1 && t_next <= t_limit) {
      if (state == 2) {
        if (uniform(rng) * k2 < r23) {
          state = 3;
          t_next = rates.r31 > 0.0 ? t_next + std::exponential_distribution<double>(rates.r31)(rng) : inf;
        } else {
          ++emitted;
          if (uniform(keep_rng) < keep) photons.push_back(t_next);
          state = 1;
          t_next = inf;
        }
      } else {
        state = 1;
        t_next = inf;
      }
    }
  };

  std::poisson_distribution<int> fast_count(program.fast_background_per_pulse > 0.0
                                                ? program.fast_background_per_pulse
                                                : 1.0);
  std::exponential_distribution<double> fast_delay(
      program.fast_background_per_pulse > 0.0 ? 1.0 / program.fast_background_lifetime_ns : 1.0);
  std::exponential_distribution<double> decay(k2);

  for (std::uint64_t k = 0; k < pulses; ++k) {
    const double tp = static_cast<double>(k) * period;
    relax_until(tp);
    if (state == 1 && p_exc > 0.0 && uniform(rng) < p_exc) {
      state = 2;
      t_next = tp + decay(rng);
    }
    if (program.fast_background_per_pulse > 0.0) {
      const int n = fast_count(fast_rng);
      for (int i = 0; i < n; ++i) {
        const double t = tp + fast_delay(fast_rng);
        if (uniform(fast_rng) < chain.eta_total) photons.push_back(t);
      }
    }
  }
  relax_until(t_end);

  std::sort(photons.begin(), photons.end());
  TimestampRecord rec = detail::route_to_detectors(photons, chain, program.duration_s, seed);
  rec.meta.program = program;
  rec.meta.rates = rates;
  rec.meta.emitted_photons = emitted;
  return rec;
}

}  // namespace photophys
