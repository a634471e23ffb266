#include <catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "photophys/montecarlo.hpp"
#include "support.hpp"

using namespace photophys;
using Catch::Approx;
namespace pt = photophys::testing;

namespace {

DetectionChain ideal_chain(double eta = 1.0) {
  DetectionChain c;
  c.jitter_fwhm_ps = 0.0;
  c.dead_time_ns = 0.0;
  c.dark_rate = 0.0;
  c.eta_total = eta;
  return c;
}

ExcitationProgram cw(double seconds) {
  ExcitationProgram p;
  p.duration_s = seconds;
  return p;
}

ExcitationProgram pulsed(double rep_mhz, double seconds, double scale = 10.0) {
  ExcitationProgram p;
  p.mode = ExcitationMode::Pulsed;
  p.rep_rate_mhz = rep_mhz;
  p.duration_s = seconds;
  p.pulse_energy_scale = scale;
  return p;
}

std::vector<double> intervals(const std::vector<double>& t) {
  std::vector<double> d;
  for (std::size_t i = 1; i < t.size(); ++i) d.push_back(t[i] - t[i - 1]);
  return d;
}

}  // namespace

TEST_CASE("dwell times are exponential and branching follows the rates", "[montecarlo][property]") {
  const RateSet r = RateSet::three_level(0.8, 0.5, 0.3, 0.05);
  EmitterTrajectory traj(r, 2024);
  std::array<std::vector<double>, 4> dwell;
  std::size_t from2 = 0, to3 = 0;
  while (dwell[3].size() < 100000) {
    const Transition tr = traj.next();
    dwell[tr.from].push_back(tr.dwell);
    if (tr.from == 2) {
      ++from2;
      to3 += tr.to == 3;
    }
  }
  for (int level = 1; level <= 3; ++level) {
    const double k = traj.exit_rate(level);
    std::vector<double> sample(dwell[level].begin(), dwell[level].begin() + 100000);
    const double d = pt::ks_statistic(sample, [k](double x) { return -std::expm1(-k * x); });
    INFO("level " << level);
    CHECK(pt::ks_pvalue(d, sample.size()) > 0.01);
  }
  const double p = r.r23 / (r.r21 + r.r23);
  const double n = static_cast<double>(from2);
  CHECK(std::abs(static_cast<double>(to3) - n * p) < 3.0 * std::sqrt(n * p * (1.0 - p)));
}

TEST_CASE("time in the excited state matches the steady state", "[montecarlo][property]") {
  const RateSet r = RateSet::three_level(0.6, 0.9, 0.02, 0.01);
  EmitterTrajectory traj(r, 7);
  // Batch means over long windows; each window spans many shelving cycles.
  const int batches = 200;
  const double window = 2e5;
  std::vector<double> frac;
  double in2 = 0.0, start = 0.0;
  while (static_cast<int>(frac.size()) < batches) {
    const Transition tr = traj.next();
    const double begin = tr.time - tr.dwell;
    double t0 = begin;
    while (tr.time >= start + window) {
      if (tr.from == 2) in2 += start + window - t0;
      frac.push_back(in2 / window);
      in2 = 0.0;
      start += window;
      t0 = start;
    }
    if (tr.from == 2) in2 += tr.time - t0;
  }
  frac.resize(batches);
  const double m = pt::mean(frac);
  double var = 0.0;
  for (double f : frac) var += (f - m) * (f - m);
  const double sem = std::sqrt(var / (batches - 1) / batches);
  CHECK(std::abs(m - steady_state(r).n2) < 3.0 * sem);
}

TEST_CASE("aggregated sampler matches per-transition sampling", "[montecarlo][property]") {
  const RateSet r = RateSet::three_level(0.7, 0.9, 0.01, 0.004);
  ExcitationProgram prog = cw(2e-3);
  DetectionChain chain = ideal_chain(0.05);
  SimulationOptions per;
  per.sampling = CwSampling::PerTransition;
  const TimestampRecord fast = simulate_cw(r, prog, chain, 1);
  const TimestampRecord slow = simulate_cw(r, prog, chain, 2, per);

  auto merged_ns = [](const TimestampRecord& rec) {
    std::vector<double> t;
    for (int c = 0; c < 2; ++c)
      for (auto k : rec.channel(c)) t.push_back(rec.to_ns(k));
    std::sort(t.begin(), t.end());
    return t;
  };
  const auto a = intervals(merged_ns(fast));
  const auto b = intervals(merged_ns(slow));
  const auto [d, n_eff] = pt::ks_two_sample(a, b);
  CHECK(pt::ks_pvalue(d, static_cast<std::size_t>(n_eff)) > 0.01);

  const double expected = units::per_ns_to_per_s(r.r21 * steady_state(r).n2) * 0.05 * prog.duration_s;
  for (const TimestampRecord* rec : {&fast, &slow}) {
    // Shelving makes the count super-Poissonian; allow a generous band.
    CHECK(static_cast<double>(rec->total_events()) == Approx(expected).epsilon(0.05));
  }
  CHECK(static_cast<double>(fast.meta.emitted_photons) == Approx(expected / 0.05).epsilon(0.05));
}

TEST_CASE("no excitation leaves only dark counts", "[montecarlo]") {
  RateSet r = RateSet::three_level(0.0, 0.9, 0.001, 0.006);
  DetectionChain chain;
  chain.dark_rate = 1000.0;
  const TimestampRecord rec = simulate_cw(r, cw(1.0), chain, 3);
  CHECK(rec.meta.emitted_photons == 0);
  for (int c = 0; c < 2; ++c) CHECK(std::abs(static_cast<double>(rec.channel(c).size()) - 1000.0) < 3.0 * std::sqrt(1000.0));

  chain.dark_rate = 0.0;
  CHECK(simulate_cw(r, cw(1.0), chain, 3).total_events() == 0);

  const TimestampRecord off = simulate_pulsed(RateSet::two_level(1.0, 0.07), pulsed(20.0, 0.1, 0.0), chain, 4);
  CHECK(off.total_events() == 0);
  CHECK(off.meta.emitted_photons == 0);
}

TEST_CASE("saturated two-level emitter radiates at r21", "[montecarlo]") {
  const double r21 = 0.25;
  const RateSet r = RateSet::two_level(1e5 * r21, r21);
  const TimestampRecord rec = simulate_cw(r, cw(1e-3), ideal_chain(), 5);
  const double expected = units::per_ns_to_per_s(r21) * 1e-3;
  CHECK(std::abs(static_cast<double>(rec.meta.emitted_photons) - expected) < 3.0 * std::sqrt(expected));
  // Only photons landing in the same picosecond tick of one channel merge.
  CHECK(static_cast<double>(rec.total_events()) >= 0.999 * static_cast<double>(rec.meta.emitted_photons));
}

TEST_CASE("identity detection chain partitions the input", "[montecarlo][detection]") {
  std::vector<double> in;
  for (int i = 0; i < 1000; ++i) in.push_back(10.0 + 7.0 * i);
  const TimestampRecord rec = apply_detection(in, ideal_chain(), 1e-3, 9);
  std::vector<std::int64_t> all(rec.channel_a);
  all.insert(all.end(), rec.channel_b.begin(), rec.channel_b.end());
  std::sort(all.begin(), all.end());
  REQUIRE(all.size() == in.size());
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(all[i] == static_cast<std::int64_t>(std::llround(in[i] * 1e3)));
  CHECK(!rec.channel_a.empty());
  CHECK(!rec.channel_b.empty());
  CHECK(rec.meta.emitted_photons == in.size());
}

TEST_CASE("dead time drops the later of two close events", "[montecarlo][detection]") {
  DetectionChain c = ideal_chain();
  c.dead_time_ns = 50.0;
  c.split_ratio = 1.0 - 1e-15;
  const TimestampRecord rec = apply_detection({100.0, 110.0, 151.0}, c, 1e-6, 1);
  REQUIRE(rec.channel_a.size() == 2);
  CHECK(rec.channel_a[0] == 100000);
  CHECK(rec.channel_a[1] == 151000);
  CHECK(rec.channel_b.empty());
  CHECK_NOTHROW(rec.validate());
}

TEST_CASE("dark counts are Poisson", "[montecarlo][detection]") {
  DetectionChain c;
  c.dark_rate = 150.0;
  const TimestampRecord rec = apply_detection({}, c, 10.0, 21);
  for (int ch = 0; ch < 2; ++ch) CHECK(std::abs(static_cast<double>(rec.channel(ch).size()) - 1500.0) < 3.0 * std::sqrt(1500.0));
  CHECK(rec.channel_a != rec.channel_b);
}

TEST_CASE("background is split, jittered and counted", "[montecarlo][detection]") {
  DetectionChain c;
  c.dark_rate = 0.0;
  c.background_rate = 2e4;
  const TimestampRecord rec = apply_detection({}, c, 1.0, 4);
  CHECK(std::abs(static_cast<double>(rec.total_events()) - 2e4) < 3.0 * std::sqrt(2e4) + 2e4 * 2e4 * 50e-9);
  CHECK(static_cast<double>(rec.channel_a.size()) == Approx(1e4).epsilon(0.05));
}

TEST_CASE("simulated records satisfy their invariants", "[montecarlo]") {
  const RateSet r = RateSet::three_level(0.9, 0.9, 0.00089, 0.0062);
  DetectionChain chain;
  chain.eta_total = 0.2;  // dense enough that dead time matters
  const TimestampRecord rec = simulate_cw(r, cw(5e-3), chain, 8);
  CHECK_NOTHROW(rec.validate());
  for (int c = 0; c < 2; ++c) {
    CHECK(rec.channel(c).front() >= 0);
    CHECK(rec.channel(c).back() < 5'000'000'000);
  }
  // Dead time costs about two thirds of the counts at this rate. The
  // non-paralyzable formula is only a guide: bunched light loses more.
  const double raw = units::per_ns_to_per_s(r.r21 * steady_state(r).n2) * 0.2 / 2.0;
  const double poisson = raw / (1.0 + raw * 50e-9);
  CHECK(rec.count_rate(0) < poisson);
  CHECK(rec.count_rate(0) > 0.9 * poisson);
}

TEST_CASE("simulation is deterministic in the seed", "[montecarlo]") {
  const RateSet r = RateSet::three_level(0.9, 0.9, 0.00089, 0.0062);
  const DetectionChain chain;
  const TimestampRecord a = simulate_cw(r, cw(0.05), chain, 42);
  const TimestampRecord b = simulate_cw(r, cw(0.05), chain, 42);
  const TimestampRecord c = simulate_cw(r, cw(0.05), chain, 43);
  CHECK(a == b);
  CHECK(a.meta.emitted_photons == b.meta.emitted_photons);
  CHECK_FALSE(a == c);
  CHECK(simulate_pulsed(r, pulsed(20.0, 0.01), chain, 42) == simulate_pulsed(r, pulsed(20.0, 0.01), chain, 42));
}

TEST_CASE("oversized runs are refused", "[montecarlo]") {
  const RateSet r = RateSet::two_level(1.0, 1.0);
  SimulationOptions small;
  small.max_events = 1000;
  CHECK_THROWS_AS(simulate_cw(r, cw(1.0), DetectionChain{}, 1, small), SizingError);
  CHECK_THROWS_AS(simulate_pulsed(r, pulsed(80.0, 1.0), DetectionChain{}, 1, small), SizingError);
  try {
    simulate_cw(r, cw(1.0), DetectionChain{}, 1, small);
  } catch (const SizingError& e) {
    CHECK(e.expected_events() > 1000.0);
  }
}

TEST_CASE("invalid inputs are rejected", "[montecarlo]") {
  const RateSet r = RateSet::two_level(1.0, 1.0);
  DetectionChain bad;
  bad.split_ratio = 1.0;
  CHECK_THROWS_AS(simulate_cw(r, cw(1.0), bad, 1), std::domain_error);
  CHECK_THROWS_AS(simulate_cw(r, cw(0.0), DetectionChain{}, 1), std::domain_error);
  CHECK_THROWS_AS(simulate_cw(r, pulsed(20.0, 1.0), DetectionChain{}, 1), std::domain_error);
  CHECK_THROWS_AS(simulate_pulsed(r, cw(1.0), DetectionChain{}, 1), std::domain_error);
  CHECK_THROWS_AS(simulate_pulsed(r, pulsed(0.0, 1.0), DetectionChain{}, 1), std::domain_error);
}

TEST_CASE("pulsed efficiency equals the detected fraction per pulse", "[montecarlo][pulsed]") {
  // 764 nm-like emitter, 14.2 ns lifetime, 10 MHz, saturated pulses.
  const RateSet r = RateSet::two_level(1.0, 1.0 / 14.2);
  DetectionChain chain;
  chain.eta_total = 0.015;
  const TimestampRecord rec = simulate_pulsed(r, pulsed(10.0, 0.5), chain, 77);
  const double phi = static_cast<double>(rec.total_events()) / 0.5;
  CHECK(phi == Approx(1.5e5).epsilon(0.02));
  CHECK(phi / 10e6 == Approx(0.015).epsilon(0.02));
  CHECK_NOTHROW(rec.validate());
}

TEST_CASE("pulsed photons follow the pulse train", "[montecarlo][pulsed]") {
  const RateSet r = RateSet::two_level(1.0, 1.0 / 4.0);
  DetectionChain chain = ideal_chain(0.3);
  ExcitationProgram prog = pulsed(20.0, 0.02);
  prog.fast_background_per_pulse = 0.0;
  const TimestampRecord rec = simulate_pulsed(r, prog, chain, 5);
  // With no jitter the delay after each pulse is the bare exponential decay.
  std::vector<double> delay;
  for (int c = 0; c < 2; ++c)
    for (auto k : rec.channel(c)) delay.push_back(std::fmod(rec.to_ns(k), prog.pulse_period_ns()));
  const double d = pt::ks_statistic(delay, [](double t) { return -std::expm1(-t / 4.0) / -std::expm1(-50.0 / 4.0); });
  CHECK(pt::ks_pvalue(d, delay.size()) > 0.01);

  // Partial pumping scales the number of excitations.
  const TimestampRecord weak = simulate_pulsed(r, pulsed(20.0, 0.02, 0.5), chain, 5);
  const double pulses = 20e6 * 0.02;
  CHECK(static_cast<double>(weak.meta.emitted_photons) ==
        Approx(pulses * -std::expm1(-0.5)).margin(4.0 * std::sqrt(pulses * 0.4)));
}

TEST_CASE("fast crystal background adds prompt counts", "[montecarlo][pulsed]") {
  const RateSet r = RateSet::two_level(1.0, 1.0 / 13.0);
  DetectionChain chain = ideal_chain(0.02);
  ExcitationProgram prog = pulsed(20.0, 0.05);
  const TimestampRecord clean = simulate_pulsed(r, prog, chain, 6);
  prog.fast_background_per_pulse = 0.5;
  const TimestampRecord noisy = simulate_pulsed(r, prog, chain, 6);
  const double extra = static_cast<double>(noisy.total_events()) - static_cast<double>(clean.total_events());
  const double expected = 20e6 * 0.05 * 0.5 * 0.02;
  CHECK(extra == Approx(expected).epsilon(0.1));
}
