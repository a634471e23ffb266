// The same chain as the command-line tool, through the library: simulate
// one CW power, fit its g2, then print what came back.

#include <cstdio>

#include "photophys/pipeline.hpp"

using namespace photophys;

int main() {
  PowerLaw law;
  law.r21_0 = 1.0 / 3.8;  // ns^-1
  law.alpha = 1.0 / 0.311;  // mW^-1

  ExcitationProgram cw;
  cw.power_uw = 311.0;
  cw.duration_s = 1.0;
  DetectionChain chain;
  chain.eta_total = 0.008;

  const RateSet rates = law.rates_at(units::uw_to_mw(cw.power_uw));
  const TimestampRecord rec = simulate_cw(rates, cw, chain, /*seed=*/7);
  std::printf("%zu + %zu detections\n", rec.channel_a.size(), rec.channel_b.size());

  const G2Curve g2 = cross_correlate(rec, 0.154, 100.0);
  const FitResult fit = fit_g2(g2, hbt_irf(chain.jitter_fwhm_ps), Scheme::TwoLevel);
  std::printf("lambda1 = %.3f +- %.3f /ns (true %.3f), g2(0) raw %.2f\n", fit.value("lambda1"),
              fit.error("lambda1"), rates.lambda1(), g2.central_value());
  return fit.converged ? 0 : 2;
}
