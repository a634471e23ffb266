#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "photophys/fitting.hpp"
#include "photophys/montecarlo.hpp"

using namespace photophys;
using Catch::Approx;

namespace {

std::vector<double> centers(double bw, int half) {
  std::vector<double> c;
  for (int i = -half; i <= half; ++i) c.push_back(i * bw);
  return c;
}

// Noise-free curve built with the same convolution the fit uses.
G2Curve model_curve(const std::function<double(double)>& g2, const Irf& irf, double bw, int half,
                    double rel_err = 0.01) {
  G2Curve c;
  c.bin_width = bw;
  c.bin_centers = centers(bw, half);
  c.values = convolve_model(g2, irf, c.bin_centers, G2FitOptions{}.convolution).values;
  for (double v : c.values) c.errors.push_back(rel_err * std::max(v, 0.05));
  c.coincidences.assign(c.size(), 0.0);
  return c;
}

// Worst column-wise relative mismatch between the analytic Jacobian and
// central differences.
double jacobian_mismatch(const LsqProblem& p, const Eigen::VectorXd& x) {
  Eigen::VectorXd r, rp, rm;
  Eigen::MatrixXd J;
  p.eval(x, r, &J);
  double worst = 0.0;
  for (int j = 0; j < p.n_params; ++j) {
    const double h = 1e-5 * std::max(1.0, std::abs(x(j)));
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    p.eval(xp, rp, nullptr);
    p.eval(xm, rm, nullptr);
    const Eigen::VectorXd fd = (rp - rm) / (2.0 * h);
    const double scale = J.col(j).cwiseAbs().maxCoeff();
    if (scale == 0.0) continue;
    worst = std::max(worst, (fd - J.col(j)).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

// 744 nm-like two-level law and 749 nm-like three-level law.
PowerLaw law_744() {
  PowerLaw law;
  law.r21_0 = 1.0 / 3.8;
  law.alpha = 1.0 / 0.311;
  return law;
}

PowerLaw law_749() {
  PowerLaw law;
  law.scheme = Scheme::ThreeLevel;
  law.r21_0 = 1.0 / 1.1;
  law.alpha = 2.5;
  law.r31_0 = units::mhz_to_per_ns(6.2);
  law.r23 = units::mhz_to_per_ns(0.89);
  law.beta = 3.1;
  return law;
}

PowerSeries series_from(const PowerLaw& law, std::vector<double> powers_uw, double rel_err) {
  PowerSeries s;
  const detail::Lambda2Model m{law.r21_0, law.effective_pump_slope()};
  Eigen::VectorXd x(3);
  x << std::log(std::max(law.r31_0, 1e-300)), law.beta, law.r23;
  for (double p : powers_uw) {
    PowerPoint e;
    e.p_uw = p;
    const double pm = units::uw_to_mw(p);
    e.lambda1 = lambda1_of_power(pm, law);
    e.lambda1_err = rel_err * e.lambda1;
    if (law.scheme == Scheme::ThreeLevel) {
      double v;
      Eigen::RowVector3d d;
      m.lambda2(x, pm, v, d);
      e.lambda2 = v;
      e.lambda2_err = rel_err * v;
      m.bunching(x, pm, v, d);
      e.a = v;
      e.a_err = rel_err * std::max(v, 1e-3);
    }
    s.entries.push_back(e);
  }
  return s;
}

DecayCurve exponential_decay(double tau, double amp, double base, double bw, double period) {
  DecayCurve d;
  d.bin_width = bw;
  d.rep_rate_mhz = 1e3 / period;
  for (double t = 0.5 * bw; t < period - 2.0; t += bw) {
    d.bin_centers.push_back(t);
    d.counts.push_back(amp * std::exp(-t / tau) + base);
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Jacobians

TEST_CASE("analytic Jacobians match central differences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double tol = 1e-6;

  SECTION("g2, both schemes, Gaussian IRF") {
    const auto c = centers(0.154, 200);
    auto plan = std::make_shared<const ConvolutionPlan>(c, hbt_irf(350.0), G2FitOptions{}.convolution);
    std::vector<double> values(c.size()), sigma(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      values[i] = g2_three_level(c[i], 1.0, 0.02, 0.1);
      sigma[i] = 0.01 + 0.02 * u(rng);
    }
    for (int trial = 0; trial < 10; ++trial) {
      Eigen::VectorXd x2(3), x3(5);
      const double l1 = 0.5 + 1.5 * u(rng);
      x2 << std::log(l1), 0.8 + 0.4 * u(rng), 0.2 * u(rng) - 0.1;
      x3 << std::log(l1), std::log(0.005 + 0.05 * u(rng)), 0.3 * u(rng), 0.8 + 0.4 * u(rng), 0.2 * u(rng) - 0.1;
      CHECK(jacobian_mismatch(detail::g2_problem(plan, Scheme::TwoLevel, values, sigma), x2) < tol);
      CHECK(jacobian_mismatch(detail::g2_problem(plan, Scheme::ThreeLevel, values, sigma), x3) < tol);
    }
  }

  SECTION("lambda2 power law with bunching rows") {
    std::vector<detail::Lambda2Row> rows;
    for (double p : {0.1, 0.3, 0.6, 1.0}) {
      rows.push_back({p, 0.02, 0.002, false});
      rows.push_back({p, 0.05, 0.005, true});
    }
    const auto prob = detail::lambda2_problem(rows, {0.9, 2.25});
    for (int trial = 0; trial < 10; ++trial) {
      Eigen::VectorXd x(3);
      x << std::log(0.002 + 0.01 * u(rng)), 5.0 * u(rng), 0.003 * u(rng);
      CHECK(jacobian_mismatch(prob, x) < tol);
    }
  }

  SECTION("saturation") {
    std::vector<SaturationPoint> pts;
    for (double p : {20.0, 50.0, 100.0, 300.0, 800.0}) pts.push_back({p, 1e6, 0.0});
    const auto prob = detail::saturation_problem(pts, std::vector<double>(pts.size(), 3e4));
    for (int trial = 0; trial < 10; ++trial) {
      Eigen::VectorXd x(2);
      x << std::log(1e6 + 2e6 * u(rng)), std::log(20.0 + 400.0 * u(rng));
      CHECK(jacobian_mismatch(prob, x) < tol);
    }
  }

  SECTION("lifetime") {
    std::vector<double> t, y;
    for (int i = 0; i < 300; ++i) {
      t.push_back(0.1 * i);
      y.push_back(1000.0 * std::exp(-0.1 * i / 4.0) + 10.0);
    }
    auto sigma = std::make_shared<std::vector<double>>(t.size(), 5.0);
    const auto prob = detail::lifetime_problem(t, y, sigma);
    for (int trial = 0; trial < 10; ++trial) {
      Eigen::VectorXd x(3);
      x << std::log(1.0 + 10.0 * u(rng)), 500.0 + 1000.0 * u(rng), 20.0 * u(rng);
      CHECK(jacobian_mismatch(prob, x) < tol);
    }
  }
}

// ---------------------------------------------------------------------------
// g2 fits

TEST_CASE("noise-free two-level g2 with a delta IRF") {
  const double l1 = 0.62;
  const G2Curve c = model_curve([&](double t) { return g2_two_level(t, l1); }, Irf::delta(), 0.154, 300);
  const FitResult f = fit_g2(c, Irf::delta(), Scheme::TwoLevel);
  REQUIRE(f.converged);
  CHECK(f.value("lambda1") == Approx(l1).epsilon(1e-6));
  CHECK(f.value("amplitude") == Approx(1.0).epsilon(1e-6));
  CHECK(std::abs(f.value("offset")) < 1e-6);
  CHECK(f.chi2_dof < 1e-12);
  CHECK(f.params.size() == 3);
  CHECK(f.covariance.rows() == 3);
}

TEST_CASE("noise-free three-level g2 with the HBT IRF") {
  const G2Parameters truth = exact_g2_parameters(law_749().rates_at(0.4));
  const Irf irf = hbt_irf(350.0);
  const G2Curve c = model_curve(
      [&](double t) { return 0.97 * g2_three_level(t, truth.lambda1, truth.lambda2, truth.a) + 0.02; }, irf, 0.154,
      4000);
  const FitResult f = fit_g2(c, irf, Scheme::ThreeLevel);
  REQUIRE(f.converged);
  CHECK(f.value("lambda1") == Approx(truth.lambda1).epsilon(1e-6));
  CHECK(f.value("lambda2") == Approx(truth.lambda2).epsilon(1e-6));
  CHECK(f.value("a") == Approx(truth.a).epsilon(1e-6));
  CHECK(f.value("amplitude") == Approx(0.97).epsilon(1e-6));
  CHECK(f.value("offset") == Approx(0.02).epsilon(1e-6));
  CHECK_FALSE(f.flagged("degenerate"));
  CHECK(f.derived.at("g2_zero_model") > 0.02);
}

TEST_CASE("delta IRF and a Gaussian IRF of bin/100 agree") {
  const double l1 = 0.9;
  const double bw = 0.154;
  const G2Curve c = model_curve([&](double t) { return g2_two_level(t, l1); }, Irf::delta(), bw, 300);
  const FitResult fd = fit_g2(c, Irf::delta(), Scheme::TwoLevel);
  const FitResult fg = fit_g2(c, Irf::gaussian(units::ns_to_ps(bw) / 100.0), Scheme::TwoLevel);
  REQUIRE(fd.converged);
  REQUIRE(fg.converged);
  CHECK(std::abs(fg.value("lambda1") / fd.value("lambda1") - 1.0) < 1e-3);
}

TEST_CASE("g2 fit input checks and flags") {
  G2Curve tiny;
  tiny.bin_centers = centers(0.154, 10);
  tiny.values.assign(21, 1.0);
  tiny.errors.assign(21, 0.1);
  tiny.coincidences.assign(21, 100.0);
  CHECK_THROWS_AS(fit_g2(tiny, Irf::delta(), Scheme::TwoLevel), std::invalid_argument);

  // Short span relative to 1/lambda1 is reported.
  const G2Curve c = model_curve([](double t) { return g2_two_level(t, 0.05); }, Irf::delta(), 0.154, 100);
  const FitResult f = fit_g2(c, Irf::delta(), Scheme::TwoLevel);
  CHECK_FALSE(f.warnings.empty());
}

TEST_CASE("iteration cap gives a non-converged g2 result") {
  const G2Curve c = model_curve([](double t) { return g2_two_level(t, 0.7); }, Irf::delta(), 0.154, 200);
  G2FitOptions opt;
  opt.lm.max_iterations = 1;
  opt.init = G2Guess{5.0, 0.01, 0.0, 2.0, 0.3};
  FitResult f;
  REQUIRE_NOTHROW(f = fit_g2(c, Irf::delta(), Scheme::TwoLevel, opt));
  CHECK_FALSE(f.converged);
  CHECK(f.flagged("not_converged"));
}

TEST_CASE("simulated two-level data: lambda1 and a model-selection check") {
  const PowerLaw law = law_744();
  const double p_mw = 0.1 * 0.311;
  const RateSet rates = law.rates_at(p_mw);
  ExcitationProgram prog;
  prog.power_uw = units::mw_to_uw(p_mw);
  prog.duration_s = 5.0;
  DetectionChain chain;
  chain.eta_total = 0.05;
  const TimestampRecord rec = simulate_cw(rates, prog, chain, 2024);
  const G2Curve curve = cross_correlate(rec, 0.154, 60.0);
  const Irf irf = hbt_irf(chain.jitter_fwhm_ps);

  const FitResult two = fit_g2(curve, irf, Scheme::TwoLevel);
  REQUIRE(two.converged);
  CHECK(two.value("lambda1") == Approx(rates.lambda1()).epsilon(0.10));

  const FitResult three = fit_g2(curve, irf, Scheme::ThreeLevel);
  REQUIRE(three.converged);
  INFO("a = " << three.value("a") << " +- " << three.error("a"));
  REQUIRE(std::isfinite(three.error("a")));
  CHECK(std::abs(three.value("a")) < 2.0 * three.error("a"));
}

// ---------------------------------------------------------------------------
// Power laws

TEST_CASE("lambda1 extrapolation") {
  SECTION("noise-free 744 nm-like series") {
    const PowerLaw law = law_744();
    const FitResult f = extrapolate_lambda1(series_from(law, {30, 80, 150, 300, 600}, 0.01));
    CHECK(f.value("r21_0") == Approx(law.r21_0).epsilon(1e-9));
    CHECK(f.value("alpha") == Approx(law.alpha).epsilon(1e-9));
    CHECK(f.derived.at("tau21") == Approx(3.8).epsilon(1e-9));
    CHECK(f.derived.at("p_sat_uw") == Approx(311.0).epsilon(1e-9));
    CHECK(f.chi2 < 1e-18);
  }
  SECTION("749 nm-like series") {
    const FitResult f = extrapolate_lambda1(series_from(law_749(), {100, 200, 400, 700, 1000}, 0.02));
    CHECK(f.derived.at("tau21") == Approx(1.1).epsilon(1e-9));
    CHECK(f.value("alpha") == Approx(2.5).epsilon(1e-9));
  }
  SECTION("constant series") {
    PowerSeries s;
    for (double p : {10.0, 20.0, 40.0}) s.entries.push_back({p, 0.3, 0.01, {}, 0.0, {}, 0.0});
    const FitResult f = extrapolate_lambda1(s);
    CHECK(f.value("r21_0") == Approx(0.3).epsilon(1e-12));
    CHECK(std::abs(f.value("alpha")) < 1e-12);
  }
  SECTION("errors") {
    PowerSeries s;
    s.entries = {{10.0, 0.3, 0.01, {}, 0.0, {}, 0.0}, {20.0, 0.31, 0.01, {}, 0.0, {}, 0.0}};
    CHECK_THROWS_AS(extrapolate_lambda1(s), std::invalid_argument);
    s.entries.push_back({20.0, 0.32, 0.01, {}, 0.0, {}, 0.0});
    CHECK_THROWS(extrapolate_lambda1(s));
  }
  SECTION("unweighted series rescale the covariance") {
    PowerSeries s;
    for (double p : {10.0, 20.0, 40.0, 80.0}) s.entries.push_back({p, 0.3 + 0.001 * p + (p == 20.0 ? 0.01 : 0.0), 0.0, {}, 0.0, {}, 0.0});
    const FitResult f = extrapolate_lambda1(s);
    CHECK(f.error("r21_0") > 0.0);
    CHECK_FALSE(f.warnings.empty());
  }
}

TEST_CASE("lambda2 extrapolation") {
  const PowerLaw law = law_749();
  const std::vector<double> powers{100, 200, 400, 700, 1000};
  const FitResult l1 = extrapolate_lambda1(series_from(law, powers, 0.01));

  SECTION("noise-free recovery, with and without bunching amplitudes") {
    for (bool use_a : {true, false}) {
      Lambda2Options opt;
      opt.use_bunching = use_a;
      const FitResult f = extrapolate_lambda2(series_from(law, powers, 0.05), l1, opt);
      INFO("use_bunching = " << use_a);
      REQUIRE(f.converged);
      CHECK(f.derived.at("r31_0_mhz") == Approx(6.2).epsilon(1e-6));
      CHECK(f.derived.at("r23_mhz") == Approx(0.89).epsilon(1e-6));
      CHECK(f.value("beta") == Approx(3.1).epsilon(1e-6));
      CHECK(f.derived.at("shelving_ratio") == Approx(0.89 / 6.2).epsilon(1e-6));
      CHECK(f.derived.at("used_bunching") == (use_a ? 1.0 : 0.0));
    }
  }

  SECTION("no shelving and no power dependence give a constant lambda2") {
    PowerLaw flat = law;
    flat.beta = 0.0;
    flat.r23 = 0.0;
    const FitResult f = extrapolate_lambda2(series_from(flat, powers, 0.05), l1, {false, {}});
    REQUIRE(f.converged);
    CHECK(f.value("r31_0") == Approx(flat.r31_0).epsilon(1e-6));
    CHECK(std::abs(f.value("beta")) < 1e-6);
    CHECK(std::abs(f.value("r23")) < 1e-6 * flat.r31_0);
  }

  SECTION("series without lambda2 is rejected") {
    CHECK_THROWS_AS(extrapolate_lambda2(series_from(law_744(), powers, 0.05), l1), std::invalid_argument);
  }

  SECTION("10% noise: r31_0 within 2 sigma in at least 90% of draws") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> n01;
    int covered = 0;
    const int draws = 100;
    for (int k = 0; k < draws; ++k) {
      PowerSeries s = series_from(law, powers, 0.10);
      for (auto& e : s.entries) {
        *e.lambda2 *= 1.0 + 0.10 * n01(rng);
        e.lambda2_err = 0.10 * *e.lambda2;
        *e.a *= 1.0 + 0.10 * n01(rng);
        e.a_err = 0.10 * *e.a;
      }
      const FitResult f = extrapolate_lambda2(s, l1);
      if (f.converged && std::abs(f.value("r31_0") - law.r31_0) <= 2.0 * f.error("r31_0")) ++covered;
    }
    CHECK(covered >= 90);
  }
}

TEST_CASE("power law assembled from the extrapolations") {
  const PowerLaw law = law_749();
  const std::vector<double> powers{100, 200, 400, 700, 1000};
  const FitResult l1 = extrapolate_lambda1(series_from(law, powers, 0.01));
  const FitResult l2 = extrapolate_lambda2(series_from(law, powers, 0.05), l1);
  const PowerLaw fitted = power_law_from_fits(l1, &l2);
  CHECK(fitted.scheme == Scheme::ThreeLevel);
  CHECK(fitted.r21_0 == Approx(law.r21_0).epsilon(1e-9));
  CHECK(fitted.r31_0 == Approx(law.r31_0).epsilon(1e-6));
  CHECK(fitted.effective_pump_slope() == Approx(law.effective_pump_slope()).epsilon(1e-9));
  CHECK(power_law_from_fits(l1, nullptr).scheme == Scheme::TwoLevel);
}

// ---------------------------------------------------------------------------
// Saturation and quantum efficiency

TEST_CASE("saturation fits") {
  const std::vector<double> powers{20, 50, 100, 200, 400, 700, 1000, 1500};
  struct Case {
    double phi_inf, p_sat;
  };
  for (const Case c : {Case{2.1e6, 311.0}, Case{1.3e6, 40.0}}) {
    INFO("P_sat = " << c.p_sat);
    const SaturationModel m{c.phi_inf, c.p_sat};
    std::vector<SaturationPoint> pts;
    for (double p : powers) pts.push_back({p, saturation_rate(p, m), 0.03 * saturation_rate(p, m)});
    const FitResult f = fit_saturation(pts);
    REQUIRE(f.converged);
    CHECK(f.value("phi_inf") == Approx(c.phi_inf).epsilon(1e-6));
    CHECK(f.value("p_sat") == Approx(c.p_sat).epsilon(1e-6));
    CHECK_FALSE(f.flagged("ill_conditioned"));
  }

  SECTION("3% multiplicative noise") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    const SaturationModel m{2.1e6, 311.0};
    std::vector<SaturationPoint> pts;
    for (double p : powers) {
      const double v = saturation_rate(p, m) * (1.0 + 0.03 * n01(rng));
      pts.push_back({p, v, 0.03 * v});
    }
    const FitResult f = fit_saturation(pts);
    CHECK(f.value("phi_inf") == Approx(2.1e6).epsilon(0.05));
    CHECK(f.value("p_sat") == Approx(311.0).epsilon(0.05));
  }

  SECTION("1 sigma coverage lies in the Gaussian band") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n01;
    const SaturationModel m{1.3e6, 40.0};
    const int draws = 400;
    int cover_phi = 0, cover_p = 0;
    for (int k = 0; k < draws; ++k) {
      std::vector<SaturationPoint> pts;
      for (double p : powers) {
        const double truth = saturation_rate(p, m);
        pts.push_back({p, truth * (1.0 + 0.03 * n01(rng)), 0.03 * truth});
      }
      const FitResult f = fit_saturation(pts);
      cover_phi += std::abs(f.value("phi_inf") - m.phi_inf) <= f.error("phi_inf");
      cover_p += std::abs(f.value("p_sat") - m.p_sat) <= f.error("p_sat");
    }
    CHECK(cover_phi >= 0.60 * draws);
    CHECK(cover_phi <= 0.75 * draws);
    CHECK(cover_p >= 0.60 * draws);
    CHECK(cover_p <= 0.75 * draws);
  }

  SECTION("far above saturation the rate approaches phi_inf") {
    CHECK(saturation_rate(1e9, {2.1e6, 311.0}) == Approx(2.1e6).epsilon(1e-6));
  }

  SECTION("all points well below saturation are flagged") {
    std::vector<SaturationPoint> pts;
    for (double p : {1.0, 2.0, 4.0, 8.0}) pts.push_back({p, saturation_rate(p, {2.1e6, 311.0}), 100.0});
    CHECK(fit_saturation(pts).flagged("ill_conditioned"));
  }

  SECTION("input checks") {
    CHECK_THROWS_AS(fit_saturation({{1.0, 1.0, 0.0}, {2.0, 2.0, 0.0}}), std::invalid_argument);
    CHECK_THROWS(fit_saturation({{-1.0, 1.0, 0.0}, {2.0, 2.0, 0.0}, {3.0, 3.0, 0.0}}));
  }
}

TEST_CASE("quantum efficiency with rates and eta fixed") {
  const PowerLaw law = law_749();
  const double eta = 0.013;
  std::vector<SaturationPoint> pts;
  for (double p : {50.0, 150.0, 400.0, 800.0, 1500.0}) {
    const double v = three_level_count_rate(law.rates_at(units::uw_to_mw(p)), eta, 0.24);
    pts.push_back({p, v, 0.02 * v});
  }
  const FitResult f = fit_quantum_efficiency(pts, law, eta);
  CHECK(f.value("eta_qe") == Approx(0.24).epsilon(1e-9));
  CHECK(f.error("eta_qe") > 0.0);
  CHECK_FALSE(f.flagged("unphysical"));
  CHECK_THROWS(fit_quantum_efficiency(pts, law_744(), eta));
}

// ---------------------------------------------------------------------------
// Lifetimes

TEST_CASE("lifetime fits") {
  SECTION("noise-free exponential") {
    for (double tau : {14.2, 4.1, 1.4}) {
      INFO("tau = " << tau);
      const DecayCurve d = exponential_decay(tau, 5e4, 20.0, 0.05, 100.0);
      const FitResult f = fit_lifetime(d);
      REQUIRE(f.converged);
      CHECK(f.value("tau") == Approx(tau).epsilon(1e-6));
      CHECK(f.value("baseline") == Approx(20.0).epsilon(1e-6));
      CHECK(f.value("amplitude") == Approx(5e4 * std::exp(-0.5 / tau)).epsilon(1e-6));
      CHECK_FALSE(f.flagged("no_decay"));
      CHECK_FALSE(f.flagged("low_statistics"));
    }
  }
  SECTION("flat baseline is flagged") {
    const DecayCurve d = exponential_decay(4.0, 0.0, 100.0, 0.1, 50.0);
    const FitResult f = fit_lifetime(d);
    CHECK((f.flagged("no_decay") || !f.converged));
  }
  SECTION("few counts are flagged") {
    const DecayCurve d = exponential_decay(4.0, 10.0, 0.0, 0.5, 50.0);
    CHECK(fit_lifetime(d).flagged("low_statistics"));
  }
  SECTION("a curve without bins beyond t_min is rejected") {
    DecayCurve d = exponential_decay(4.0, 10.0, 0.0, 0.1, 2.45);
    LifetimeOptions opt;
    opt.t_min = 10.0;
    CHECK_THROWS_AS(fit_lifetime(d, opt), std::invalid_argument);
  }
}

// ---------------------------------------------------------------------------
// Efficiencies

TEST_CASE("collection efficiencies") {
  CHECK(collection_efficiency_pulsed(1.5e5, 10.0).value == Approx(0.015).epsilon(1e-12));
  CHECK(collection_efficiency_pulsed(1.5e5, 10.0).warnings.empty());
  CHECK(collection_efficiency_pulsed(0.0, 10.0).value == 0.0);
  CHECK_FALSE(collection_efficiency_pulsed(1e5, 40.0).warnings.empty());  // 25 ns period < dead time
  PulsedConditions slow;
  slow.lifetime_ns = 200.0;
  CHECK_FALSE(collection_efficiency_pulsed(1e5, 10.0, slow).warnings.empty());
  PulsedConditions weak;
  weak.above_saturation = false;
  CHECK_FALSE(collection_efficiency_pulsed(1e5, 10.0, weak).warnings.empty());
  CHECK_THROWS(collection_efficiency_pulsed(1e5, 0.0));

  const double e764 = collection_efficiency_cw(1.3e6, 1.0 / 13.0);
  const double e744 = collection_efficiency_cw(2.1e6, 1.0 / 3.8);
  CHECK(e764 == Approx(0.0169).epsilon(1e-12));
  CHECK(e744 == Approx(0.00798).epsilon(1e-12));
  CHECK(std::round(e744 * 1e4) / 1e4 == Approx(0.0080));
  CHECK(0.5 * (e764 + e744) == Approx(0.013).margin(0.001));
  CHECK(collection_efficiency_cw(1e9, 1.0) == Approx(1.0).epsilon(1e-15));
}

TEST_CASE("dead-time and signal-rate helpers") {
  CHECK(dead_time_corrected_rate(0.0, 50.0) == 0.0);
  CHECK(dead_time_corrected_rate(1e6, 50.0) == Approx(1e6 / 0.95).epsilon(1e-12));
  CHECK_THROWS(dead_time_corrected_rate(3e7, 50.0));
  CHECK(signal_rate(1e5, 1e5, 0.0, 150.0, 1000.0) == Approx(2e5 - 300.0 - 1000.0).epsilon(1e-12));
}
