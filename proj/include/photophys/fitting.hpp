#pragma once

// Least-squares inversion of the measurements: g2 curves, decay-rate power
// laws, saturation curves, pulsed lifetimes and efficiencies.
//
// Rates are fitted in log space so that they stay positive; amplitudes,
// offsets and the bunching amplitude are fitted linearly so that a value of
// zero stays reachable. Reported covariances are (J'J)^-1 mapped to the
// natural parameters, without rescaling by chi2 when the data carry errors.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "photophys/correlate.hpp"
#include "photophys/models.hpp"
#include "photophys/optimizer.hpp"
#include "photophys/units.hpp"

namespace photophys {

struct FitParameter {
  std::string name;
  double value = 0.0;
  double error = 0.0;
  std::string unit;
};

struct FitResult {
  std::string kind;   // g2, lambda1, lambda2, saturation, quantum_efficiency, lifetime
  std::string label;  // emitter tag, free text
  std::vector<FitParameter> params;
  Eigen::MatrixXd covariance;  // natural parameters, in params order
  double chi2 = 0.0;
  double chi2_dof = 0.0;
  int dof = 0;
  bool converged = false;
  int iterations = 0;
  std::string message;
  std::vector<std::string> flags;
  std::vector<std::string> warnings;
  std::map<std::string, double> derived;

  bool has(const std::string& name) const {
    return std::any_of(params.begin(), params.end(), [&](const FitParameter& p) { return p.name == name; });
  }
  const FitParameter& param(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return p;
    throw std::out_of_range("FitResult: no parameter '" + name + "'");
  }
  double value(const std::string& name) const { return param(name).value; }
  double error(const std::string& name) const { return param(name).error; }
  bool flagged(const std::string& flag) const {
    return std::find(flags.begin(), flags.end(), flag) != flags.end();
  }
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

enum class Transform { Linear, Log };

struct ParamSpec {
  std::string name;
  std::string unit;
  Transform transform = Transform::Linear;
};

inline double to_internal(double v, Transform t) { return t == Transform::Log ? std::log(v) : v; }
inline double to_natural(double v, Transform t) { return t == Transform::Log ? std::exp(v) : v; }

// Copies an optimizer result into natural parameters via the delta method.
inline void finish(FitResult& out, const LmResult& lm, const std::vector<ParamSpec>& specs, std::size_t n_data) {
  const auto n = static_cast<Eigen::Index>(specs.size());
  Eigen::VectorXd d(n);
  out.params.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = to_natural(lm.x(i), specs[i].transform);
    d(i) = specs[i].transform == Transform::Log ? v : 1.0;
    out.params.push_back({specs[i].name, v, 0.0, specs[i].unit});
  }
  out.covariance = d.asDiagonal() * lm.covariance * d.asDiagonal();
  for (Eigen::Index i = 0; i < n; ++i) out.params[i].error = std::sqrt(std::abs(out.covariance(i, i)));
  out.chi2 = lm.chi2;
  out.dof = static_cast<int>(n_data) - static_cast<int>(n);
  out.chi2_dof = out.dof > 0 ? lm.chi2 / out.dof : 0.0;
  out.converged = lm.converged;
  out.iterations = lm.iterations;
  out.message = lm.message;
  if (lm.singular) out.flags.push_back("singular_covariance");
  for (std::size_t i = 0; i < lm.at_bound.size(); ++i)
    if (lm.at_bound[i]) out.warnings.push_back(specs[i].name + " is at its lower bound");
  if (!lm.converged) out.flags.push_back("not_converged");
}

// Per-point sigmas; all-zero errors mean an unweighted fit.
inline std::vector<double> sigmas_from(std::span<const double> errors, bool& weighted) {
  double smallest = std::numeric_limits<double>::infinity();
  for (double e : errors)
    if (e > 0.0 && std::isfinite(e)) smallest = std::min(smallest, e);
  weighted = std::isfinite(smallest);
  std::vector<double> s(errors.size(), 1.0);
  if (weighted)
    for (std::size_t i = 0; i < errors.size(); ++i) s[i] = errors[i] > 0.0 && std::isfinite(errors[i]) ? errors[i] : smallest;
  return s;
}

// Unweighted fits: scale the covariance by the residual variance.
inline void rescale_unweighted(FitResult& out) {
  if (out.dof <= 0) return;
  const double s2 = out.chi2 / out.dof;
  out.covariance *= s2;
  for (Eigen::Index i = 0; i < out.covariance.rows(); ++i) out.params[i].error = std::sqrt(std::abs(out.covariance(i, i)));
  out.warnings.push_back("no data errors given; covariance scaled by the residual variance");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// g2

struct G2Guess {
  double lambda1 = 1.0;
  double lambda2 = 0.01;
  double a = 0.0;
  double amplitude = 1.0;
  double offset = 0.0;
};

/// Moment-style starting values: lambda1 from the half-rise delay, lambda2
/// from the half-decay of the bunching excess, a from the peak excess.
inline G2Guess g2_initial_guess(const G2Curve& curve, Scheme scheme) {
  curve.validate();
  const std::size_t c = curve.center_index();
  const std::size_t half = std::min(c, curve.size() - 1 - c);
  detail::require(half >= 4, "g2_initial_guess: curve too short");
  const double w = curve.bin_width;
  std::vector<double> s(half + 1);
  for (std::size_t k = 0; k <= half; ++k) s[k] = 0.5 * (curve.values[c + k] + curve.values[c - k]);
  std::vector<double> sm(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t lo = k >= 2 ? k - 2 : 0, hi = std::min(s.size() - 1, k + 2);
    double acc = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) acc += s[j];
    sm[k] = acc / static_cast<double>(hi - lo + 1);
  }
  // Coarse blocks for the slow features, where single bins are noisy.
  const std::size_t block = std::max<std::size_t>(1, s.size() / 60);
  std::vector<double> bt, bv;
  for (std::size_t j = 0; (j + 1) * block <= s.size(); ++j) {
    double acc = 0.0;
    for (std::size_t k = j * block; k < (j + 1) * block; ++k) acc += s[k];
    bv.push_back(acc / static_cast<double>(block));
    bt.push_back((static_cast<double>(j * block) + 0.5 * static_cast<double>(block - 1)) * w);
  }
  const std::size_t tail = std::max<std::size_t>(1, bv.size() / 10);
  double asym = 0.0;
  for (std::size_t j = bv.size() - tail; j < bv.size(); ++j) asym += bv[j];
  asym /= static_cast<double>(tail);
  if (!(asym > 0.0)) asym = 1.0;

  G2Guess g;
  g.amplitude = asym;
  std::size_t j_peak = std::min<std::size_t>(1, bv.size() - 1);
  for (std::size_t j = 1; j < bv.size(); ++j)
    if (bv[j] > bv[j_peak]) j_peak = j;
  const double peak = bv[j_peak];
  const bool bunched = scheme == Scheme::ThreeLevel && peak > asym * 1.002;
  const double top = bunched ? peak : asym;
  const double g0 = s[0];
  const double level = g0 + 0.5 * (top - g0);
  double t_half = 0.0;
  for (std::size_t k = 1; k < sm.size(); ++k) {
    if (sm[k] >= level) {
      const double f = (level - sm[k - 1]) / (sm[k] - sm[k - 1]);
      t_half = (static_cast<double>(k - 1) + std::clamp(f, 0.0, 1.0)) * w;
      break;
    }
  }
  g.lambda1 = std::log(2.0) / std::max(t_half, 0.25 * w);
  if (scheme == Scheme::ThreeLevel) {
    const double t_max = static_cast<double>(half) * w;
    g.a = bunched ? peak / asym - 1.0 : 1e-3;
    g.lambda2 = 3.0 / t_max;
    if (bunched) {
      const double target = asym + 0.5 * (peak - asym);
      for (std::size_t j = j_peak + 1; j < bv.size(); ++j) {
        if (bv[j] <= target) {
          g.lambda2 = std::log(2.0) / std::max(bt[j], w);
          break;
        }
      }
    }
    g.lambda2 = std::min(g.lambda2, g.lambda1 / 5.0);
  }
  return g;
}

struct G2FitOptions {
  std::optional<G2Guess> init;
  ConvolutionOptions convolution{0, true};
  LmOptions lm;
};

namespace detail {

// g2 of the level scheme and its derivatives with respect to the internal
// parameters, on the convolution sub-grid.
struct G2Model {
  Scheme scheme;
  const ConvolutionPlan* plan;

  int n_params() const { return scheme == Scheme::TwoLevel ? 3 : 5; }

  // x = [log l1, amp, offset] or [log l1, log l2, a, amp, offset].
  void eval(const Eigen::VectorXd& x, std::vector<double>& model, std::vector<std::vector<double>>* jac) const {
    const auto& grid = plan->sub_grid();
    const std::size_t m = grid.size();
    const bool three = scheme == Scheme::ThreeLevel;
    const double l1 = std::exp(x(0));
    const double l2 = three ? std::exp(x(1)) : 0.0;
    const double a = three ? x(2) : 0.0;
    const double amp = x(three ? 3 : 1), off = x(three ? 4 : 2);
    std::vector<double> g(m), d1(m), d2(three ? m : 0), da(three ? m : 0);
    for (std::size_t i = 0; i < m; ++i) {
      const double t = std::abs(grid[i]);
      const double e1 = std::exp(-l1 * t);
      if (three) {
        const double e2 = std::exp(-l2 * t);
        g[i] = -std::expm1(-l1 * t) + a * (e2 - e1);
        d1[i] = (1.0 + a) * t * e1 * l1;
        d2[i] = -a * t * e2 * l2;
        da[i] = e2 - e1;
      } else {
        g[i] = -std::expm1(-l1 * t);
        d1[i] = t * e1 * l1;
      }
    }
    const std::vector<double> G = plan->apply(g);
    model.resize(G.size());
    for (std::size_t i = 0; i < G.size(); ++i) model[i] = off + amp * G[i];
    if (jac) {
      jac->assign(static_cast<std::size_t>(n_params()), {});
      auto scaled = [&](const std::vector<double>& d) {
        std::vector<double> v = plan->apply(d);
        for (double& e : v) e *= amp;
        return v;
      };
      (*jac)[0] = scaled(d1);
      if (three) {
        (*jac)[1] = scaled(d2);
        (*jac)[2] = scaled(da);
      }
      (*jac)[three ? 3 : 1] = G;
      (*jac)[three ? 4 : 2] = std::vector<double>(G.size(), 1.0);
    }
  }
};

}  // namespace detail

namespace detail {

inline LsqProblem g2_problem(std::shared_ptr<const ConvolutionPlan> plan, Scheme scheme, std::vector<double> values,
                             std::vector<double> sigma) {
  LsqProblem problem;
  const G2Model model{scheme, plan.get()};
  problem.n_params = model.n_params();
  const int np = problem.n_params;
  problem.eval = [plan, model, np, values = std::move(values), sigma = std::move(sigma)](
                     const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    const auto n = static_cast<Eigen::Index>(values.size());
    std::vector<double> m;
    std::vector<std::vector<double>> cols;
    model.eval(x, m, J ? &cols : nullptr);
    r.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = (m[i] - values[i]) / sigma[i];
    if (J) {
      J->resize(n, np);
      for (int j = 0; j < np; ++j)
        for (Eigen::Index i = 0; i < n; ++i) (*J)(i, j) = cols[j][i] / sigma[i];
    }
  };
  // a >= 0. With a < 0 the fit can trade the antibunching for the slow term
  // (lambda1 -> infinity, lambda2 -> true lambda1), which describes
  // two-level data as well as the correct labelling.
  if (scheme == Scheme::ThreeLevel) {
    const double inf = std::numeric_limits<double>::infinity();
    problem.lower = {-inf, -inf, 0.0, -inf, -inf};
  }
  return problem;
}

}  // namespace detail

/// Weighted fit of offset + amplitude * (IRF conv g2)(tau).
inline FitResult fit_g2(const G2Curve& curve, const Irf& irf, Scheme scheme, const G2FitOptions& opt = {}) {
  curve.validate();
  if (curve.size() < 50) throw std::invalid_argument("fit_g2: need at least 50 bins");
  const auto plan = std::make_shared<const ConvolutionPlan>(curve.bin_centers, irf, opt.convolution);
  const detail::G2Model model{scheme, plan.get()};
  bool weighted = false;
  const std::vector<double> sigma = detail::sigmas_from(curve.errors, weighted);

  const G2Guess guess = opt.init.value_or(g2_initial_guess(curve, scheme));
  Eigen::VectorXd x0(model.n_params());
  if (scheme == Scheme::TwoLevel) {
    x0 << std::log(guess.lambda1), guess.amplitude, guess.offset;
  } else {
    x0 << std::log(guess.lambda1), std::log(guess.lambda2), guess.a, guess.amplitude, guess.offset;
  }
  const LsqProblem problem = detail::g2_problem(plan, scheme, curve.values, sigma);
  const LmResult lm = levenberg_marquardt(problem, x0, opt.lm);

  FitResult out;
  out.kind = "g2";
  std::vector<detail::ParamSpec> specs;
  specs.push_back({"lambda1", "ns^-1", detail::Transform::Log});
  if (scheme == Scheme::ThreeLevel) {
    specs.push_back({"lambda2", "ns^-1", detail::Transform::Log});
    specs.push_back({"a", "", detail::Transform::Linear});
  }
  specs.push_back({"amplitude", "", detail::Transform::Linear});
  specs.push_back({"offset", "", detail::Transform::Linear});
  detail::finish(out, lm, specs, curve.size());
  if (!weighted) detail::rescale_unweighted(out);
  for (const auto& w : plan->warnings()) out.warnings.push_back(w);

  out.derived["scheme_levels"] = scheme == Scheme::TwoLevel ? 2.0 : 3.0;
  out.derived["irf_fwhm_ps"] = irf.shape == IrfShape::Gaussian ? irf.fwhm_ps : std::nan("");
  out.derived["bin_width_ns"] = curve.bin_width;
  out.derived["tau_max_ns"] = curve.bin_centers.back();
  std::vector<double> fitted;
  model.eval(lm.x, fitted, nullptr);
  out.derived["g2_zero_model"] = fitted[curve.center_index()];
  out.derived["g2_zero_raw"] = curve.central_value();
  out.derived["g2_zero_raw_error"] = curve.errors[curve.center_index()];
  if (scheme == Scheme::ThreeLevel && out.value("lambda2") >= out.value("lambda1")) out.flags.push_back("degenerate");
  const double l1 = out.value("lambda1");
  if (curve.bin_centers.back() < 5.0 / l1) out.warnings.push_back("curve spans less than 5/lambda1 on each side");
  return out;
}

// ---------------------------------------------------------------------------
// Power dependence of the decay rates

struct PowerPoint {
  double p_uw = 0.0;
  double lambda1 = 0.0;  // ns^-1
  double lambda1_err = 0.0;
  std::optional<double> lambda2;
  double lambda2_err = 0.0;
  std::optional<double> a;
  double a_err = 0.0;
};

struct PowerSeries {
  std::string label;
  std::vector<PowerPoint> entries;

  void validate() const {
    if (entries.size() < 3) throw std::invalid_argument("PowerSeries: need at least 3 powers");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      detail::require(std::isfinite(entries[i].p_uw) && entries[i].p_uw > 0.0, "PowerSeries: powers must be positive");
      detail::require(std::isfinite(entries[i].lambda1) && entries[i].lambda1 > 0.0,
                      "PowerSeries: lambda1 must be positive");
      for (std::size_t j = 0; j < i; ++j)
        detail::require(entries[j].p_uw != entries[i].p_uw, "PowerSeries: powers must be distinct");
    }
  }
};

/// A series entry from a g2 fit at a known power.
inline PowerPoint power_point(double p_uw, const FitResult& g2) {
  PowerPoint p;
  p.p_uw = p_uw;
  p.lambda1 = g2.value("lambda1");
  p.lambda1_err = g2.error("lambda1");
  if (g2.has("lambda2")) {
    p.lambda2 = g2.value("lambda2");
    p.lambda2_err = g2.error("lambda2");
    p.a = g2.value("a");
    p.a_err = g2.error("a");
  }
  return p;
}

/// Weighted straight line lambda1 = r21_0 + s P, reported as r21_0 and
/// alpha = s / r21_0 (P in mW). The slope s is the pump rate per mW.
inline FitResult extrapolate_lambda1(const PowerSeries& series) {
  series.validate();
  const auto n = static_cast<Eigen::Index>(series.entries.size());
  std::vector<double> errs;
  for (const auto& e : series.entries) errs.push_back(e.lambda1_err);
  bool weighted = false;
  const auto sigma = detail::sigmas_from(errs, weighted);
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = series.entries[static_cast<std::size_t>(i)];
    A(i, 0) = 1.0 / sigma[i];
    A(i, 1) = units::uw_to_mw(e.p_uw) / sigma[i];
    y(i) = e.lambda1 / sigma[i];
  }
  const Eigen::VectorXd c = A.colPivHouseholderQr().solve(y);
  const Eigen::MatrixXd cov_c = (A.transpose() * A).inverse();
  const double chi2 = (A * c - y).squaredNorm();

  FitResult out;
  out.kind = "lambda1";
  out.label = series.label;
  const double r21 = c(0), s = c(1);
  const double alpha = s / r21;
  Eigen::MatrixXd d(2, 2);  // d(r21, alpha)/d(c0, c1)
  d << 1.0, 0.0, -s / (r21 * r21), 1.0 / r21;
  out.params = {{"r21_0", r21, 0.0, "ns^-1"}, {"alpha", alpha, 0.0, "mW^-1"}};
  out.covariance = d * cov_c * d.transpose();
  out.chi2 = chi2;
  out.dof = static_cast<int>(n) - 2;
  out.chi2_dof = out.dof > 0 ? chi2 / out.dof : 0.0;
  out.converged = true;
  out.message = "linear least squares";
  for (int i = 0; i < 2; ++i) out.params[i].error = std::sqrt(std::max(0.0, out.covariance(i, i)));
  if (!weighted) detail::rescale_unweighted(out);
  const double r21_err = out.params[0].error;
  out.derived["tau21"] = 1.0 / r21;
  out.derived["tau21_error"] = r21_err / (r21 * r21);
  out.derived["pump_slope"] = s;
  out.derived["pump_slope_error"] = std::sqrt(std::max(0.0, cov_c(1, 1) * (weighted ? 1.0 : out.chi2_dof)));
  if (alpha > 0.0) out.derived["p_sat_uw"] = units::mw_to_uw(1.0 / alpha);
  return out;
}

struct Lambda2Options {
  bool use_bunching = true;  // also fit a(P) where the series has it
  LmOptions lm;
};

namespace detail {

// lambda2(P) = r31_0 (1 + beta P) + r23 s(P), a(P) = r23 s(P) / (r31_0 (1 + beta P)),
// with s(P) = k P / (r21_0 + k P) = r12 / lambda1 from the lambda1 stage.
struct Lambda2Model {
  double r21_0, k;

  double s(double p_mw) const { return k * p_mw / (r21_0 + k * p_mw); }

  // x = [log r31_0, beta, r23]
  void lambda2(const Eigen::VectorXd& x, double p, double& v, Eigen::RowVector3d& d) const {
    const double r31 = std::exp(x(0)), beta = x(1), r23 = x(2);
    v = r31 * (1.0 + beta * p) + r23 * s(p);
    d << r31 * (1.0 + beta * p), r31 * p, s(p);
  }
  void bunching(const Eigen::VectorXd& x, double p, double& v, Eigen::RowVector3d& d) const {
    const double r31 = std::exp(x(0)), beta = x(1), r23 = x(2);
    const double shelf_out = r31 * (1.0 + beta * p);
    v = r23 * s(p) / shelf_out;
    d << -v, -v * p / (1.0 + beta * p), s(p) / shelf_out;
  }
};

struct Lambda2Row {
  double p;  // mW
  double y, sigma;
  bool is_a;  // bunching amplitude rather than lambda2
};

inline LsqProblem lambda2_problem(std::vector<Lambda2Row> rows, Lambda2Model model) {
  LsqProblem problem;
  problem.n_params = 3;
  problem.eval = [rows = std::move(rows), model](const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    const auto m = static_cast<Eigen::Index>(rows.size());
    r.resize(m);
    if (J) J->resize(m, 3);
    for (Eigen::Index i = 0; i < m; ++i) {
      const Lambda2Row& row = rows[static_cast<std::size_t>(i)];
      double v;
      Eigen::RowVector3d d;
      if (row.is_a) model.bunching(x, row.p, v, d);
      else model.lambda2(x, row.p, v, d);
      r(i) = (v - row.y) / row.sigma;
      if (J) J->row(i) = d / row.sigma;
    }
  };
  return problem;
}

}  // namespace detail

/// Fits the power dependence of lambda2 with the pump slope fixed from the
/// lambda1 stage. The bunching amplitudes, when present, carry most of the
/// information on r23, which contributes only a few percent to lambda2.
inline FitResult extrapolate_lambda2(const PowerSeries& series, const FitResult& lambda1_fit,
                                     const Lambda2Options& opt = {}) {
  series.validate();
  detail::require(lambda1_fit.kind == "lambda1", "extrapolate_lambda2: needs the lambda1 extrapolation");
  using Row = detail::Lambda2Row;
  std::vector<Row> rows;
  std::vector<double> lerr, aerr;
  for (const auto& e : series.entries) {
    if (!e.lambda2) throw std::invalid_argument("extrapolate_lambda2: series entry without lambda2");
    lerr.push_back(e.lambda2_err);
    if (opt.use_bunching && e.a) aerr.push_back(e.a_err);
  }
  bool weighted_l = false, weighted_a = false;
  const auto sl = detail::sigmas_from(lerr, weighted_l);
  const auto sa = detail::sigmas_from(aerr, weighted_a);
  std::size_t ia = 0;
  for (std::size_t i = 0; i < series.entries.size(); ++i) {
    const auto& e = series.entries[i];
    const double p = units::uw_to_mw(e.p_uw);
    rows.push_back({p, *e.lambda2, sl[i], false});
    if (opt.use_bunching && e.a) rows.push_back({p, *e.a, sa[ia++], true});
  }
  const bool weighted = weighted_l && (aerr.empty() || weighted_a);

  const detail::Lambda2Model model{lambda1_fit.value("r21_0"), lambda1_fit.derived.at("pump_slope")};

  // Start: straight line through lambda2 ignoring r23, then r23 from a.
  Eigen::MatrixXd A(static_cast<Eigen::Index>(series.entries.size()), 2);
  Eigen::VectorXd y(A.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const auto& e = series.entries[static_cast<std::size_t>(i)];
    A(i, 0) = 1.0;
    A(i, 1) = units::uw_to_mw(e.p_uw);
    y(i) = *e.lambda2;
  }
  const Eigen::Vector2d c = A.colPivHouseholderQr().solve(y);
  double r31_0 = c(0) > 0.0 ? c(0) : y.minCoeff();
  double beta = c(0) > 0.0 ? std::max(0.0, c(1) / c(0)) : 0.0;
  double r23 = 0.0;
  int na = 0;
  for (const auto& e : series.entries) {
    const double p = units::uw_to_mw(e.p_uw);
    if (e.a && model.s(p) > 0.0) {
      r23 += *e.a * r31_0 * (1.0 + beta * p) / model.s(p);
      ++na;
    }
  }
  r23 = na > 0 ? std::max(r23 / na, 0.0) : 0.1 * r31_0;
  Eigen::VectorXd x0(3);
  x0 << std::log(r31_0), beta, r23;

  const LsqProblem problem = detail::lambda2_problem(rows, model);
  const LmResult lm = levenberg_marquardt(problem, x0, opt.lm);
  FitResult out;
  out.kind = "lambda2";
  out.label = series.label;
  detail::finish(out, lm,
                 {{"r31_0", "ns^-1", detail::Transform::Log},
                  {"beta", "mW^-1", detail::Transform::Linear},
                  {"r23", "ns^-1", detail::Transform::Linear}},
                 rows.size());
  if (!weighted) detail::rescale_unweighted(out);
  const double r31v = out.value("r31_0"), r23v = out.value("r23");
  out.derived["r31_0_mhz"] = units::per_ns_to_mhz(r31v);
  out.derived["r23_mhz"] = units::per_ns_to_mhz(r23v);
  out.derived["r31_0_mhz_error"] = units::per_ns_to_mhz(out.error("r31_0"));
  out.derived["r23_mhz_error"] = units::per_ns_to_mhz(out.error("r23"));
  // shelving ratio r23 / r31_0 by the delta method
  const double ratio = r23v / r31v;
  const double var = ratio * ratio *
                     (out.covariance(2, 2) / (r23v * r23v) + out.covariance(0, 0) / (r31v * r31v) -
                      2.0 * out.covariance(0, 2) / (r23v * r31v));
  out.derived["shelving_ratio"] = ratio;
  out.derived["shelving_ratio_error"] = std::sqrt(std::max(0.0, var));
  out.derived["pump_slope"] = model.k;
  out.derived["used_bunching"] = rows.size() > series.entries.size() ? 1.0 : 0.0;
  return out;
}

/// Rate law assembled from the two extrapolations.
inline PowerLaw power_law_from_fits(const FitResult& lambda1_fit, const FitResult* lambda2_fit) {
  PowerLaw law;
  law.r21_0 = lambda1_fit.value("r21_0");
  law.alpha = std::max(0.0, lambda1_fit.value("alpha"));
  law.pump_slope = lambda1_fit.derived.at("pump_slope");
  if (lambda2_fit) {
    law.scheme = Scheme::ThreeLevel;
    law.r31_0 = lambda2_fit->value("r31_0");
    law.beta = std::max(0.0, lambda2_fit->value("beta"));
    law.r23 = std::max(0.0, lambda2_fit->value("r23"));
  }
  law.validate();
  return law;
}

// ---------------------------------------------------------------------------
// Saturation

struct SaturationPoint {
  double p_uw = 0.0;
  double phi = 0.0;  // counts/s
  double phi_err = 0.0;
};

namespace detail {

// x = [log phi_inf, log P_sat]
inline LsqProblem saturation_problem(std::vector<SaturationPoint> points, std::vector<double> sigma) {
  LsqProblem problem;
  problem.n_params = 2;
  problem.eval = [points = std::move(points), sigma = std::move(sigma)](const Eigen::VectorXd& x, Eigen::VectorXd& r,
                                                                         Eigen::MatrixXd* J) {
    const auto n = static_cast<Eigen::Index>(points.size());
    const double f = std::exp(x(0)), ps = std::exp(x(1));
    r.resize(n);
    if (J) J->resize(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double p = points[k].p_uw;
      const double m = f * p / (p + ps);
      r(i) = (m - points[k].phi) / sigma[k];
      if (J) {
        (*J)(i, 0) = m / sigma[k];
        (*J)(i, 1) = -f * p * ps / ((p + ps) * (p + ps)) / sigma[k];
      }
    }
  };
  return problem;
}

}  // namespace detail

/// Two-level saturation curve phi_inf P / (P + P_sat).
inline FitResult fit_saturation(const std::vector<SaturationPoint>& points, const LmOptions& lm_opt = {}) {
  if (points.size() < 3) throw std::invalid_argument("fit_saturation: need at least 3 powers");
  for (const auto& p : points) {
    detail::require(std::isfinite(p.p_uw) && p.p_uw > 0.0, "fit_saturation: powers must be positive");
    detail::require(std::isfinite(p.phi), "fit_saturation: rates must be finite");
  }
  std::vector<double> errs;
  for (const auto& p : points) errs.push_back(p.phi_err);
  bool weighted = false;
  const auto sigma = detail::sigmas_from(errs, weighted);

  // Start from the line 1/phi = 1/phi_inf + (P_sat/phi_inf) / P through the
  // lowest and highest powers.
  auto lo = std::min_element(points.begin(), points.end(), [](auto& a, auto& b) { return a.p_uw < b.p_uw; });
  auto hi = std::max_element(points.begin(), points.end(), [](auto& a, auto& b) { return a.p_uw < b.p_uw; });
  double phi_inf = hi->phi * 2.0, p_sat = hi->p_uw;
  if (lo->phi > 0.0 && hi->phi > 0.0 && lo != hi) {
    const double x1 = 1.0 / lo->p_uw, x2 = 1.0 / hi->p_uw, y1 = 1.0 / lo->phi, y2 = 1.0 / hi->phi;
    const double slope = (y1 - y2) / (x1 - x2);
    const double icpt = y2 - slope * x2;
    if (icpt > 0.0 && slope > 0.0) {
      phi_inf = 1.0 / icpt;
      p_sat = slope * phi_inf;
    }
  }
  Eigen::VectorXd x0(2);
  x0 << std::log(phi_inf), std::log(p_sat);
  const LsqProblem problem = detail::saturation_problem(points, sigma);
  const LmResult lm = levenberg_marquardt(problem, x0, lm_opt);
  FitResult out;
  out.kind = "saturation";
  detail::finish(out, lm, {{"phi_inf", "counts/s", detail::Transform::Log}, {"p_sat", "uW", detail::Transform::Log}},
                 points.size());
  if (!weighted) detail::rescale_unweighted(out);
  if (hi->p_uw < 0.5 * out.value("p_sat")) out.flags.push_back("ill_conditioned");
  if (points.size() < 4) out.warnings.push_back("fewer than 4 powers");
  return out;
}

/// Three-level saturation with rates and eta fixed: the count rate is linear
/// in eta_QE, so the weighted least-squares solution is closed form.
inline FitResult fit_quantum_efficiency(const std::vector<SaturationPoint>& points, const PowerLaw& law, double eta) {
  if (points.empty()) throw std::invalid_argument("fit_quantum_efficiency: no points");
  law.validate();
  detail::require(law.scheme == Scheme::ThreeLevel, "fit_quantum_efficiency: needs a three-level law");
  std::vector<double> errs;
  for (const auto& p : points) errs.push_back(p.phi_err);
  bool weighted = false;
  const auto sigma = detail::sigmas_from(errs, weighted);
  double sff = 0.0, sfy = 0.0;
  std::vector<double> f(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    f[i] = three_level_count_rate(law.rates_at(units::uw_to_mw(points[i].p_uw)), eta, 1.0);
    const double w = 1.0 / (sigma[i] * sigma[i]);
    sff += w * f[i] * f[i];
    sfy += w * f[i] * points[i].phi;
  }
  detail::require(sff > 0.0, "fit_quantum_efficiency: model rate vanishes at every power");
  const double q = sfy / sff;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) chi2 += std::pow((q * f[i] - points[i].phi) / sigma[i], 2);
  FitResult out;
  out.kind = "quantum_efficiency";
  out.params = {{"eta_qe", q, std::sqrt(1.0 / sff), ""}};
  out.covariance = Eigen::MatrixXd::Constant(1, 1, 1.0 / sff);
  out.chi2 = chi2;
  out.dof = static_cast<int>(points.size()) - 1;
  out.chi2_dof = out.dof > 0 ? chi2 / out.dof : 0.0;
  out.converged = true;
  out.message = "linear least squares";
  if (!weighted) {
    detail::rescale_unweighted(out);
  } else if (out.chi2_dof > 1.0) {
    // The fixed rates miss the data by more than the count errors; widen
    // the error by the Birge ratio so it reflects the actual scatter.
    const double birge = std::sqrt(out.chi2_dof);
    out.params[0].error *= birge;
    out.covariance *= out.chi2_dof;
    char buf[96];
    std::snprintf(buf, sizeof buf, "error scaled by sqrt(chi2/dof) = %.3g", birge);
    out.warnings.push_back(buf);
  }
  out.derived["eta"] = eta;
  out.derived["phi_inf"] = q * eta * units::per_ns_to_per_s(law.r21_0);
  if (q > 1.0) out.flags.push_back("unphysical");
  return out;
}

// ---------------------------------------------------------------------------
// Lifetime

struct LifetimeOptions {
  double t_min = 0.5;        // ns, rejects the fast background
  int pearson_passes = 2;    // refits weighted by the model after the first pass
  double min_counts = 1e3;   // below this beyond t_min the result is flagged
  LmOptions lm;
};

namespace detail {

// x = [log tau, A, B]; sigma is shared so that the caller can reweight.
inline LsqProblem lifetime_problem(std::vector<double> t, std::vector<double> y,
                                   std::shared_ptr<const std::vector<double>> sigma) {
  LsqProblem problem;
  problem.n_params = 3;
  problem.eval = [t = std::move(t), y = std::move(y), sigma](const Eigen::VectorXd& x, Eigen::VectorXd& r,
                                                             Eigen::MatrixXd* J) {
    const auto n = static_cast<Eigen::Index>(t.size());
    const double tau = std::exp(x(0)), A = x(1), B = x(2);
    r.resize(n);
    if (J) J->resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double s = (*sigma)[k];
      const double e = std::exp(-t[k] / tau);
      r(i) = (A * e + B - y[k]) / s;
      if (J) {
        (*J)(i, 0) = A * e * t[k] / tau / s;
        (*J)(i, 1) = e / s;
        (*J)(i, 2) = 1.0 / s;
      }
    }
  };
  return problem;
}

}  // namespace detail

/// A exp(-(t - t_min) / tau) + B on bins with centre >= t_min. The first
/// pass weights by the counts (zero-count bins get unit variance); later
/// passes weight by the fitted model.
inline FitResult fit_lifetime(const DecayCurve& decay, const LifetimeOptions& opt = {}) {
  detail::require(detail::finite_nonneg(opt.t_min), "fit_lifetime: t_min must be non-negative");
  std::vector<double> t, y;
  for (std::size_t i = 0; i < decay.counts.size(); ++i) {
    if (decay.bin_centers[i] >= opt.t_min) {
      t.push_back(decay.bin_centers[i] - opt.t_min);
      y.push_back(decay.counts[i]);
    }
  }
  if (t.size() < 4) throw std::invalid_argument("fit_lifetime: fewer than 4 bins beyond t_min");
  double total = 0.0;
  for (double c : y) total += c;

  const std::size_t tail = std::max<std::size_t>(3, y.size() / 10);
  double b0 = 0.0;
  for (std::size_t i = y.size() - tail; i < y.size(); ++i) b0 += y[i];
  b0 /= static_cast<double>(tail);
  double head = 0.0;
  const std::size_t nh = std::min<std::size_t>(3, y.size());
  for (std::size_t i = 0; i < nh; ++i) head += y[i];
  head /= static_cast<double>(nh);
  const double a0 = std::max(head - b0, 1.0);
  double tau0 = (t.back() - t.front()) / 5.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] - b0 < a0 / std::exp(1.0)) {
      tau0 = std::max(t[i], decay.bin_width);
      break;
    }
  }

  auto sigma = std::make_shared<std::vector<double>>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) (*sigma)[i] = std::sqrt(std::max(y[i], 1.0));
  const LsqProblem problem = detail::lifetime_problem(t, y, sigma);
  Eigen::VectorXd x(3);
  x << std::log(tau0), a0, b0;
  LmResult lm = levenberg_marquardt(problem, x, opt.lm);
  for (int pass = 0; pass < opt.pearson_passes && lm.x.allFinite(); ++pass) {
    const double tau = std::exp(lm.x(0));
    for (std::size_t i = 0; i < t.size(); ++i)
      (*sigma)[i] = std::sqrt(std::max(lm.x(1) * std::exp(-t[i] / tau) + lm.x(2), 1e-3));
    lm = levenberg_marquardt(problem, lm.x, opt.lm);
  }

  FitResult out;
  out.kind = "lifetime";
  detail::finish(out, lm,
                 {{"tau", "ns", detail::Transform::Log},
                  {"amplitude", "counts/bin", detail::Transform::Linear},
                  {"baseline", "counts/bin", detail::Transform::Linear}},
                 t.size());
  out.derived["t_min"] = opt.t_min;
  out.derived["counts_used"] = total;
  out.derived["rep_rate_mhz"] = decay.rep_rate_mhz;
  if (total < opt.min_counts) out.flags.push_back("low_statistics");
  const double A = out.value("amplitude");
  if (!(A > 2.0 * out.error("amplitude")) || !out.converged) out.flags.push_back("no_decay");
  return out;
}

// ---------------------------------------------------------------------------
// Efficiencies and rate corrections

struct EfficiencyEstimate {
  double value = 0.0;
  std::vector<std::string> warnings;
};

struct PulsedConditions {
  double dead_time_ns = 50.0;
  double lifetime_ns = std::nan("");
  bool above_saturation = true;
};

/// eta = phi / R_rep, valid when every pulse excites the emitter and the
/// period exceeds both the detector dead time and the lifetime.
inline EfficiencyEstimate collection_efficiency_pulsed(double phi, double rep_rate_mhz,
                                                       const PulsedConditions& cond = {}) {
  detail::require(detail::finite_nonneg(phi), "collection_efficiency_pulsed: rate must be non-negative");
  detail::require(std::isfinite(rep_rate_mhz) && rep_rate_mhz > 0.0,
                  "collection_efficiency_pulsed: repetition rate must be positive");
  EfficiencyEstimate e;
  e.value = phi / (rep_rate_mhz * 1e6);
  const double period = 1e3 / rep_rate_mhz;
  if (!(period > cond.dead_time_ns)) e.warnings.push_back("pulse period does not exceed the detector dead time");
  if (std::isfinite(cond.lifetime_ns) && !(period > cond.lifetime_ns))
    e.warnings.push_back("pulse period does not exceed the emitter lifetime");
  if (!cond.above_saturation) e.warnings.push_back("excitation below saturation: not every pulse excites the emitter");
  return e;
}

/// eta = phi_inf / r21_0 for a two-level emitter (phi_inf in counts/s, r21_0 in ns^-1).
inline double collection_efficiency_cw(double phi_inf, double r21_0) {
  detail::require(detail::finite_nonneg(phi_inf), "collection_efficiency_cw: rate must be non-negative");
  detail::require(std::isfinite(r21_0) && r21_0 > 0.0, "collection_efficiency_cw: r21_0 must be positive");
  return phi_inf / units::per_ns_to_per_s(r21_0);
}

/// True rate from a measured rate with a non-paralyzable dead time.
inline double dead_time_corrected_rate(double measured, double dead_time_ns) {
  detail::require(detail::finite_nonneg(measured), "dead_time_corrected_rate: rate must be non-negative");
  const double x = measured * dead_time_ns * 1e-9;
  detail::require(x < 1.0, "dead_time_corrected_rate: measured rate saturates the detector");
  return measured / (1.0 - x);
}

/// Emitter signal in counts/s summed over both detectors: each channel is
/// dead-time corrected, then dark counts and background are subtracted.
inline double signal_rate(double rate_a, double rate_b, double dead_time_ns, double dark_per_channel,
                          double background) {
  return dead_time_corrected_rate(rate_a, dead_time_ns) + dead_time_corrected_rate(rate_b, dead_time_ns) -
         2.0 * dark_per_channel - background;
}

}  // namespace photophys
