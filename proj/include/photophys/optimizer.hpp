#pragma once

// Levenberg-Marquardt for small weighted least-squares problems.
//
// The caller supplies weighted residuals r(x) and their Jacobian. Steps solve
// (J'J + mu diag(J'J)) dx = -J'r; mu shrinks after a successful step and
// grows after a failed one (Nielsen's update). Convergence is declared when
// the residual vector is orthogonal to every Jacobian column to within
// `gtol` (the MINPACK gradient test), so a converged result always has a
// small scaled gradient. Hitting the iteration limit returns a
// non-converged result instead of throwing.
//
// Optional lower bounds are handled with an active set: a parameter sitting
// on its bound with the gradient pushing outward is frozen for that step and
// left out of the gradient test.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace photophys {

struct LsqProblem {
  int n_params = 0;
  // Fills r (weighted residuals) and, when J is non-null, the Jacobian dr/dx.
  std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* J)> eval;
  std::vector<double> lower;  // per-parameter lower bounds; empty means none
};

struct LmOptions {
  int max_iterations = 200;
  double gtol = 1e-9;        // scaled-gradient tolerance for convergence
  double xtol = 1e-13;       // relative step below which the search stops
  double stall_gtol = 1e-5;  // gradient tolerance accepted when the step stalls
  double initial_mu = 1e-3;
};

struct LmResult {
  Eigen::VectorXd x;
  Eigen::MatrixXd covariance;  // (J'J)^-1 at x, not scaled by chi2; NaN rows for unidentified parameters
  Eigen::VectorXd residuals;
  double chi2 = 0.0;
  double gradient_cosine = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  bool singular = false;  // J'J not invertible at the optimum
  std::vector<bool> at_bound;
  std::string message;
};

namespace detail {

// Largest |cos| between the residual vector and a Jacobian column. A
// residual norm at or below `floor` is rounding noise of an exact fit.
inline double gradient_cosine(const Eigen::MatrixXd& J, const Eigen::VectorXd& r, double floor = 0.0,
                              const std::vector<bool>& frozen = {}) {
  const double rn = r.norm();
  if (rn <= floor) return 0.0;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < J.cols(); ++j) {
    if (!frozen.empty() && frozen[static_cast<std::size_t>(j)]) continue;
    const double cn = J.col(j).norm();
    if (cn == 0.0) continue;
    worst = std::max(worst, std::abs(J.col(j).dot(r)) / (cn * rn));
  }
  return worst;
}

// Parameters on their lower bound whose descent direction points outward.
inline std::vector<bool> active_bounds(const std::vector<double>& lower, const Eigen::VectorXd& x,
                                       const Eigen::VectorXd& g) {
  std::vector<bool> act(static_cast<std::size_t>(x.size()), false);
  for (std::size_t i = 0; i < lower.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    act[i] = x(k) <= lower[i] && g(k) > 0.0;
  }
  return act;
}

}  // namespace detail

inline LmResult levenberg_marquardt(const LsqProblem& problem, const Eigen::VectorXd& x0,
                                    const LmOptions& opt = {}) {
  const int n = problem.n_params;
  LmResult res;
  Eigen::VectorXd x = x0, r, r_try;
  const std::vector<double>& lower = problem.lower;
  for (std::size_t i = 0; i < lower.size(); ++i) x(static_cast<Eigen::Index>(i)) = std::max(x(static_cast<Eigen::Index>(i)), lower[i]);
  auto project = [&](Eigen::VectorXd& v) {
    for (std::size_t i = 0; i < lower.size(); ++i) v(static_cast<Eigen::Index>(i)) = std::max(v(static_cast<Eigen::Index>(i)), lower[i]);
  };
  Eigen::MatrixXd J(0, n);
  problem.eval(x, r, &J);
  ++res.evaluations;
  double chi2 = r.squaredNorm();
  if (!std::isfinite(chi2)) {
    res.x = x;
    res.chi2 = chi2;
    res.message = "residuals not finite at the initial guess";
    return res;
  }
  // Scale of the data in residual units: the initial misfit or the size of
  // the model's response to the parameters.
  double scale = r.norm();
  for (Eigen::Index j = 0; j < J.cols(); ++j) scale = std::max(scale, J.col(j).norm() * std::max(1.0, std::abs(x(j))));
  const double floor = 1e-12 * scale;
  double mu = opt.initial_mu;
  double nu = 2.0;
  bool stalled = false;
  int it = 0;
  std::vector<bool> frozen(static_cast<std::size_t>(n), false);
  for (; it < opt.max_iterations; ++it) {
    Eigen::MatrixXd A = J.transpose() * J;
    Eigen::VectorXd g = J.transpose() * r;
    frozen = detail::active_bounds(lower, x, g);
    const double cosine = detail::gradient_cosine(J, r, floor, frozen);
    if (cosine <= opt.gtol || chi2 == 0.0) break;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!frozen[static_cast<std::size_t>(j)]) continue;
      A.row(j).setZero();
      A.col(j).setZero();
      A(j, j) = 1.0;
      g(j) = 0.0;
    }
    Eigen::VectorXd diag = A.diagonal().cwiseMax(1e-300);
    bool accepted = false;
    for (int inner = 0; inner < 60 && !accepted; ++inner) {
      Eigen::MatrixXd Am = A;
      Am.diagonal() += mu * diag;
      const Eigen::VectorXd dx = Am.ldlt().solve(-g);
      if (!dx.allFinite()) {
        mu *= nu;
        nu *= 2.0;
        continue;
      }
      if (dx.norm() <= opt.xtol * (x.norm() + opt.xtol)) {
        stalled = true;
        break;
      }
      Eigen::VectorXd x_try = x + dx;
      project(x_try);
      problem.eval(x_try, r_try, nullptr);
      ++res.evaluations;
      const double chi2_try = r_try.squaredNorm();
      // Gain ratio of the actual to the predicted reduction (for the
      // projected step, from the linear model of the residuals).
      // Both reductions are formed without subtracting nearly equal sums
      // so that steps close to the optimum are still judged correctly.
      const Eigen::VectorXd step = x_try - x;
      const Eigen::VectorXd Js = J * step;
      const double predicted = -Js.dot(2.0 * r + Js);
      const double actual = (r - r_try).dot(r + r_try);
      const double rho = std::isfinite(chi2_try) && predicted > 0.0 ? actual / predicted : -1.0;
      if (rho > 0.0) {
        x = x_try;
        problem.eval(x, r, &J);
        ++res.evaluations;
        chi2 = chi2_try;
        mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        nu = 2.0;
        accepted = true;
      } else {
        mu *= nu;
        nu *= 2.0;
      }
    }
    if (stalled || !accepted) break;
  }
  res.x = x;
  res.residuals = r;
  res.chi2 = chi2;
  res.iterations = it;
  {
    const Eigen::VectorXd g = J.transpose() * r;
    frozen = detail::active_bounds(lower, x, g);
  }
  res.at_bound = frozen;
  res.gradient_cosine = detail::gradient_cosine(J, r, floor, frozen);
  if (res.gradient_cosine <= opt.gtol || chi2 == 0.0) {
    res.converged = true;
    res.message = "gradient orthogonal to the residuals";
  } else if (res.gradient_cosine <= opt.stall_gtol) {
    res.converged = true;
    res.message = "step stalled with a small gradient";
  } else if (it >= opt.max_iterations) {
    res.message = "iteration limit reached";
  } else {
    res.message = "no downhill step found";
  }

  // (J'J)^-1 through the SVD of J, which squares the conditioning only once.
  // When J is rank deficient the pseudo-inverse is used and parameters with
  // a component along a null direction get NaN variances.
  const auto k_sv = std::min<Eigen::Index>(J.rows(), n);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(J, Eigen::ComputeFullV);
  const Eigen::VectorXd sv = svd.singularValues();
  const Eigen::MatrixXd V = svd.matrixV();
  const double cut = 1e-13 * (sv.size() > 0 ? sv(0) : 0.0);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(n);
  std::vector<bool> unidentified(static_cast<std::size_t>(n), false);
  for (Eigen::Index k = 0; k < n; ++k) {
    if (k < k_sv && sv(k) > cut) {
      inv(k) = 1.0 / (sv(k) * sv(k));
      continue;
    }
    res.singular = true;
    for (Eigen::Index j = 0; j < n; ++j)
      if (std::abs(V(j, k)) > 1e-6) unidentified[static_cast<std::size_t>(j)] = true;
  }
  res.covariance = V * inv.asDiagonal() * V.transpose();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!unidentified[static_cast<std::size_t>(j)]) continue;
    res.covariance.row(j).setConstant(nan);
    res.covariance.col(j).setConstant(nan);
  }
  return res;
}

}  // namespace photophys
