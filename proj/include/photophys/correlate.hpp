#pragma once

// Coincidence histograms, decay histograms, background correction and the
// forward convolution of g2 models with the instrument response.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "photophys/models.hpp"
#include "photophys/montecarlo.hpp"
#include "photophys/units.hpp"

namespace photophys {

struct G2Curve {
  std::vector<double> bin_centers;  // ns, symmetric about 0
  std::vector<double> values;
  std::vector<double> errors;
  std::vector<double> coincidences;  // raw pair counts per bin
  double bin_width = 0.154;          // ns
  double acquisition_s = 0.0;
  double rate_a = 0.0;  // counts/s
  double rate_b = 0.0;
  std::string normalization = "full-pairwise";
  std::vector<std::string> warnings;

  std::size_t size() const { return values.size(); }
  std::size_t center_index() const { return values.size() / 2; }

  /// Raw estimate in the bin containing zero delay.
  double central_value() const {
    detail::require(!values.empty(), "G2Curve: empty curve");
    return values[center_index()];
  }

  void validate() const {
    detail::require(bin_width > 0.0, "G2Curve: bin width must be positive");
    detail::require(bin_centers.size() == values.size() && errors.size() == values.size(),
                    "G2Curve: column lengths differ");
    for (double e : errors) detail::require(e >= 0.0, "G2Curve: negative error");
    for (std::size_t i = 1; i < bin_centers.size(); ++i)
      // relative slack covers centres read back from 9-digit text
      detail::require(std::abs(bin_centers[i] - bin_centers[i - 1] - bin_width) <=
                          2e-8 * std::max({1.0, bin_width, std::abs(bin_centers[i]), std::abs(bin_centers[i - 1])}),
                      "G2Curve: bins are not uniform");
  }
};

struct DecayCurve {
  std::vector<double> bin_centers;  // ns after the pulse
  std::vector<double> counts;
  double bin_width = 0.154;  // ns
  double rep_rate_mhz = 0.0;
  std::vector<std::string> warnings;

  double period_ns() const { return 1e3 / rep_rate_mhz; }
  double total() const {
    double s = 0.0;
    for (double c : counts) s += c;
    return s;
  }
};

// Full pairwise correlation: every (a, b) pair with |t_b - t_a| inside the
// window contributes, not only the first stop after each start. Bin k spans
// [(k - 1/2) w, (k + 1/2) w), so the bin count is odd and bin 0 is centred
// on zero delay.
inline G2Curve cross_correlate(const TimestampRecord& record, double bin_width_ns, double window_ns) {
  detail::require(std::isfinite(bin_width_ns) && bin_width_ns > 0.0, "cross_correlate: bin width must be positive");
  detail::require(std::isfinite(window_ns) && window_ns >= bin_width_ns,
                  "cross_correlate: window must be at least one bin");
  const auto& a = record.channel_a;
  const auto& b = record.channel_b;
  if (a.empty() || b.empty()) throw std::invalid_argument("cross_correlate: empty channel");

  const double tpn = record.meta.ticks_per_ns;
  const auto half_bins = static_cast<std::int64_t>(std::floor(window_ns / bin_width_ns + 0.5));
  const double w_ticks = bin_width_ns * tpn;
  const double reach = (static_cast<double>(half_bins) + 0.5) * w_ticks;
  const auto reach_ticks = static_cast<std::int64_t>(std::ceil(reach));
  const std::size_t nbins = static_cast<std::size_t>(2 * half_bins + 1);

  std::vector<double> counts(nbins, 0.0);
  std::size_t lo = 0;
  for (std::int64_t ta : a) {
    while (lo < b.size() && b[lo] < ta - reach_ticks) ++lo;
    for (std::size_t j = lo; j < b.size() && b[j] <= ta + reach_ticks; ++j) {
      const double d = static_cast<double>(b[j] - ta);
      const auto k = static_cast<std::int64_t>(std::floor(d / w_ticks + 0.5));
      if (k < -half_bins || k > half_bins) continue;
      counts[static_cast<std::size_t>(k + half_bins)] += 1.0;
    }
  }

  G2Curve c;
  c.bin_width = bin_width_ns;
  c.acquisition_s = record.meta.program.duration_s;
  c.rate_a = record.count_rate(0);
  c.rate_b = record.count_rate(1);
  const double t_ns = record.duration_ns();
  const double norm = static_cast<double>(a.size()) * static_cast<double>(b.size()) * bin_width_ns / t_ns;
  c.bin_centers.resize(nbins);
  c.values.resize(nbins);
  c.errors.resize(nbins);
  for (std::size_t i = 0; i < nbins; ++i) {
    c.bin_centers[i] = static_cast<double>(static_cast<std::int64_t>(i) - half_bins) * bin_width_ns;
    c.values[i] = counts[i] / norm;
    c.errors[i] = std::sqrt(std::max(counts[i], 1.0)) / norm;
  }
  c.coincidences = std::move(counts);
  if (window_ns > t_ns / 10.0)
    c.warnings.push_back("window exceeds a tenth of the acquisition; the flat normalization is biased");
  return c;
}

// Detection phase relative to the pulse train (pulses at k / rep_rate).
// Jitter pushes a few photons of each pulse to negative phase, which wraps
// to the end of the period; `guard_ns` drops that stretch.
inline DecayCurve decay_histogram(const TimestampRecord& record, double rep_rate_mhz, double bin_width_ns,
                                  double guard_ns = 2.0) {
  if (!(std::isfinite(rep_rate_mhz) && rep_rate_mhz > 0.0))
    throw std::invalid_argument("decay_histogram: repetition rate missing or not positive");
  detail::require(std::isfinite(bin_width_ns) && bin_width_ns > 0.0, "decay_histogram: bin width must be positive");
  detail::require(detail::finite_nonneg(guard_ns), "decay_histogram: guard must be non-negative");
  DecayCurve d;
  d.rep_rate_mhz = rep_rate_mhz;
  d.bin_width = bin_width_ns;
  const double period = d.period_ns();
  const double span = period - guard_ns;
  detail::require(span >= bin_width_ns, "decay_histogram: period too short for the bin width and guard");
  const auto nbins = static_cast<std::size_t>(std::floor(span / bin_width_ns));
  d.counts.assign(nbins, 0.0);
  d.bin_centers.resize(nbins);
  for (std::size_t i = 0; i < nbins; ++i) d.bin_centers[i] = (static_cast<double>(i) + 0.5) * bin_width_ns;
  for (int c = 0; c < 2; ++c) {
    for (std::int64_t tick : record.channel(c)) {
      const double phase = std::fmod(record.to_ns(tick), period);
      const auto k = static_cast<std::size_t>(std::floor(phase / bin_width_ns));
      if (k < nbins) d.counts[k] += 1.0;
    }
  }
  return d;
}

/// Signal fraction rho = S / (S + B).
inline double estimate_rho(double signal_rate, double background_rate) {
  detail::require(detail::finite_nonneg(signal_rate) && detail::finite_nonneg(background_rate),
                  "estimate_rho: rates must be non-negative");
  detail::require(signal_rate + background_rate > 0.0, "estimate_rho: both rates are zero");
  return signal_rate / (signal_rate + background_rate);
}

/// Removes uncorrelated background: g = (g_meas - (1 - rho^2)) / rho^2.
/// Corrected values may dip below zero through noise and are not clipped.
inline G2Curve background_correct(G2Curve curve, double rho) {
  detail::require(std::isfinite(rho) && rho > 0.0 && rho <= 1.0, "background_correct: rho must lie in (0, 1]");
  const double r2 = rho * rho;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    curve.values[i] = (curve.values[i] - (1.0 - r2)) / r2;
    curve.errors[i] /= r2;
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Instrument response

enum class IrfShape { Gaussian, Tabulated };

struct Irf {
  IrfShape shape = IrfShape::Gaussian;
  double fwhm_ps = 0.0;         // Gaussian
  std::vector<double> samples;  // tabulated, on the histogram grid, odd length, centred

  static Irf gaussian(double fwhm_ps) {
    Irf irf;
    irf.fwhm_ps = fwhm_ps;
    irf.validate();
    return irf;
  }
  static Irf delta() { return gaussian(0.0); }

  /// Normalizes the kernel to unit sum.
  static Irf tabulated(std::vector<double> kernel) {
    Irf irf;
    irf.shape = IrfShape::Tabulated;
    double s = 0.0;
    for (double k : kernel) s += k;
    detail::require(s > 0.0, "Irf: tabulated kernel has zero sum");
    for (double& k : kernel) k /= s;
    irf.samples = std::move(kernel);
    irf.validate();
    return irf;
  }

  void validate() const {
    if (shape == IrfShape::Gaussian) {
      detail::require(detail::finite_nonneg(fwhm_ps), "Irf: FWHM must be non-negative");
    } else {
      detail::require(samples.size() % 2 == 1, "Irf: tabulated kernel needs an odd length");
      double s = 0.0;
      for (double k : samples) {
        detail::require(std::isfinite(k) && k >= 0.0, "Irf: kernel must be non-negative");
        s += k;
      }
      detail::require(std::abs(s - 1.0) < 1e-9, "Irf: kernel must sum to one");
    }
  }

  double sigma_ns() const { return units::ps_to_ns(fwhm_ps) / units::kFwhmPerSigma; }
};

/// Widths of independent Gaussian contributions add in quadrature.
inline double combine_fwhm(double a_ps, double b_ps) { return std::hypot(a_ps, b_ps); }

/// Response of a start-stop delay: both detectors jitter independently.
inline Irf hbt_irf(double jitter_fwhm_ps) { return Irf::gaussian(std::sqrt(2.0) * jitter_fwhm_ps); }

/// Response of a detection time measured against the pulse clock.
inline Irf pulsed_irf(double jitter_fwhm_ps, double pulse_width_ps) {
  return Irf::gaussian(combine_fwhm(jitter_fwhm_ps, pulse_width_ps));
}

struct ConvolutionOptions {
  int oversample = 0;            // sub-samples per bin (odd); 0 picks one from the IRF width
  bool bin_integration = false;  // average over the bin instead of sampling its centre
  int max_oversample = 63;
  int min_integration_oversample = 9;  // floor on m when averaging over bins
};

// Linear operator mapping model samples on a fine sub-grid to convolved
// values on the bin grid. Built once per (grid, IRF) so a fit can push the
// model and each Jacobian column through the same kernel.
class ConvolutionPlan {
 public:
  ConvolutionPlan(std::span<const double> centers, const Irf& irf, const ConvolutionOptions& opt = {}) {
    irf.validate();
    detail::require(!centers.empty(), "convolve_model: empty grid");
    n_ = centers.size();
    bw_ = n_ > 1 ? (centers.back() - centers.front()) / static_cast<double>(n_ - 1) : 1.0;
    if (n_ > 1) {
      detail::require(bw_ > 0.0, "convolve_model: grid must be increasing");
      for (std::size_t i = 1; i < n_; ++i)
        detail::require(std::abs(centers[i] - centers[i - 1] - bw_) <= 1e-6 * bw_, "convolve_model: grid is not uniform");
    }
    if (irf.shape == IrfShape::Tabulated) {
      m_ = 1;
      kernel_ = irf.samples;
    } else {
      const double fwhm = units::ps_to_ns(irf.fwhm_ps);
      if (fwhm > 0.0 && bw_ > fwhm / 2.0)
        warnings_.push_back("bin width exceeds half the IRF FWHM; the response is under-resolved on the bin grid");
      int m = opt.oversample;
      if (m <= 0) m = fwhm > 0.0 ? static_cast<int>(std::ceil(bw_ / (fwhm / 4.0))) : 1;
      if (opt.oversample <= 0 && opt.bin_integration) m = std::max(m, opt.min_integration_oversample);
      m = std::clamp(m, 1, std::max(1, opt.max_oversample));
      if (m % 2 == 0) ++m;
      m_ = m;
      const double h = bw_ / m_;
      const double sigma = irf.sigma_ns();
      if (sigma > 0.0) {
        const auto half = static_cast<std::size_t>(std::ceil(5.0 * sigma / h));
        kernel_.resize(2 * half + 1);
        double s = 0.0;
        for (std::size_t j = 0; j < kernel_.size(); ++j) {
          const double x = (static_cast<double>(j) - static_cast<double>(half)) * h;
          kernel_[j] = std::exp(-0.5 * (x / sigma) * (x / sigma));
          s += kernel_[j];
        }
        for (double& k : kernel_) k /= s;
      } else {
        kernel_ = {1.0};
      }
    }
    bin_integration_ = opt.bin_integration;
    half_ = kernel_.size() / 2;
    // Sub-grid point s sits at first - w/2 + (s + 1/2) h for s in
    // [-half, n m + half); the centre of bin i is s = i m + (m - 1) / 2.
    const double h = bw_ / m_;
    const std::size_t total = n_ * m_ + 2 * half_;
    sub_grid_.resize(total);
    for (std::size_t q = 0; q < total; ++q)
      sub_grid_[q] = centers.front() - bw_ / 2.0 + (static_cast<double>(q) - static_cast<double>(half_) + 0.5) * h;
  }

  /// Points where the model must be evaluated, in order.
  const std::vector<double>& sub_grid() const { return sub_grid_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  int oversample() const { return m_; }
  std::size_t size() const { return n_; }

  /// Convolved bin values from model samples on sub_grid().
  std::vector<double> apply(std::span<const double> f) const {
    detail::require(f.size() == sub_grid_.size(), "ConvolutionPlan: sample count does not match the sub-grid");
    std::vector<double> out(n_, 0.0);
    const std::size_t k = kernel_.size();
    auto conv_at = [&](std::size_t s) {  // s indexes the un-padded sub-grid
      double acc = 0.0;
      // y_s = sum_j kernel_j f(x_{s - (j - half)}); padded index s + half - (j - half).
      const std::size_t base = s + 2 * half_;
      for (std::size_t j = 0; j < k; ++j) acc += kernel_[j] * f[base - j];
      return acc;
    };
    for (std::size_t i = 0; i < n_; ++i) {
      if (bin_integration_) {
        double acc = 0.0;
        for (std::size_t q = 0; q < m_; ++q) acc += conv_at(i * m_ + q);
        out[i] = acc / static_cast<double>(m_);
      } else {
        out[i] = conv_at(i * m_ + (m_ - 1) / 2);
      }
    }
    return out;
  }

 private:
  std::size_t n_ = 0;
  double bw_ = 1.0;
  std::size_t m_ = 1;
  bool bin_integration_ = false;
  std::size_t half_ = 0;
  std::vector<double> kernel_;
  std::vector<double> sub_grid_;
  std::vector<std::string> warnings_;
};

struct ConvolvedCurve {
  std::vector<double> values;
  std::vector<std::string> warnings;
};

/// Model convolved with the IRF, reported on the bin centres.
inline ConvolvedCurve convolve_model(const std::function<double(double)>& model, const Irf& irf,
                                     std::span<const double> centers, const ConvolutionOptions& opt = {}) {
  const ConvolutionPlan plan(centers, irf, opt);
  std::vector<double> f(plan.sub_grid().size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = model(plan.sub_grid()[i]);
  return {plan.apply(f), plan.warnings()};
}

}  // namespace photophys
