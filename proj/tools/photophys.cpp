// photophys: simulate, correlate, fit and report single-emitter photon data.
//
// Exit status: 0 success, 1 input error, 2 a fit did not converge,
// 3 the simulation would exceed the event cap.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "photophys/config.hpp"
#include "photophys/io.hpp"
#include "photophys/pipeline.hpp"
#include "photophys/report.hpp"

namespace fs = std::filesystem;
using namespace photophys;

namespace {

enum Exit { kOk = 0, kInput = 1, kNotConverged = 2, kSizing = 3 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;

  std::optional<RunConfig> load() const {
    if (config.empty()) return std::nullopt;
    RunConfig c = load_config(config);
    if (seed) c.seed = *seed;
    return c;
  }
  std::string out_dir(const std::optional<RunConfig>& cfg) const {
    if (!out.empty()) return out;
    return cfg ? cfg->output_dir : "out";
  }
};

std::string stem_of(const std::string& path) {
  std::string s = fs::path(path).filename().string();
  for (const char* ext : {".ppts", ".g2.csv", ".decay.csv", ".csv", ".fit.json", ".json"}) {
    const std::string e = ext;
    if (s.size() > e.size() && s.compare(s.size() - e.size(), e.size(), e) == 0) return s.substr(0, s.size() - e.size());
  }
  return s;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

int cmd_simulate(const Globals& g) {
  const auto cfg = g.load();
  if (!cfg) throw InputError("simulate: --config is required");
  const std::string out = g.out_dir(cfg);
  const auto jobs = plan_runs(*cfg);
  const auto records = parallel_map(jobs, g.threads, [&](const SimulationJob& j) { return run_job(j, *cfg); });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const std::string path = join(out, jobs[i].name + ".ppts");
    io::write_record(path, records[i]);
    std::printf("%s: %zu + %zu events, %.6g + %.6g counts/s\n", path.c_str(), records[i].channel_a.size(),
                records[i].channel_b.size(), records[i].count_rate(0), records[i].count_rate(1));
  }
  io::write_json(join(out, cfg->label + ".config.json"), to_json(*cfg));
  return kOk;
}

struct CorrelateFlags {
  std::vector<std::string> inputs;
  std::optional<double> bin, window, rho, rep, decay_bin, guard;
  bool decay = false;
};

int cmd_correlate(const Globals& g, CorrelateFlags f) {
  const auto cfg = g.load();
  AnalysisConfig a = cfg ? cfg->analysis : AnalysisConfig{};
  if (f.bin) a.bin_width_ns = *f.bin;
  if (f.window) a.window_ns = *f.window;
  if (f.rho) a.rho = *f.rho;
  if (f.decay_bin) a.decay_bin_ns = *f.decay_bin;
  if (f.guard) a.decay_guard_ns = *f.guard;
  detail::validated("correlate", [&] { a.validate(); });
  std::sort(f.inputs.begin(), f.inputs.end());
  const std::string out = g.out_dir(cfg);
  struct Done {
    std::string path;
  };
  parallel_map(f.inputs, g.threads, [&](const std::string& in) {
    const TimestampRecord rec = io::read_record(in);
    const json source = to_json(rec.meta);
    if (f.decay) {
      const double rep = f.rep ? *f.rep : rec.meta.program.rep_rate_mhz;
      const DecayCurve d = decay_histogram(rec, rep, a.decay_bin_ns, a.decay_guard_ns);
      const std::string path = join(out, stem_of(in) + ".decay.csv");
      io::write_curve(path, d, source, to_json(a));
      return Done{path};
    }
    const G2Curve c = correlate_record(rec, a);
    const std::string path = join(out, stem_of(in) + ".g2.csv");
    io::write_curve(path, c, source, to_json(a));
    return Done{path};
  });
  for (const auto& in : f.inputs)
    std::printf("%s\n", join(out, stem_of(in) + (f.decay ? ".decay.csv" : ".g2.csv")).c_str());
  return kOk;
}

struct FitFlags {
  std::vector<std::string> inputs;
  std::string scheme;
  std::optional<double> irf_fwhm, t_min, eta;
  bool extrapolate = false;
};

int cmd_fit(const Globals& g, FitFlags f) {
  const auto cfg = g.load();
  AnalysisConfig a = cfg ? cfg->analysis : AnalysisConfig{};
  if (f.irf_fwhm) a.irf_fwhm_ps = *f.irf_fwhm;
  if (f.t_min) a.t_min_ns = *f.t_min;
  if (f.eta) a.eta = *f.eta;
  detail::validated("fit", [&] { a.validate(); });
  Scheme scheme = cfg ? cfg->emitter.scheme() : Scheme::TwoLevel;
  if (!f.scheme.empty()) detail::validated("--scheme", [&] { scheme = scheme_from_string(f.scheme); });
  std::sort(f.inputs.begin(), f.inputs.end());
  const std::string out = g.out_dir(cfg);

  struct Fitted {
    FitResult fit;
    std::optional<G2Curve> curve;
    double power_uw = 0.0;
    DetectionChain chain;
  };
  auto results = parallel_map(f.inputs, g.threads, [&](const std::string& in) {
    Fitted r;
    const json source = io::curve_source(in);
    std::string label;
    if (source.is_object()) {
      const RecordMeta meta = record_meta_from_json(source, io::sidecar_path(in) + ".source");
      label = meta.label;
      r.power_uw = meta.program.power_uw;
      r.chain = meta.chain;
    }
    const DetectionChain& chain = cfg ? cfg->chain : r.chain;
    if (io::curve_kind(in) == "decay") {
      LifetimeOptions opt;
      opt.t_min = a.t_min_ns;
      r.fit = fit_lifetime(io::read_decay_curve(in), opt);
      r.fit.label = label;
    } else {
      r.curve = io::read_g2_curve(in);
      r.fit = fit_curve(*r.curve, analysis_irf(a, chain), scheme, r.power_uw, label);
    }
    io::write_json(join(out, stem_of(in) + ".fit.json"), to_json(r.fit));
    return r;
  });

  int status = kOk;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const FitResult& fit = results[i].fit;
    std::printf("%s: %s fit, %s", join(out, stem_of(f.inputs[i]) + ".fit.json").c_str(), fit.kind.c_str(),
                fit.converged ? "converged" : "NOT converged");
    for (const auto& p : fit.params) std::printf(", %s = %.6g +- %.2g", p.name.c_str(), p.value, p.error);
    std::printf("\n");
    if (!fit.converged) {
      std::fprintf(stderr, "%s: %s (%d iterations)\n", f.inputs[i].c_str(), fit.message.c_str(), fit.iterations);
      status = kNotConverged;
    }
  }

  if (f.extrapolate) {
    std::vector<FitResult> g2;
    std::vector<G2Curve> curves;
    std::vector<double> powers;
    std::string label;
    DetectionChain chain;
    for (const auto& r : results) {
      if (!r.curve) continue;
      g2.push_back(r.fit);
      curves.push_back(*r.curve);
      powers.push_back(r.power_uw);
      label = r.fit.label;
      chain = cfg ? cfg->chain : r.chain;
    }
    if (g2.size() < 3) throw InputError("fit --extrapolate: need g2 curves at 3 or more powers");
    const SweepAnalysis s = analyze_fits(g2, curves, powers, scheme, chain, a.eta, label);
    const std::string base = label.empty() ? "sweep" : label;
    for (const auto* fit : {&s.lambda1, &s.lambda2, &s.saturation_fit, &s.quantum_efficiency}) {
      if (!*fit) continue;
      const std::string path = join(out, base + "." + (*fit)->kind + ".json");
      io::write_json(path, to_json(**fit));
      std::printf("%s: %s", path.c_str(), (*fit)->kind.c_str());
      for (const auto& p : (*fit)->params) std::printf(", %s = %.6g +- %.2g", p.name.c_str(), p.value, p.error);
      std::printf("\n");
      if (!(*fit)->converged) status = kNotConverged;
    }
    if (s.lambda2)
      std::printf("r31_0 = %.4g MHz, r23 = %.4g MHz, r23/r31_0 = %.3g\n", s.lambda2->derived.at("r31_0_mhz"),
                  s.lambda2->derived.at("r23_mhz"), s.lambda2->derived.at("shelving_ratio"));
  }
  return status;
}

int cmd_report(const Globals& g, std::vector<std::string> inputs) {
  if (inputs.empty()) throw InputError("report: no fit files given");
  std::sort(inputs.begin(), inputs.end());
  std::vector<FitResult> fits;
  for (const auto& in : inputs) fits.push_back(io::read_fit(in));
  EmitterReport r;
  try {
    r = build_report(fits);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  std::cout << render_table({r});
  for (const auto& w : r.warnings) std::cout << "warning: " << w << "\n";
  for (const auto& gap : r.gaps) std::cout << "missing: " << gap << "\n";
  const auto cfg = g.load();
  const std::string out = g.out_dir(cfg);
  io::write_json(join(out, (r.label.empty() ? "emitter" : r.label) + ".report.json"), to_json(r));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulate, correlate and fit single-emitter photon data"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "run configuration (JSON)");
  app.add_option("--seed", g.seed, "override the configured seed");
  app.add_option("--out", g.out, "output directory (default: config output_dir, else ./out)");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);

  auto* sim = app.add_subcommand("simulate", "write timestamp records for every power of the config");

  CorrelateFlags cf;
  auto* cor = app.add_subcommand("correlate", "g2 or decay histograms from timestamp records");
  cor->add_option("inputs", cf.inputs, "record files")->required();
  cor->add_option("--bin", cf.bin, "bin width in ns (default 0.154)");
  cor->add_option("--window", cf.window, "largest |delay| in ns");
  cor->add_option("--rho", cf.rho, "background-correct with signal fraction rho");
  cor->add_flag("--decay", cf.decay, "decay histogram against the pulse clock instead of g2");
  cor->add_option("--rep", cf.rep, "repetition rate in MHz (default: from the record)");
  cor->add_option("--decay-bin", cf.decay_bin, "decay bin width in ns");
  cor->add_option("--guard", cf.guard, "ns dropped at the end of each period");

  FitFlags ff;
  auto* fit = app.add_subcommand("fit", "fit g2 or decay curves");
  fit->add_option("inputs", ff.inputs, "curve files")->required();
  fit->add_option("--scheme", ff.scheme, "two-level or three-level");
  fit->add_option("--irf-fwhm", ff.irf_fwhm, "IRF FWHM in ps (default: HBT response of the detector jitter)");
  fit->add_option("--tmin", ff.t_min, "lifetime fit start in ns (default 0.5)");
  fit->add_option("--eta", ff.eta, "collection efficiency for the quantum-efficiency fit");
  fit->add_flag("--extrapolate", ff.extrapolate, "extrapolate the decay rates to zero power");

  std::vector<std::string> report_inputs;
  auto* rep = app.add_subcommand("report", "summary table from fit results");
  rep->add_option("inputs", report_inputs, "fit JSON files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInput;
  }

  try {
    if (*sim) return cmd_simulate(g);
    if (*cor) return cmd_correlate(g, cf);
    if (*fit) return cmd_fit(g, ff);
    if (*rep) return cmd_report(g, report_inputs);
  } catch (const SizingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kSizing;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInput;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInput;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInput;
  }
  return kInput;
}
