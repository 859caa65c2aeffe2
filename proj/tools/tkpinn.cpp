// tkpinn: phantom generation, kinetic fitting, evaluation, rendering and unit conversion.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tkpinn/config.hpp"
#include "tkpinn/io.hpp"
#include "tkpinn/metrics.hpp"
#include "tkpinn/pipeline.hpp"
#include "tkpinn/runtime.hpp"

namespace {

using namespace tkp;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "global seed (overrides the config file)");
}

RunConfig base_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path + "'");
}

/// Text artifacts carry their provenance in `<path>.meta.json`.
void write_meta(const std::string& path, const nlohmann::json& meta) { write_text(path + ".meta.json", meta.dump(2) + "\n"); }

/// Embedded metadata is JSON when written by this tool; anything else is kept as a string.
nlohmann::json as_json(const std::string& text) {
  return nlohmann::json::accept(text) ? nlohmann::json::parse(text) : nlohmann::json(text);
}

double parse_snr(const std::string& s) {
  if (s == "inf" || s == "Inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !(v > 0)) throw ConfigError("--snr must be a positive number or 'inf'");
  return v;
}

// ------------------------------------------------------------------ gen-dro

struct GenOptions {
  Common common;
  std::string out, csv;
  std::optional<std::string> snr, snr_reference;
  std::optional<std::size_t> substeps;
  bool mini = false;
  std::optional<double> aif_t0, aif_alpha, aif_beta, aif_peak;
};

int run_gen(const GenOptions& o) {
  RunConfig cfg = base_config(o.common);
  if (o.snr) cfg.phantom.snr = parse_snr(*o.snr);
  if (o.snr_reference) cfg.phantom.snr_reference = *o.snr_reference == "mean" ? SnrReference::Mean : SnrReference::Peak;
  if (o.substeps) cfg.phantom.substeps = *o.substeps;
  if (o.mini) cfg.mini = true;
  if (o.aif_t0 || o.aif_alpha || o.aif_beta || o.aif_peak) {
    const auto& a = cfg.phantom.aif;
    cfg.phantom.aif = GammaVariateAif::with_peak(o.aif_peak.value_or(a.peak_value()), o.aif_t0.value_or(a.t0),
                                                 o.aif_alpha.value_or(a.alpha), o.aif_beta.value_or(a.beta));
  }
  cfg.validate();

  const DROVolume v = generate_dro(cfg.dro());
  const io::CurveDataset d = dataset_from_dro(v, cfg);
  io::write_dataset(o.out, d);
  if (!o.csv.empty()) {
    std::ostringstream s;
    io::write_curves_csv(s, d);
    write_text(o.csv, s.str());
    write_meta(o.csv, as_json(d.metadata));
  }
  std::printf("wrote %s: %zux%zux%zu pixels, %zu time points, SNR %s\n", o.out.c_str(), d.dims.x, d.dims.y, d.dims.z,
              d.grid.n, std::isinf(cfg.phantom.snr) ? "inf" : std::to_string(cfg.phantom.snr).c_str());
  return kOk;
}

// ---------------------------------------------------------------------- fit

struct FitOptions {
  Common common;
  std::string method, in, out, loss_csv, maps_csv, status_csv;
  std::optional<std::size_t> iterations;
  std::size_t threads = 0;
  bool quiet = false;
};

int run_fit(const FitOptions& o) {
  RunConfig cfg = base_config(o.common);
  if (o.iterations) cfg.pinn.iterations = *o.iterations;
  cfg.validate();
  const std::size_t threads = o.threads ? o.threads : std::max(1u, std::thread::hardware_concurrency());

  const io::CurveDataset d = io::read_dataset(o.in);
  SliceProgress progress;
  if (!o.quiet) {
    progress = [](std::size_t z, const pinn::LossRecord& r) {
      std::printf("slice %zu  iter %6zu  loss %.6e  (data %.3e, residual %.3e)\n", z, r.iteration, r.loss.total,
                  r.loss.data, r.loss.residual);
      std::fflush(stdout);
    };
  }
  const FitOutput f = fit_dataset(d, o.method, cfg, threads, progress);
  const io::MapResult result = map_result(f, o.method, cfg);
  io::write_maps(o.out, result);

  const nlohmann::json meta = as_json(result.config);
  if (is_pinn_method(o.method)) {
    const std::string loss_path = o.loss_csv.empty() ? o.out + ".loss.csv" : o.loss_csv;
    for (std::size_t z = 0; z < f.histories.size(); ++z) {
      std::ostringstream s;
      write_loss_csv(s, f.histories[z]);
      const std::string path = slice_path(loss_path, z, f.histories.size());
      write_text(path, s.str());
      nlohmann::json m = meta;
      m["slice"] = z;
      write_meta(path, m);
    }
  } else {
    std::size_t counts[4] = {0, 0, 0, 0};
    for (auto st : f.status) ++counts[static_cast<int>(st)];
    std::printf("nlls: %zu converged, %zu max-iterations, %zu degenerate, %zu failed\n", counts[0], counts[1],
                counts[2], counts[3]);
    if (!o.status_csv.empty()) {
      std::ostringstream s;
      s << "pixel,status,cost\n";
      for (std::size_t i = 0; i < f.status.size(); ++i) {
        s << i << ',' << nlls::to_string(f.status[i]) << ',' << io::detail::format_number(f.cost[i]) << '\n';
      }
      write_text(o.status_csv, s.str());
      write_meta(o.status_csv, meta);
    }
  }
  if (!o.maps_csv.empty()) {
    std::ostringstream s;
    io::write_maps_csv(s, f.maps);
    write_text(o.maps_csv, s.str());
    write_meta(o.maps_csv, meta);
  }
  std::printf("wrote %s (%s)\n", o.out.c_str(), o.method.c_str());
  return kOk;
}

// --------------------------------------------------------------------- eval

struct EvalOptions {
  Common common;
  std::string est, gt, out;
};

int run_eval(const EvalOptions& o) {
  RunConfig cfg = base_config(o.common);
  cfg.validate();
  const io::MapResult est = io::read_maps(o.est);
  const io::CurveDataset gt = io::read_dataset(o.gt);
  if (!gt.truth) throw InvalidInput("dataset '" + o.gt + "' carries no ground-truth maps");
  const MapComparison c = compare_maps(est.parameter_maps(), gt.truth_maps(), cfg.metrics);

  std::ostringstream s;
  write_eval_csv(s, est.method, c);
  write_text(o.out, s.str());
  nlohmann::json meta;
  meta["estimate"] = as_json(est.config);
  meta["ground_truth"] = as_json(gt.metadata);
  meta["metrics"] = to_json(cfg)["metrics"];
  meta["seed"] = cfg.seed;
  write_meta(o.out, meta);
  std::cout << s.str();
  return kOk;
}

// ------------------------------------------------------------------- render

struct RenderOptions {
  std::string maps, param, out;
  std::vector<double> range;
};

int run_render(const RenderOptions& o) {
  const std::vector<unsigned char> bytes = io::detail::read_file(o.maps);
  ParameterMaps maps(VolumeDims{1, 1, 1});
  nlohmann::json meta;
  if (bytes.size() >= 4 && std::string(bytes.begin(), bytes.begin() + 4) == "PQD1") {
    const io::CurveDataset d = io::decode_dataset(bytes);
    if (!d.truth) throw InvalidInput("dataset '" + o.maps + "' carries no ground-truth maps");
    maps = d.truth_maps();
    meta["source"] = as_json(d.metadata);
  } else {
    const io::MapResult m = io::decode_maps(bytes);
    maps = m.parameter_maps();
    meta["source"] = as_json(m.config);
  }
  std::optional<std::pair<double, double>> range;
  if (!o.range.empty()) range = std::make_pair(o.range[0], o.range[1]);
  const std::size_t k = parameter_index(o.param);
  const io::Heatmap h = io::export_heatmap(maps[k], maps.dims, o.out, range);
  meta["param"] = o.param;
  meta["range"] = {h.lo, h.hi};
  write_meta(o.out, meta);
  if (h.degenerate) std::fprintf(stderr, "warning: %s map has zero range, rendered mid-gray\n", o.param.c_str());
  std::printf("wrote %s (%zux%zu, range [%g, %g])\n", o.out.c_str(), h.width, h.height, h.lo, h.hi);
  return kOk;
}

// ------------------------------------------------------------------ convert

struct ConvertOptions {
  double fp = 0.0;
  std::optional<double> vp;
  ConversionConstants consts;
};

int run_convert(const ConvertOptions& o) {
  BloodUnits b{};
  try {
    b = to_blood_units(o.fp, o.vp.value_or(0.0), o.consts);
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  std::printf("Fb %.5g mL/min/g\n", b.Fb);
  if (o.vp) std::printf("vb %.5g mL/g\n", b.vb);
  return kOk;
}

// --------------------------------------------------------------- csv tools

int run_import(const std::string& csv, const std::string& out) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot open '" + csv + "'");
  io::CurveDataset d = io::read_curves_csv(in);
  nlohmann::json meta;
  meta["generator"] = kGeneratorVersion;
  meta["source"] = "csv";
  d.metadata = meta.dump();
  io::write_dataset(out, d);
  std::printf("wrote %s: %zu curves, %zu time points\n", out.c_str(), d.pixels(), d.grid.n);
  return kOk;
}

int run_export(const std::string& in, const std::string& out) {
  const std::vector<unsigned char> bytes = io::detail::read_file(in);
  std::ostringstream s;
  nlohmann::json meta;
  if (bytes.size() >= 4 && std::string(bytes.begin(), bytes.begin() + 4) == "PQM1") {
    const io::MapResult m = io::decode_maps(bytes);
    io::write_maps_csv(s, m.parameter_maps());
    meta = as_json(m.config);
  } else {
    const io::CurveDataset d = io::decode_dataset(bytes);
    io::write_curves_csv(s, d);
    meta = as_json(d.metadata);
  }
  write_text(out, s.str());
  write_meta(out, meta);
  std::printf("wrote %s\n", out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tkp::tune_allocator();
  CLI::App app{"Tracer-kinetic parameter estimation for myocardial perfusion MRI"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tkp::kGeneratorVersion));

  GenOptions gen;
  auto* g = app.add_subcommand("gen-dro", "generate the digital reference phantom");
  add_common(g, gen.common);
  g->add_option("--out", gen.out, "output dataset (.pqd)")->required();
  g->add_option("--snr", gen.snr, "signal-to-noise ratio, or 'inf' for noiseless");
  g->add_option("--snr-reference", gen.snr_reference, "SNR denominator")->check(CLI::IsMember({"peak", "mean"}));
  g->add_option("--substeps", gen.substeps, "RK4 substeps per sample for the simulation")->check(CLI::PositiveNumber);
  g->add_flag("--mini", gen.mini, "16-block desk-scale phantom");
  g->add_option("--aif-t0", gen.aif_t0, "AIF onset (min)");
  g->add_option("--aif-alpha", gen.aif_alpha, "AIF gamma-variate shape");
  g->add_option("--aif-beta", gen.aif_beta, "AIF gamma-variate scale (min)");
  g->add_option("--aif-peak", gen.aif_peak, "AIF peak concentration (M)");
  g->add_option("--csv", gen.csv, "also export curves as CSV");

  FitOptions fit;
  auto* f = app.add_subcommand("fit", "estimate kinetic parameter maps");
  add_common(f, fit.common);
  f->add_option("--method", fit.method, "fitting method")->required()->check(CLI::IsMember(tkp::method_names()));
  f->add_option("--in", fit.in, "input dataset")->required();
  f->add_option("--out", fit.out, "output maps (.pqm)")->required();
  f->add_option("--iterations", fit.iterations, "PINN training iterations")->check(CLI::PositiveNumber);
  f->add_option("--threads", fit.threads, "NLLS worker threads (default: all cores)");
  f->add_option("--loss-csv", fit.loss_csv, "PINN loss history (default: <out>.loss.csv)");
  f->add_option("--maps-csv", fit.maps_csv, "also export the maps as CSV");
  f->add_option("--status-csv", fit.status_csv, "NLLS per-pixel status");
  f->add_flag("--quiet", fit.quiet, "suppress training progress");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "NMSE and SSIM of estimated maps against ground truth");
  add_common(e, ev.common);
  e->add_option("--est", ev.est, "estimated maps (.pqm)")->required();
  e->add_option("--gt-dataset", ev.gt, "dataset with ground truth (.pqd)")->required();
  e->add_option("--out", ev.out, "output CSV")->required();

  RenderOptions rd;
  auto* r = app.add_subcommand("render", "write a parameter map as a grayscale image");
  r->add_option("--maps", rd.maps, "maps (.pqm) or dataset with ground truth (.pqd)")->required();
  r->add_option("--param", rd.param, "parameter")->required()->check(CLI::IsMember({"Fp", "vp", "ve", "PS"}));
  r->add_option("--out", rd.out, "output image (.pgm or .png)")->required();
  r->add_option("--range", rd.range, "display range: MIN MAX")->expected(2);

  ConvertOptions cv;
  auto* c = app.add_subcommand("convert", "plasma-based values to blood-based units");
  c->add_option("--fp", cv.fp, "plasma flow (mL/min/mL)")->required();
  c->add_option("--vp", cv.vp, "plasma volume fraction");
  c->add_option("--hct", cv.consts.hct, "haematocrit")->capture_default_str();
  c->add_option("--rho", cv.consts.rho, "tissue density (g/mL)")->capture_default_str();

  std::string csv_in, csv_out;
  auto* im = app.add_subcommand("import-csv", "curve CSV (time, aif, one column per pixel) to a dataset");
  im->add_option("--csv", csv_in, "input CSV")->required();
  im->add_option("--out", csv_out, "output dataset")->required();
  std::string ex_in, ex_out;
  auto* ex = app.add_subcommand("export-csv", "dataset curves or maps to CSV");
  ex->add_option("--in", ex_in, "dataset or maps file")->required();
  ex->add_option("--out", ex_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*f) return run_fit(fit);
    if (*e) return run_eval(ev);
    if (*r) return run_render(rd);
    if (*c) return run_convert(cv);
    if (*im) return run_import(csv_in, csv_out);
    if (*ex) return run_export(ex_in, ex_out);
  } catch (const tkp::ConfigError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const tkp::NumericalFailure& err) {
    std::fprintf(stderr, "numerical failure: %s\n", err.what());
    return kNumerical;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kData;
  }
  return kUsage;
}
