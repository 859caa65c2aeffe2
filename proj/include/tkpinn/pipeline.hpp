#pragma once

/**
 * @file pipeline.hpp
 * @brief End-to-end steps behind the command-line tool: phantom to dataset,
 *        dataset to parameter maps, maps to an evaluation table.
 */

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tkpinn/config.hpp"
#include "tkpinn/io.hpp"
#include "tkpinn/metrics.hpp"
#include "tkpinn/nlls.hpp"
#include "tkpinn/phantom.hpp"
#include "tkpinn/pinn.hpp"
#include "tkpinn/seeding.hpp"

namespace tkp {

inline constexpr std::string_view kGeneratorVersion = "tkpinn 1.0";

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"pinn-2cxm", "pinn-mesh", "pinn-reduced", "pinn-combined", "nlls"};
  return names;
}

inline bool is_pinn_method(std::string_view m) { return m != "nlls"; }

/// Converts a generated phantom to its on-disk form; metadata records the effective config.
inline io::CurveDataset dataset_from_dro(const DROVolume& v, const RunConfig& cfg) {
  io::CurveDataset d;
  d.dims = v.dims;
  d.grid = v.grid;
  d.aif = io::to_f32(v.aif);
  d.curves = io::to_f32(v.curves);
  std::array<std::vector<float>, 4> truth;
  for (auto& m : truth) m.resize(v.truth.size());
  for (std::size_t i = 0; i < v.truth.size(); ++i) {
    truth[0][i] = static_cast<float>(v.truth[i].Fp);
    truth[1][i] = static_cast<float>(v.truth[i].vp);
    truth[2][i] = static_cast<float>(v.truth[i].ve);
    truth[3][i] = static_cast<float>(v.truth[i].PS);
  }
  d.truth = std::move(truth);
  nlohmann::json meta;
  meta["generator"] = kGeneratorVersion;
  meta["seed"] = cfg.seed;
  meta["config"] = to_json(cfg);
  d.metadata = meta.dump();
  return d;
}

struct FitOutput {
  ParameterMaps maps;
  std::vector<std::vector<pinn::LossRecord>> histories;  ///< per slice (PINN methods)
  std::vector<nlls::Status> status;                      ///< per pixel (NLLS)
  std::vector<double> cost;                              ///< per pixel (NLLS)
};

/// Called with (slice, record) during PINN training.
using SliceProgress = std::function<void(std::size_t, const pinn::LossRecord&)>;

/// Trains one network per z-slice; slice seeds derive from the run seed.
inline FitOutput fit_pinn(const io::CurveDataset& d, pinn::Variant variant, const RunConfig& cfg,
                          const SliceProgress& progress = {}) {
  const std::size_t n = d.grid.n;
  const std::size_t per_slice = d.dims.slice_size();
  FitOutput out{ParameterMaps(d.dims), {}, {}, {}};
  for (std::size_t z = 0; z < d.dims.z; ++z) {
    pinn::TrainingData data;
    data.grid = d.grid;
    data.aif = d.aif_values();
    data.curves.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(per_slice));
    std::vector<double> xs(per_slice), ys(per_slice);
    for (std::size_t j = 0; j < per_slice; ++j) {
      const auto c = d.curve(z * per_slice + j);
      for (std::size_t i = 0; i < n; ++i) data.curves(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c[i];
      xs[j] = static_cast<double>(j % d.dims.x);
      ys[j] = static_cast<double>(j / d.dims.x);
    }
    data.coords = pinn::mesh_coordinates(xs, ys);

    pinn::PinnConfig pc = cfg.pinn;
    pc.variant = variant;
    pc.seed = derive_seed(cfg.seed, "pinn.slice", z);
    pinn::ProgressFn fn;
    if (progress) fn = [&](const pinn::LossRecord& r) { progress(z, r); return true; };
    pinn::FitResult r = pinn::train(data, pc, std::nullopt, fn);
    for (std::size_t j = 0; j < per_slice; ++j) out.maps.set(z * per_slice + j, r.params[j]);
    out.histories.push_back(std::move(r.history));
  }
  return out;
}

inline FitOutput fit_nlls(const io::CurveDataset& d, const RunConfig& cfg, std::size_t threads) {
  ConcentrationSeries aif{d.grid, d.aif_values()};
  nlls::NllsConfig nc = cfg.nlls;
  nc.seed = derive_seed(cfg.seed, "nlls");
  const std::vector<double> curves = d.curve_values();
  nlls::VolumeFit v = nlls::fit_volume(curves, aif, nc, threads);
  FitOutput out{ParameterMaps::from_params(d.dims, v.params), {}, std::move(v.status), std::move(v.cost)};
  return out;
}

inline FitOutput fit_dataset(const io::CurveDataset& d, std::string_view method, const RunConfig& cfg,
                             std::size_t threads, const SliceProgress& progress = {}) {
  if (method == "nlls") return fit_nlls(d, cfg, threads);
  if (method == "pinn-2cxm") return fit_pinn(d, pinn::Variant::TwoCXM, cfg, progress);
  if (method == "pinn-mesh") return fit_pinn(d, pinn::Variant::TwoCXMMesh, cfg, progress);
  if (method == "pinn-reduced") return fit_pinn(d, pinn::Variant::Reduced, cfg, progress);
  if (method == "pinn-combined") return fit_pinn(d, pinn::Variant::Combined, cfg, progress);
  throw InvalidInput("unknown method '" + std::string(method) + "'");
}

/// Effective settings relevant to one fit, as stored in the map file.
inline std::string fit_snapshot(std::string_view method, const RunConfig& cfg) {
  nlohmann::json full = to_json(cfg);
  nlohmann::json j;
  j["method"] = method;
  j["seed"] = cfg.seed;
  j[is_pinn_method(method) ? "pinn" : "nlls"] = full[is_pinn_method(method) ? "pinn" : "nlls"];
  return j.dump();
}

inline io::MapResult map_result(const FitOutput& f, std::string_view method, const RunConfig& cfg) {
  io::MapResult r = io::MapResult::from(f.maps);
  r.method = method;
  r.config = fit_snapshot(method, cfg);
  r.seed = cfg.seed;
  return r;
}

/// Loss CSV for one slice: `iter,L_C,L_r,L_b,L_reg,total,mean_Fp,mean_vp,mean_ve,mean_PS`.
inline void write_loss_csv(std::ostream& out, const std::vector<pinn::LossRecord>& history) {
  out << "iter,L_C,L_r,L_b,L_reg,total,mean_Fp,mean_vp,mean_ve,mean_PS\n";
  for (const auto& r : history) {
    out << r.iteration;
    for (double v : {r.loss.data, r.loss.residual, r.loss.boundary, r.loss.regularization, r.loss.total, r.mean_eta.Fp,
                     r.mean_eta.vp, r.mean_eta.ve, r.mean_eta.PS}) {
      out << ',' << io::detail::format_number(v);
    }
    out << '\n';
  }
}

/// `loss.csv` for a single slice; `loss.z0.csv`, `loss.z1.csv`, ... otherwise.
inline std::string slice_path(const std::string& path, std::size_t slice, std::size_t slices) {
  if (slices == 1) return path;
  const std::string tag = ".z" + std::to_string(slice);
  const std::size_t dot = path.rfind('.');
  const std::size_t sep = path.find_last_of('/');
  if (dot == std::string::npos || (sep != std::string::npos && dot < sep)) return path + tag;
  return path.substr(0, dot) + tag + path.substr(dot);
}

/// Evaluation CSV: `method,param,NMSE,SSIM` with rows Fp, vp, ve, PS, All.
inline void write_eval_csv(std::ostream& out, std::string_view method, const MapComparison& c) {
  out << "method,param,NMSE,SSIM\n";
  for (std::size_t k = 0; k < 4; ++k) {
    out << method << ',' << kParameterNames[k] << ',' << io::detail::format_number(c.nmse[k]) << ','
        << io::detail::format_number(c.ssim[k]) << '\n';
  }
  out << method << ",All," << io::detail::format_number(c.overall_nmse) << ','
      << io::detail::format_number(c.overall_ssim) << '\n';
}

}  // namespace tkp
