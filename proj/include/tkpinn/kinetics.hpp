#pragma once

/**
 * @file kinetics.hpp
 * @brief Two-compartment exchange model (2CXM): types, forward solver,
 *        pointwise residuals and plasma-to-blood unit conversion.
 *
 * The model couples a plasma compartment (Cp) and an interstitial
 * compartment (Ce) driven by the arterial input function (AIF):
 *
 *   vp dCp/dt = Fp (Caif - Cp) + PS (Ce - Cp)
 *   ve dCe/dt = PS (Cp - Ce)
 *   Cmyo      = vp Cp + ve Ce
 *
 * Concentrations are in molar units, times in minutes, flows in mL/min/mL.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tkpinn/errors.hpp"

namespace tkp {

/// The four 2CXM parameters of one pixel.
struct KineticParams {
  double Fp = 1.0;  ///< plasma flow, mL/min/mL
  double vp = 0.05; ///< fractional plasma volume
  double ve = 0.2;  ///< fractional interstitial volume
  double PS = 1.0;  ///< permeability-surface-area product, mL/min/mL

  bool valid() const noexcept {
    return std::isfinite(Fp) && std::isfinite(vp) && std::isfinite(ve) && std::isfinite(PS) &&
           Fp > 0 && vp > 0 && ve > 0 && PS > 0;
  }

  /// Physiological plausibility flag. Never an error.
  bool volume_warning() const noexcept { return vp + ve > 1.0; }

  friend bool operator==(const KineticParams&, const KineticParams&) = default;
};

/// Uniform sampling grid; sample i sits at t0 + i*dt.
struct TimeGrid {
  double t0 = 0.0;
  double dt = 0.02;
  std::size_t n = 100;

  double at(std::size_t i) const noexcept { return t0 + static_cast<double>(i) * dt; }
  /// Time span covered by n samples of width dt.
  double span() const noexcept { return static_cast<double>(n) * dt; }

  void validate() const {
    if (!(dt > 0) || !std::isfinite(dt) || !std::isfinite(t0)) {
      throw InvalidInput("time grid requires a finite positive step");
    }
    if (n < 2) throw InvalidInput("time grid requires at least two samples");
  }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

  /// Builds a grid from explicit sample times, rejecting non-uniform spacing.
  static TimeGrid from_samples(std::span<const double> times, double rel_tol = 1e-6) {
    if (times.size() < 2) throw InvalidInput("time grid requires at least two samples");
    const double dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
    if (!(dt > 0)) throw InvalidInput("sample times must be increasing");
    for (std::size_t i = 1; i < times.size(); ++i) {
      if (std::abs((times[i] - times[i - 1]) - dt) > rel_tol * dt) {
        throw InvalidInput("non-uniform time grid at sample " + std::to_string(i));
      }
    }
    return TimeGrid{times.front(), dt, times.size()};
  }
};

/// Concentration samples on a uniform grid.
struct ConcentrationSeries {
  TimeGrid grid;
  std::vector<double> values;

  ConcentrationSeries() = default;
  ConcentrationSeries(TimeGrid g, std::vector<double> v) : grid(g), values(std::move(v)) {}

  void validate() const {
    grid.validate();
    if (values.size() != grid.n) throw InvalidInput("series length does not match its time grid");
    for (double v : values) {
      if (!std::isfinite(v)) throw InvalidInput("series contains non-finite values");
    }
  }

  double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }
};

struct CompartmentSolution {
  ConcentrationSeries plasma;
  ConcentrationSeries interstitial;
  ConcentrationSeries tissue;
};

/// Haematocrit and tissue density used for plasma-to-blood conversion.
struct ConversionConstants {
  double hct = 0.45;
  double rho = 1.05;  ///< g/mL

  void validate() const {
    if (!(hct >= 0.0 && hct < 1.0)) throw InvalidInput("haematocrit must lie in [0, 1)");
    if (!(rho > 0.0)) throw InvalidInput("tissue density must be positive");
  }
};

/// Largest |eigenvalue| of the homogeneous 2CXM system matrix, 1/min.
inline double stiffness(const KineticParams& p) noexcept {
  const double a = -(p.Fp + p.PS) / p.vp;
  const double b = p.PS / p.vp;
  const double c = p.PS / p.ve;
  const double d = -p.PS / p.ve;
  const double tr = a + d;
  const double det = a * d - b * c;
  const double disc = std::sqrt(std::max(tr * tr - 4.0 * det, 0.0));
  return std::max(std::abs(tr - disc), std::abs(tr + disc)) * 0.5;
}

/// Micro-step budget: at least `substeps`, and enough that h * stiffness <= kMaxStepStiffness.
inline constexpr double kMaxStepStiffness = 0.5;

inline std::size_t effective_substeps(const KineticParams& p, double dt, std::size_t substeps) {
  const double needed = std::ceil(dt * stiffness(p) / kMaxStepStiffness);
  return std::max<std::size_t>(substeps, static_cast<std::size_t>(std::max(needed, 1.0)));
}

/// Classical RK4 over exactly `micro` steps per grid interval, from Cp = Ce = 0.
/// Inputs are not validated; see solve_2cxm.
inline CompartmentSolution integrate_2cxm(const KineticParams& params, const ConcentrationSeries& aif,
                                          std::size_t micro) {
  const TimeGrid& grid = aif.grid;
  const std::size_t n = grid.n;
  const double h = grid.dt / static_cast<double>(micro);

  const double kpp = -(params.Fp + params.PS) / params.vp;
  const double kpe = params.PS / params.vp;
  const double kpa = params.Fp / params.vp;
  const double kep = params.PS / params.ve;

  std::vector<double> cp(n, 0.0), ce(n, 0.0), cmyo(n, 0.0);
  double yp = 0.0, ye = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double a0 = aif.values[i];
    const double slope = (aif.values[i + 1] - a0) / grid.dt;
    for (std::size_t k = 0; k < micro; ++k) {
      const double s = static_cast<double>(k) * h;
      const double u0 = a0 + slope * s;
      const double um = a0 + slope * (s + 0.5 * h);
      const double u1 = a0 + slope * (s + h);

      const double k1p = kpp * yp + kpe * ye + kpa * u0;
      const double k1e = kep * (yp - ye);
      const double p2 = yp + 0.5 * h * k1p, e2 = ye + 0.5 * h * k1e;
      const double k2p = kpp * p2 + kpe * e2 + kpa * um;
      const double k2e = kep * (p2 - e2);
      const double p3 = yp + 0.5 * h * k2p, e3 = ye + 0.5 * h * k2e;
      const double k3p = kpp * p3 + kpe * e3 + kpa * um;
      const double k3e = kep * (p3 - e3);
      const double p4 = yp + h * k3p, e4 = ye + h * k3e;
      const double k4p = kpp * p4 + kpe * e4 + kpa * u1;
      const double k4e = kep * (p4 - e4);

      yp += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
      ye += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
    }
    if (!std::isfinite(yp) || !std::isfinite(ye)) {
      throw NumericalFailure("2CXM integration produced a non-finite value", i + 1);
    }
    cp[i + 1] = yp;
    ce[i + 1] = ye;
  }
  for (std::size_t i = 0; i < n; ++i) cmyo[i] = params.vp * cp[i] + params.ve * ce[i];

  return CompartmentSolution{ConcentrationSeries(grid, std::move(cp)),
                             ConcentrationSeries(grid, std::move(ce)),
                             ConcentrationSeries(grid, std::move(cmyo))};
}

/**
 * @brief Integrates the 2CXM with classical RK4 from Cp = Ce = 0.
 *
 * Each grid interval is split into micro-steps; the AIF is linearly
 * interpolated at stage times. `substeps` is a lower bound on the number of
 * micro-steps: stiff parameter sets (small vp with large Fp + PS) are refined
 * further so the explicit scheme stays inside its accurate region.
 * PS = 0 is accepted and decouples the interstitium.
 */
inline CompartmentSolution solve_2cxm(const KineticParams& params, const ConcentrationSeries& aif,
                                      std::size_t substeps = 1) {
  aif.validate();
  const bool closed = params.PS == 0.0 && KineticParams{params.Fp, params.vp, params.ve, 1.0}.valid();
  if (!params.valid() && !closed) throw InvalidInput("kinetic parameters must be finite and positive (PS may be 0)");
  if (substeps < 1) throw InvalidInput("substeps must be at least 1");
  return integrate_2cxm(params, aif, effective_substeps(params, aif.grid.dt, substeps));
}

struct CompartmentResiduals {
  double rp;
  double re;
};

/// Pointwise residuals of the two compartment equations.
constexpr CompartmentResiduals residuals_2cxm(const KineticParams& p, double cp, double ce,
                                              double dcp_dt, double dce_dt, double caif) noexcept {
  return {p.vp * dcp_dt - p.PS * (ce - cp) - p.Fp * (caif - cp), p.ve * dce_dt - p.PS * (cp - ce)};
}

/// Residual of the reduced (whole-tissue) equation dCmyo/dt = Fp (Caif - Cp).
constexpr double residual_reduced(const KineticParams& p, double cp, double dcmyo_dt,
                                  double caif) noexcept {
  return dcmyo_dt - p.Fp * (caif - cp);
}

struct BloodUnits {
  double Fb;  ///< mL/min/g
  double vb;  ///< mL/g
};

/// Plasma flow/volume per mL tissue to blood flow/volume per g tissue:
/// divide by (1 - HCT) * rho.
inline BloodUnits to_blood_units(double Fp, double vp, const ConversionConstants& consts = {}) {
  consts.validate();
  const double denom = (1.0 - consts.hct) * consts.rho;
  return {Fp / denom, vp / denom};
}

}  // namespace tkp
