#pragma once

/**
 * @file phantom.hpp
 * @brief Digital reference object: gamma-variate AIF, block-structured
 *        parameter volume and noisy forward-simulated tissue curves.
 */

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "tkpinn/errors.hpp"
#include "tkpinn/kinetics.hpp"
#include "tkpinn/seeding.hpp"
#include "tkpinn/volume.hpp"

namespace tkp {

/// A(t - t0)^alpha exp(-(t - t0)/beta) for t > t0, zero before onset.
struct GammaVariateAif {
  double t0 = 0.1;          ///< onset, min
  double amplitude = 0.0;   ///< M min^-alpha
  double alpha = 2.5;
  double beta = 0.12;       ///< min

  void validate() const {
    if (!(alpha > 0 && beta > 0 && amplitude > 0)) throw InvalidInput("gamma variate needs alpha, beta, A > 0");
  }

  double operator()(double t) const noexcept {
    if (t <= t0) return 0.0;
    const double s = t - t0;
    return amplitude * std::pow(s, alpha) * std::exp(-s / beta);
  }

  double peak_time() const noexcept { return t0 + alpha * beta; }
  double peak_value() const noexcept { return (*this)(peak_time()); }

  /// Amplitude chosen so the curve peaks at `peak` (molar).
  static GammaVariateAif with_peak(double peak, double t0 = 0.1, double alpha = 2.5, double beta = 0.12) {
    GammaVariateAif g{t0, 1.0, alpha, beta};
    g.amplitude = peak / g.peak_value();
    g.validate();
    return g;
  }

  /// Default phantom AIF: onset 0.1 min, alpha 2.5, beta 0.12 min, peak 5 mM.
  static GammaVariateAif defaults() { return with_peak(5.0e-3); }

  ConcentrationSeries sample(const TimeGrid& grid) const {
    grid.validate();
    std::vector<double> v(grid.n);
    for (std::size_t i = 0; i < grid.n; ++i) v[i] = (*this)(grid.at(i));
    return {grid, std::move(v)};
  }
};

/// Parameter values along each block axis: Fp over x, vp (outer) x ve (inner)
/// over y, PS over z.
struct ParameterGrid {
  std::vector<double> fp{0.5, 1.0, 1.5, 2.0};
  std::vector<double> vp{0.02, 0.05, 0.1, 0.2};
  std::vector<double> ve{0.1, 0.2, 0.5};
  std::vector<double> ps{0.5, 1.5, 2.5};
  std::size_t block = 10;  ///< block edge in x and y; one slice per z block

  std::size_t blocks_x() const { return fp.size(); }
  std::size_t blocks_y() const { return vp.size() * ve.size(); }
  std::size_t blocks_z() const { return ps.size(); }
  std::size_t block_count() const { return blocks_x() * blocks_y() * blocks_z(); }

  /// 16-block slice: Fp x vp at ve = 0.2, PS = 1.5.
  static ParameterGrid mini() { return {{0.5, 1.0, 1.5, 2.0}, {0.02, 0.05, 0.1, 0.2}, {0.2}, {1.5}, 10}; }
};

/// Block parameters indexed as (bz * blocks_y + by) * blocks_x + bx.
inline std::vector<KineticParams> build_parameter_grid(const ParameterGrid& g = {}) {
  std::vector<KineticParams> out;
  out.reserve(g.block_count());
  for (std::size_t bz = 0; bz < g.blocks_z(); ++bz)
    for (std::size_t by = 0; by < g.blocks_y(); ++by)
      for (std::size_t bx = 0; bx < g.blocks_x(); ++bx) {
        out.push_back({g.fp[bx], g.vp[by / g.ve.size()], g.ve[by % g.ve.size()], g.ps[bz]});
      }
  return out;
}

enum class SnrReference { Peak, Mean };

struct DroConfig {
  TimeGrid grid{0.0, 0.02, 100};
  GammaVariateAif aif = GammaVariateAif::defaults();
  ParameterGrid parameters;
  double snr = 17.5;  ///< infinity disables noise
  SnrReference snr_reference = SnrReference::Peak;
  std::uint64_t seed = 0;
  std::size_t substeps = 10;
};

struct DROVolume {
  VolumeDims dims;
  TimeGrid grid;
  std::vector<double> aif;
  std::vector<KineticParams> truth;      ///< per pixel
  std::vector<std::size_t> block_of;     ///< per pixel
  std::vector<std::vector<double>> block_curves;  ///< clean Cmyo per block
  std::vector<double> curves;            ///< pixel-major: curves[p * n + i]
  double snr = 0.0;
  SnrReference snr_reference = SnrReference::Peak;
  std::uint64_t seed = 0;

  std::span<const double> curve(std::size_t pixel) const {
    return std::span<const double>(curves).subspan(pixel * grid.n, grid.n);
  }
};

/// Noise standard deviation for a clean curve at the requested SNR.
inline double noise_sigma(std::span<const double> clean, double snr, SnrReference ref) {
  if (std::isinf(snr)) return 0.0;
  double level = 0.0;
  if (ref == SnrReference::Peak) {
    for (double c : clean) level = std::max(level, c);
  } else {
    for (double c : clean) level += c;
    level /= static_cast<double>(clean.size());
  }
  return level / snr;
}

/**
 * Simulates every block on the acquisition grid, broadcasts the clean curve
 * to the block's pixels and adds unclipped Gaussian noise. Each pixel draws
 * from its own stream keyed by (seed, pixel index).
 */
inline DROVolume generate_dro(const DroConfig& cfg) {
  if (!(cfg.snr > 0)) throw InvalidInput("SNR must be positive");
  cfg.aif.validate();
  const ParameterGrid& pg = cfg.parameters;
  if (pg.block == 0 || pg.block_count() == 0) throw InvalidInput("parameter grid is empty");

  DROVolume v;
  v.grid = cfg.grid;
  v.dims = {pg.blocks_x() * pg.block, pg.blocks_y() * pg.block, pg.blocks_z()};
  v.snr = cfg.snr;
  v.snr_reference = cfg.snr_reference;
  v.seed = cfg.seed;
  const ConcentrationSeries aif = cfg.aif.sample(cfg.grid);
  v.aif = aif.values;

  const auto blocks = build_parameter_grid(pg);
  v.block_curves.reserve(blocks.size());
  for (const KineticParams& p : blocks) v.block_curves.push_back(solve_2cxm(p, aif, cfg.substeps).tissue.values);

  const std::size_t n = cfg.grid.n;
  const std::size_t total = v.dims.size();
  v.truth.resize(total);
  v.block_of.resize(total);
  v.curves.resize(total * n);
  for (std::size_t z = 0; z < v.dims.z; ++z)
    for (std::size_t y = 0; y < v.dims.y; ++y)
      for (std::size_t x = 0; x < v.dims.x; ++x) {
        const std::size_t pix = v.dims.index(x, y, z);
        const std::size_t b = (z * pg.blocks_y() + y / pg.block) * pg.blocks_x() + x / pg.block;
        v.block_of[pix] = b;
        v.truth[pix] = blocks[b];
        const auto& clean = v.block_curves[b];
        const double sigma = noise_sigma(clean, cfg.snr, cfg.snr_reference);
        double* out = v.curves.data() + pix * n;
        if (sigma == 0.0) {
          std::copy(clean.begin(), clean.end(), out);
          continue;
        }
        std::mt19937_64 rng(derive_seed(cfg.seed, "phantom.noise", pix));
        std::normal_distribution<double> noise(0.0, sigma);
        for (std::size_t i = 0; i < n; ++i) out[i] = clean[i] + noise(rng);
      }
  return v;
}

}  // namespace tkp
