#pragma once

/**
 * @file metrics.hpp
 * @brief Map agreement scores: normalized mean square error and windowed SSIM.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "tkpinn/errors.hpp"
#include "tkpinn/volume.hpp"

namespace tkp {

/// sum (est - gt)^2 / sum gt^2.
inline double nmse(std::span<const double> est, std::span<const double> gt) {
  if (est.size() != gt.size()) throw InvalidInput("nmse: maps differ in size");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double d = est[i] - gt[i];
    num += d * d;
    den += gt[i] * gt[i];
  }
  if (!(den > 0.0)) throw InvalidInput("nmse: ground truth is identically zero");
  return num / den;
}

struct SsimOptions {
  std::size_t window = 7;
  bool gaussian = false;  ///< Gaussian weights instead of a uniform window
  double sigma = 1.5;     ///< Gaussian width in pixels
  double k1 = 0.01;
  double k2 = 0.03;
  std::optional<double> dynamic_range;  ///< overrides max(gt) - min(gt)
};

namespace detail {

inline std::vector<double> ssim_kernel(const SsimOptions& o) {
  const std::size_t w = o.window;
  std::vector<double> k(w * w, 1.0);
  if (o.gaussian) {
    const double c = 0.5 * static_cast<double>(w - 1);
    for (std::size_t i = 0; i < w; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double dy = static_cast<double>(i) - c, dx = static_cast<double>(j) - c;
        k[i * w + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * o.sigma * o.sigma));
      }
  }
  double s = 0.0;
  for (double v : k) s += v;
  for (double& v : k) v /= s;
  return k;
}

}  // namespace detail

/**
 * Mean SSIM over every fully contained window of every z-slice, then over
 * slices. Local statistics are weighted (population) moments.
 */
inline double ssim(std::span<const double> est, std::span<const double> gt, VolumeDims dims,
                   const SsimOptions& opt = {}) {
  if (est.size() != gt.size() || gt.size() != dims.size()) throw InvalidInput("ssim: map sizes do not match");
  if (opt.window == 0 || dims.x < opt.window || dims.y < opt.window) {
    throw InvalidInput("ssim: slice smaller than the window");
  }
  if (opt.gaussian && !(opt.sigma > 0)) throw InvalidInput("ssim: Gaussian sigma must be positive");
  double range;
  if (opt.dynamic_range) {
    range = *opt.dynamic_range;
  } else {
    const auto [lo, hi] = std::minmax_element(gt.begin(), gt.end());
    range = *hi - *lo;
  }
  if (!(range > 0.0)) throw InvalidInput("ssim: dynamic range is zero");
  const double c1 = (opt.k1 * range) * (opt.k1 * range);
  const double c2 = (opt.k2 * range) * (opt.k2 * range);
  const std::vector<double> kernel = detail::ssim_kernel(opt);
  const std::size_t w = opt.window;

  double total = 0.0;
  for (std::size_t z = 0; z < dims.z; ++z) {
    double slice = 0.0;
    std::size_t count = 0;
    for (std::size_t y0 = 0; y0 + w <= dims.y; ++y0)
      for (std::size_t x0 = 0; x0 + w <= dims.x; ++x0) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t i = 0; i < w; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t p = dims.index(x0 + j, y0 + i, z);
            const double k = kernel[i * w + j];
            const double a = est[p], b = gt[p];
            mx += k * a;
            my += k * b;
            sxx += k * a * a;
            syy += k * b * b;
            sxy += k * a * b;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        slice += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    total += slice / static_cast<double>(count);
  }
  return total / static_cast<double>(dims.z);
}

/// Per-parameter and overall agreement between estimated and true maps.
struct MapComparison {
  std::array<double, 4> nmse{};
  std::array<double, 4> ssim{};  ///< NaN where the true map is constant
  double overall_nmse = 0.0;
  double overall_ssim = 0.0;     ///< mean over the defined SSIM entries
};

inline MapComparison compare_maps(const ParameterMaps& est, const ParameterMaps& gt, const SsimOptions& opt = {}) {
  if (!(est.dims == gt.dims)) throw InvalidInput("compare: map dimensions differ");
  MapComparison out;
  double ssim_sum = 0.0;
  std::size_t ssim_count = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    out.nmse[k] = nmse(est[k], gt[k]);
    const auto [lo, hi] = std::minmax_element(gt[k].begin(), gt[k].end());
    if (opt.dynamic_range || *hi > *lo) {
      out.ssim[k] = ssim(est[k], gt[k], gt.dims, opt);
      ssim_sum += out.ssim[k];
      ++ssim_count;
    } else {
      out.ssim[k] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  out.overall_nmse = (out.nmse[0] + out.nmse[1] + out.nmse[2] + out.nmse[3]) / 4.0;
  out.overall_ssim = ssim_count ? ssim_sum / static_cast<double>(ssim_count) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace tkp
