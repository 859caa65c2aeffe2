#pragma once

/**
 * @file nlls.hpp
 * @brief Per-pixel nonlinear least-squares 2CXM fitting (Levenberg-Marquardt).
 *
 * The model Cmyo(t; eta) is the RK4 forward solve. Parameters are optimized
 * as log(eta) inside a box, with a forward-difference Jacobian. Curves and
 * AIF are scaled by the AIF peak before fitting; the model is linear in the
 * AIF so the parameters are unaffected, and reported costs are in these
 * scaled units.
 */

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "tkpinn/errors.hpp"
#include "tkpinn/kinetics.hpp"
#include "tkpinn/seeding.hpp"

namespace tkp::nlls {

struct NllsConfig {
  std::size_t max_iterations = 2000;
  KineticParams initial{1.0, 0.05, 0.2, 1.0};
  bool log_space = true;
  std::size_t multistart = 1;
  double jitter_decades = 0.5;  ///< half-width of the log-uniform start jitter
  double damping = 1e-3;
  double damping_up = 10.0;
  double damping_down = 10.0;
  double cost_tol = 1e-10;  ///< relative cost decrease
  double grad_tol = 1e-8;   ///< infinity norm of the gradient
  double step_tol = 1e-12;  ///< norm of the accepted step
  double fd_step = 1e-6;    ///< relative forward-difference step
  double max_step = 1.0;    ///< largest change of any coordinate per step
  KineticParams lower{1e-3, 1e-3, 1e-3, 1e-3};
  KineticParams upper{20.0, 1.0, 1.0, 20.0};
  std::size_t substeps = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(cost_tol > 0 && grad_tol > 0 && step_tol > 0 && fd_step > 0 && max_step > 0)) {
      throw InvalidInput("NLLS tolerances must be positive");
    }
    if (multistart < 1) throw InvalidInput("multistart must be at least 1");
    if (max_iterations < 1) throw InvalidInput("max_iterations must be at least 1");
    if (!(damping > 0 && damping_up > 1 && damping_down > 1)) throw InvalidInput("invalid LM damping schedule");
    if (!(jitter_decades >= 0)) throw InvalidInput("jitter must be non-negative");
    if (!initial.valid() || !lower.valid() || !upper.valid()) throw InvalidInput("NLLS bounds and start must be positive");
    const std::array<double, 4> lo{lower.Fp, lower.vp, lower.ve, lower.PS}, hi{upper.Fp, upper.vp, upper.ve, upper.PS};
    for (std::size_t i = 0; i < 4; ++i) {
      if (!(lo[i] < hi[i])) throw InvalidInput("NLLS lower bound must be below the upper bound");
    }
  }
};

enum class Status { Converged, MaxIterations, Degenerate, Failed };

constexpr std::string_view to_string(Status s) {
  switch (s) {
    case Status::Converged: return "converged";
    case Status::MaxIterations: return "max-iterations";
    case Status::Degenerate: return "degenerate";
    case Status::Failed: return "numerical-failure";
  }
  return "unknown";
}

struct PixelFit {
  KineticParams params;
  double cost = 0.0;  ///< sum of squared residuals, AIF-peak-scaled units
  Status status = Status::MaxIterations;
  std::size_t iterations = 0;
};

namespace detail {

using Vec4 = Eigen::Vector4d;

inline Vec4 to_vec(const KineticParams& p) { return {p.Fp, p.vp, p.ve, p.PS}; }
inline KineticParams to_params(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }

/// Maps between the optimizer's coordinates and eta.
struct Coordinates {
  bool log_space;
  Vec4 lo, hi;  ///< box in optimizer coordinates

  Coordinates(const NllsConfig& c) : log_space(c.log_space) {
    lo = encode(to_vec(c.lower));
    hi = encode(to_vec(c.upper));
  }
  Vec4 encode(const Vec4& eta) const { return log_space ? Vec4(eta.array().log()) : eta; }
  Vec4 decode(const Vec4& theta) const { return log_space ? Vec4(theta.array().exp()) : theta; }
  Vec4 clamp(const Vec4& theta) const { return theta.cwiseMax(lo).cwiseMin(hi); }
};

struct Problem {
  const ConcentrationSeries& aif;
  std::span<const double> curve;
  std::size_t substeps;

  std::size_t micro_steps(const Vec4& eta) const { return effective_substeps(to_params(eta), aif.grid.dt, substeps); }

  /// Residual vector model - data; returns the cost.
  double residuals(const Vec4& eta, Eigen::VectorXd& r, std::size_t micro) const {
    const auto sol = integrate_2cxm(to_params(eta), aif, micro);
    r.resize(static_cast<Eigen::Index>(curve.size()));
    for (std::size_t i = 0; i < curve.size(); ++i) r[static_cast<Eigen::Index>(i)] = sol.tissue.values[i] - curve[i];
    return r.squaredNorm();
  }
};

inline PixelFit levenberg_marquardt(const Problem& prob, const Coordinates& co, Vec4 theta, const NllsConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(prob.curve.size());
  theta = co.clamp(theta);
  Eigen::VectorXd r, r_trial, r_step;
  std::size_t micro = prob.micro_steps(co.decode(theta));
  double cost = prob.residuals(co.decode(theta), r, micro);
  if (!std::isfinite(cost)) throw NumericalFailure("NLLS cost is not finite at the start point");

  PixelFit out;
  double lambda = cfg.damping;
  Eigen::Matrix<double, Eigen::Dynamic, 4> jac(n, 4);
  bool need_jacobian = true;
  Eigen::Matrix4d jtj;
  Vec4 g;

  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    if (need_jacobian) {
      // Perturbed solves keep the base step count so the difference quotient
      // never straddles a change in discretization.
      for (int k = 0; k < 4; ++k) {
        Vec4 shifted = theta;
        const double h = cfg.fd_step * std::max(std::abs(theta[k]), 1.0);
        shifted[k] += h;
        prob.residuals(co.decode(shifted), r_step, micro);
        jac.col(k) = (r_step - r) / h;
      }
      jtj.noalias() = jac.transpose() * jac;
      g.noalias() = jac.transpose() * r;
      need_jacobian = false;
    }
    out.iterations = it;
    if (g.lpNorm<Eigen::Infinity>() <= cfg.grad_tol || cost == 0.0) {
      out.status = Status::Converged;
      break;
    }

    Eigen::Matrix4d a = jtj;
    for (int k = 0; k < 4; ++k) a(k, k) += lambda * std::max(jtj(k, k), 1e-12);
    Vec4 delta = a.ldlt().solve(-g);
    const double longest = delta.lpNorm<Eigen::Infinity>();
    if (longest > cfg.max_step) delta *= cfg.max_step / longest;
    const Vec4 candidate = co.clamp(theta + delta);
    const Vec4 step = candidate - theta;
    const std::size_t trial_micro = prob.micro_steps(co.decode(candidate));
    const double trial = prob.residuals(co.decode(candidate), r_trial, trial_micro);
    if (std::isnan(trial)) throw NumericalFailure("NLLS cost became NaN");

    if (trial < cost) {
      const double decrease = cost - trial;
      theta = candidate;
      micro = trial_micro;
      r.swap(r_trial);
      const double previous = cost;
      cost = trial;
      lambda = std::max(lambda / cfg.damping_down, 1e-12);
      need_jacobian = true;
      out.iterations = it + 1;
      if (decrease <= cfg.cost_tol * previous || step.norm() <= cfg.step_tol) {
        out.status = Status::Converged;
        break;
      }
    } else {
      lambda *= cfg.damping_up;
      if (lambda > 1e16 || step.norm() <= cfg.step_tol) {
        out.status = Status::Converged;
        break;
      }
    }
  }
  out.params = to_params(co.decode(theta));
  out.cost = cost;
  return out;
}

/// FNV-1a over the curve's bytes: keys a pixel's multistart stream by its data.
inline std::uint64_t curve_key(std::span<const double> curve) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : curve) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace detail

/**
 * Fits one tissue curve. The first start is `config.initial`; further starts
 * jitter it log-uniformly. Returns the lowest-cost start. An all-zero AIF
 * makes every parameter set fit equally well: the start is returned with
 * status Degenerate.
 */
inline PixelFit fit_pixel(std::span<const double> curve, const ConcentrationSeries& aif, const NllsConfig& config) {
  config.validate();
  aif.validate();
  if (curve.size() != aif.grid.n) throw InvalidInput("curve and AIF do not share a time grid");
  for (double c : curve) {
    if (!std::isfinite(c)) throw InvalidInput("curve contains non-finite values");
  }

  const double scale = aif.max();
  if (!(scale > 0.0)) return {config.initial, 0.0, Status::Degenerate, 0};

  std::vector<double> aif_scaled(aif.values.size()), curve_scaled(curve.size());
  for (std::size_t i = 0; i < aif.values.size(); ++i) aif_scaled[i] = aif.values[i] / scale;
  for (std::size_t i = 0; i < curve.size(); ++i) curve_scaled[i] = curve[i] / scale;
  const ConcentrationSeries aif_n(aif.grid, std::move(aif_scaled));
  const detail::Problem prob{aif_n, curve_scaled, config.substeps};
  const detail::Coordinates co(config);

  const detail::Vec4 start = co.encode(detail::to_vec(config.initial));
  std::mt19937_64 rng(derive_seed(config.seed, "nlls.multistart", detail::curve_key(curve)));
  const double half = config.jitter_decades * std::log(10.0);
  std::uniform_real_distribution<double> jitter(-half, half);

  PixelFit best;
  bool have = false;
  for (std::size_t s = 0; s < config.multistart; ++s) {
    detail::Vec4 theta = start;
    if (s > 0) {
      for (int k = 0; k < 4; ++k) {
        const double d = jitter(rng);
        theta[k] = config.log_space ? theta[k] + d : theta[k] * std::exp(d);
      }
    }
    PixelFit f = detail::levenberg_marquardt(prob, co, theta, config);
    if (!have || f.cost < best.cost) {
      best = f;
      have = true;
    }
  }
  return best;
}

inline PixelFit fit_pixel(const ConcentrationSeries& curve, const ConcentrationSeries& aif, const NllsConfig& config) {
  if (!(curve.grid == aif.grid)) throw InvalidInput("curve and AIF do not share a time grid");
  return fit_pixel(std::span<const double>(curve.values), aif, config);
}

struct VolumeFit {
  std::vector<KineticParams> params;
  std::vector<double> cost;
  std::vector<Status> status;
  std::vector<std::size_t> iterations;
  std::vector<std::string> errors;  ///< empty unless the pixel raised
};

/**
 * Fits every pixel of a pixel-major curve array (curves[p * n + i]).
 * Pixels are independent; failures are recorded per pixel and leave the
 * start values in place.
 */
inline VolumeFit fit_volume(std::span<const double> curves, const ConcentrationSeries& aif, const NllsConfig& config,
                            std::size_t threads = 1) {
  config.validate();
  aif.validate();
  const std::size_t n = aif.grid.n;
  if (curves.size() % n != 0) throw InvalidInput("curve array is not a whole number of curves");
  const std::size_t k = curves.size() / n;

  VolumeFit out;
  out.params.assign(k, config.initial);
  out.cost.assign(k, 0.0);
  out.status.assign(k, Status::MaxIterations);
  out.iterations.assign(k, 0);
  out.errors.assign(k, {});

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t p = next++; p < k; p = next++) {
      try {
        const PixelFit f = fit_pixel(curves.subspan(p * n, n), aif, config);
        out.params[p] = f.params;
        out.cost[p] = f.cost;
        out.status[p] = f.status;
        out.iterations[p] = f.iterations;
      } catch (const Error& e) {
        out.errors[p] = e.what();
        out.status[p] = Status::Failed;
        out.cost[p] = std::numeric_limits<double>::quiet_NaN();
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(k, 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace tkp::nlls
