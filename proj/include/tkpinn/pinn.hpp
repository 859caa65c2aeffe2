#pragma once

/**
 * @file pinn.hpp
 * @brief Physics-informed network for 2CXM parameter inference.
 *
 * One network maps normalized time to the normalized concentrations of every
 * pixel in a slice; per-pixel kinetic parameters are trained alongside the
 * weights in log-space. Four variants differ in outputs and residual terms:
 *
 *  - TwoCXM:     outputs Cp, Ce per pixel plus the AIF; residuals rp, re.
 *  - TwoCXMMesh: as TwoCXM, but the input is (t, x, y) and one evaluation is
 *                made per (pixel, time) pair with outputs (Cp, Ce, AIF).
 *  - Reduced:    outputs Cmyo per pixel plus the AIF; an auxiliary head gives
 *                Cp for the reduced residual rmyo.
 *  - Combined:   TwoCXM outputs; residuals rp, re and rmyo.
 *
 * Residuals are evaluated in normalized variables: every d/dt becomes
 * (1/sigma_t) d/dt_hat, and the concentration scale cancels.
 */

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tkpinn/autodiff.hpp"
#include "tkpinn/errors.hpp"
#include "tkpinn/kinetics.hpp"
#include "tkpinn/seeding.hpp"

namespace tkp::pinn {

using ad::Matrix;

enum class Variant { TwoCXM, TwoCXMMesh, Reduced, Combined };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::TwoCXM: return "pinn-2cxm";
    case Variant::TwoCXMMesh: return "pinn-mesh";
    case Variant::Reduced: return "pinn-reduced";
    case Variant::Combined: return "pinn-combined";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::TwoCXM, Variant::TwoCXMMesh, Variant::Reduced, Variant::Combined}) {
    if (to_string(v) == s) return v;
  }
  throw InvalidInput("unknown PINN variant '" + std::string(s) + "'");
}

inline bool resolves_compartments(Variant v) { return v != Variant::Reduced; }
inline bool uses_mesh(Variant v) { return v == Variant::TwoCXMMesh; }

struct LossWeights {
  double data = 5.0;
  double residual = 1.0;
  double boundary = 1.0;
  double regularization = 1.0;
};

struct PinnConfig {
  Variant variant = Variant::Combined;
  std::size_t iterations = 25000;
  double learning_rate = 1e-3;
  LossWeights weights;
  std::size_t n_collocation = 500;
  std::uint64_t seed = 0;
  bool resample_collocation = false;
  KineticParams initial_eta{1.0, 0.05, 0.2, 1.0};
  std::size_t hidden_units = 32;
  std::size_t log_interval = 100;
  /// Kinetic parameters stay frozen for this many leading iterations.
  std::size_t eta_warmup_iterations = 0;

  void validate() const {
    if (iterations == 0 || n_collocation == 0 || hidden_units == 0 || log_interval == 0) {
      throw InvalidInput("PINN counts must be positive");
    }
    if (!(learning_rate > 0)) throw InvalidInput("learning rate must be positive");
    if (weights.data < 0 || weights.residual < 0 || weights.boundary < 0 || weights.regularization < 0) {
      throw InvalidInput("loss weights must be non-negative");
    }
    if (!initial_eta.valid()) throw InvalidInput("initial kinetic parameters must be strictly positive");
  }
};

/// Time standardization and concentration scale.
struct Normalization {
  double mu_t = 0.0;
  double sigma_t = 1.0;
  double c_scale = 1.0;

  double time(double t) const noexcept { return (t - mu_t) / sigma_t; }

  static Normalization from(const TimeGrid& grid, std::span<const double> aif) {
    grid.validate();
    double mean = 0.0;
    for (std::size_t i = 0; i < grid.n; ++i) mean += grid.at(i);
    mean /= static_cast<double>(grid.n);
    double var = 0.0;
    for (std::size_t i = 0; i < grid.n; ++i) var += (grid.at(i) - mean) * (grid.at(i) - mean);
    var /= static_cast<double>(grid.n);
    double peak = 0.0;
    for (double a : aif) peak = std::max(peak, a);
    if (!(peak > 0)) throw InvalidInput("AIF maximum must be positive for normalization");
    return {mean, std::sqrt(var), peak};
  }
};

/// Trainable state: two tanh + batch-norm hidden layers, output head(s) and
/// per-pixel log kinetic parameters (rows: Fp, vp, ve, PS).
struct NetworkState {
  Variant variant = Variant::Combined;
  std::size_t pixels = 0;
  std::size_t input_dim = 1;

  Matrix w1, b1, bn1_scale, bn1_shift;
  Matrix w2, b2, bn2_scale, bn2_shift;
  Matrix w_out, b_out;
  Matrix w_aux, b_aux;  ///< Reduced only: auxiliary Cp head
  Matrix log_eta;       ///< 4 x pixels

  bool has_aux() const noexcept { return w_aux.size() != 0; }

  /// Width of the main output head.
  std::size_t output_count() const noexcept { return static_cast<std::size_t>(w_out.cols()); }

  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> p{&w1, &b1, &bn1_scale, &bn1_shift, &w2, &b2, &bn2_scale, &bn2_shift, &w_out, &b_out};
    if (has_aux()) {
      p.push_back(&w_aux);
      p.push_back(&b_aux);
    }
    p.push_back(&log_eta);
    return p;
  }
  std::vector<const Matrix*> parameters() const {
    auto p = const_cast<NetworkState*>(this)->parameters();
    return {p.begin(), p.end()};
  }

  KineticParams eta(std::size_t pixel) const {
    const auto j = static_cast<Eigen::Index>(pixel);
    return {std::exp(log_eta(0, j)), std::exp(log_eta(1, j)), std::exp(log_eta(2, j)), std::exp(log_eta(3, j))};
  }
};

inline bool operator==(const NetworkState& a, const NetworkState& b) {
  if (a.variant != b.variant || a.pixels != b.pixels || a.input_dim != b.input_dim) return false;
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->rows() != pb[i]->rows() || pa[i]->cols() != pb[i]->cols() || *pa[i] != *pb[i]) return false;
  }
  return true;
}

inline std::size_t main_output_count(Variant v, std::size_t pixels) {
  switch (v) {
    case Variant::TwoCXM:
    case Variant::Combined: return 2 * pixels + 1;
    case Variant::Reduced: return pixels + 1;
    case Variant::TwoCXMMesh: return 3;
  }
  return 0;
}

/// Glorot-uniform weights, zero biases, identity batch norm, log of initial eta.
inline NetworkState init_network(const PinnConfig& config, std::size_t pixels, std::size_t input_dim) {
  config.validate();
  if (pixels < 1) throw InvalidInput("network needs at least one pixel");
  if (input_dim != 1 && input_dim != 3) throw InvalidInput("input dimension must be 1 or 3");
  if (uses_mesh(config.variant) != (input_dim == 3)) {
    throw InvalidInput("the mesh variant takes (t, x, y) input; other variants take t only");
  }

  std::mt19937_64 rng(derive_seed(config.seed, "pinn.init"));
  auto glorot = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(static_cast<Eigen::Index>(fan_in), static_cast<Eigen::Index>(fan_out));
    // Fill row-major so the draw order does not depend on storage layout.
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
    return w;
  };
  const std::size_t h = config.hidden_units;
  const auto hi = static_cast<Eigen::Index>(h);

  NetworkState s;
  s.variant = config.variant;
  s.pixels = pixels;
  s.input_dim = input_dim;
  s.w1 = glorot(input_dim, h);
  s.b1 = Matrix::Zero(1, hi);
  s.bn1_scale = Matrix::Ones(1, hi);
  s.bn1_shift = Matrix::Zero(1, hi);
  s.w2 = glorot(h, h);
  s.b2 = Matrix::Zero(1, hi);
  s.bn2_scale = Matrix::Ones(1, hi);
  s.bn2_shift = Matrix::Zero(1, hi);
  const std::size_t m = main_output_count(config.variant, pixels);
  s.w_out = glorot(h, m);
  s.b_out = Matrix::Zero(1, static_cast<Eigen::Index>(m));
  if (config.variant == Variant::Reduced) {
    s.w_aux = glorot(h, pixels);
    s.b_aux = Matrix::Zero(1, static_cast<Eigen::Index>(pixels));
  }
  const auto k = static_cast<Eigen::Index>(pixels);
  s.log_eta.resize(4, k);
  s.log_eta.row(0).setConstant(std::log(config.initial_eta.Fp));
  s.log_eta.row(1).setConstant(std::log(config.initial_eta.vp));
  s.log_eta.row(2).setConstant(std::log(config.initial_eta.ve));
  s.log_eta.row(3).setConstant(std::log(config.initial_eta.PS));
  return s;
}

/// Handles to the state's parameters on a tape, in NetworkState::parameters() order.
struct ParamVars {
  ad::Var w1, b1, bn1_scale, bn1_shift, w2, b2, bn2_scale, bn2_shift, w_out, b_out;
  std::optional<ad::Var> w_aux, b_aux;
  ad::Var log_eta;

  static ParamVars bind(std::span<const ad::Var> v, bool has_aux) {
    if (v.size() != (has_aux ? 13u : 11u)) throw InvalidInput("parameter count does not match network layout");
    ParamVars p{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], std::nullopt, std::nullopt, v.back()};
    if (has_aux) {
      p.w_aux = v[10];
      p.b_aux = v[11];
    }
    return p;
  }
};

inline std::vector<ad::Var> record_leaves(ad::Tape& tape, const NetworkState& s) {
  std::vector<ad::Var> out;
  for (const Matrix* m : s.parameters()) out.push_back(tape.leaf(*m));
  return out;
}

struct NetworkGraph {
  ad::Var head;
  std::optional<ad::Var> aux;
};

/// Records the network on `input` (B x input_dim, with tangent).
inline NetworkGraph record_network(const ParamVars& p, ad::Var input) {
  using namespace ad;
  Var h1 = batch_normalize(tanh(affine_combine(p.w1, input, p.b1)), p.bn1_scale, p.bn1_shift);
  Var h2 = batch_normalize(tanh(affine_combine(p.w2, h1, p.b2)), p.bn2_scale, p.bn2_shift);
  NetworkGraph g{affine_combine(p.w_out, h2, p.b_out), std::nullopt};
  if (p.w_aux) g.aux = affine_combine(*p.w_aux, h2, *p.b_aux);
  return g;
}

/// Normalized training problem for one slice.
struct Problem {
  Variant variant = Variant::Combined;
  Normalization norm;
  std::size_t pixels = 0;
  Eigen::VectorXd t_obs;    ///< normalized observation times
  Eigen::VectorXd t_col;    ///< normalized collocation times
  double t_zero = 0.0;      ///< normalized time of t = 0
  Matrix observed;          ///< n_obs x pixels, normalized Cmyo
  Eigen::VectorXd aif;      ///< n_obs, normalized AIF
  Matrix coords;            ///< pixels x 2 mesh coordinates (mesh variant only)

  Eigen::Index n_obs() const { return t_obs.size(); }
  Eigen::Index n_col() const { return t_col.size(); }
  /// Rows of one time batch: observations, collocation points, then t = 0.
  Eigen::Index rows_per_pixel() const { return n_obs() + n_col() + 1; }
};

/// Pixel curves sharing one acquisition grid and one AIF.
struct TrainingData {
  TimeGrid grid;
  std::vector<double> aif;
  Matrix curves;  ///< n_time x pixels
  Matrix coords;  ///< pixels x 2, required for the mesh variant

  std::size_t pixels() const { return static_cast<std::size_t>(curves.cols()); }

  void validate() const {
    grid.validate();
    if (aif.size() != grid.n) throw InvalidInput("AIF length does not match the time grid");
    if (curves.cols() < 1) throw InvalidInput("training needs at least one pixel");
    if (static_cast<std::size_t>(curves.rows()) != grid.n) throw InvalidInput("curve length does not match the time grid");
    if (!curves.allFinite()) throw InvalidInput("curves contain non-finite values");
  }
};

/// Pixel index coordinates min-max scaled to [-1, 1] (0 for a singleton axis).
inline Matrix mesh_coordinates(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InvalidInput("coordinate arrays differ in length");
  Matrix c(static_cast<Eigen::Index>(xs.size()), 2);
  auto scale = [](std::span<const double> v, Eigen::Index col, Matrix& out) {
    double lo = v.empty() ? 0.0 : v[0], hi = lo;
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      out(static_cast<Eigen::Index>(i), col) = hi > lo ? 2.0 * (v[i] - lo) / (hi - lo) - 1.0 : 0.0;
    }
  };
  scale(xs, 0, c);
  scale(ys, 1, c);
  return c;
}

inline Eigen::VectorXd sample_collocation(const TimeGrid& grid, const Normalization& norm, std::size_t count,
                                          std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(grid.t0, grid.t0 + grid.span());
  Eigen::VectorXd t(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = norm.time(u(rng));
  return t;
}

inline Problem prepare_problem(const TrainingData& data, const PinnConfig& config, std::mt19937_64& colloc_rng) {
  data.validate();
  config.validate();
  Problem p;
  p.variant = config.variant;
  p.norm = Normalization::from(data.grid, data.aif);
  p.pixels = data.pixels();
  const auto n = static_cast<Eigen::Index>(data.grid.n);
  p.t_obs.resize(n);
  p.aif.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.t_obs(i) = p.norm.time(data.grid.at(static_cast<std::size_t>(i)));
    p.aif(i) = data.aif[static_cast<std::size_t>(i)] / p.norm.c_scale;
  }
  p.observed = data.curves / p.norm.c_scale;
  p.t_zero = p.norm.time(0.0);
  p.t_col = sample_collocation(data.grid, p.norm, config.n_collocation, colloc_rng);
  if (uses_mesh(config.variant)) {
    if (data.coords.rows() != data.curves.cols() || data.coords.cols() != 2) {
      throw InvalidInput("mesh variant requires pixels x 2 coordinates");
    }
    p.coords = data.coords;
  }
  return p;
}

/// Network input rows for the full batch, with unit tangent on the time column.
inline std::pair<Matrix, Matrix> make_inputs(const Problem& p) {
  const Eigen::Index r = p.rows_per_pixel();
  Eigen::VectorXd times(r);
  times << p.t_obs, p.t_col, p.t_zero;
  if (!uses_mesh(p.variant)) {
    return {Matrix(times), Matrix::Ones(r, 1)};
  }
  const auto k = static_cast<Eigen::Index>(p.pixels);
  Matrix in(k * r, 3), tan = Matrix::Zero(k * r, 3);
  for (Eigen::Index j = 0; j < k; ++j) {
    in.block(j * r, 0, r, 1) = times;
    in.block(j * r, 1, r, 1).setConstant(p.coords(j, 0));
    in.block(j * r, 2, r, 1).setConstant(p.coords(j, 1));
    tan.block(j * r, 0, r, 1).setOnes();
  }
  return {in, tan};
}

/// Mean (over pixels) of each unweighted loss term, plus the weighted total.
struct LossBreakdown {
  double data = 0.0;            ///< L_C
  double residual = 0.0;        ///< L_r = residual_p + residual_e + residual_myo
  double residual_p = 0.0;
  double residual_e = 0.0;
  double residual_myo = 0.0;
  double boundary = 0.0;        ///< L_b
  double regularization = 0.0;  ///< L_reg
  double total = 0.0;
};

namespace detail {

/// Where a pixel's output series lives: entry (row0 + r, col) of `which` (0 head, 1 aux).
struct Slot {
  int which = 0;
  Eigen::Index col = 0;
  Eigen::Index row0 = 0;
};

struct PixelSlots {
  Slot cp, ce, cmyo, aif;
};

inline PixelSlots slots_for(const Problem& p, Eigen::Index j) {
  const auto k = static_cast<Eigen::Index>(p.pixels);
  switch (p.variant) {
    case Variant::TwoCXM:
    case Variant::Combined: return {{0, j, 0}, {0, k + j, 0}, {}, {0, 2 * k, 0}};
    case Variant::Reduced: return {{1, j, 0}, {}, {0, j, 0}, {0, k, 0}};
    case Variant::TwoCXMMesh: {
      const Eigen::Index r0 = j * p.rows_per_pixel();
      return {{0, 0, r0}, {0, 1, r0}, {}, {0, 2, r0}};
    }
  }
  return {};
}

struct Mask {
  bool rp, re, rmyo;
};

inline Mask residual_mask(Variant v) {
  switch (v) {
    case Variant::TwoCXM:
    case Variant::TwoCXMMesh: return {true, true, false};
    case Variant::Reduced: return {false, false, true};
    case Variant::Combined: return {true, true, true};
  }
  return {false, false, false};
}

/// Read-only access to the outputs, and optional adjoint sinks.
struct Views {
  const Matrix* value[2] = {nullptr, nullptr};
  const Matrix* tangent[2] = {nullptr, nullptr};
  Matrix* grad_value[2] = {nullptr, nullptr};
  Matrix* grad_tangent[2] = {nullptr, nullptr};
};

/// Column of the output holding the AIF (shared by all pixels unless meshed).
inline Eigen::Index aif_column(const Problem& p) { return slots_for(p, 0).aif.col; }

/**
 * Per-pixel loss terms. With `grad` set, the adjoints scaled by `upstream`
 * are written to the views and `grad` (4 x K, d/d eta). Per-pixel columns
 * are overwritten; the AIF column is accumulated and must arrive zeroed.
 */
template <Variant V>
LossBreakdown pixel_losses_impl(const Problem& p, const LossWeights& w, const Matrix& eta, const Views& v,
                                Matrix* grad, double upstream) {
  constexpr bool compartments = V != Variant::Reduced;
  constexpr bool use_rp = V != Variant::Reduced;
  constexpr bool use_re = V != Variant::Reduced;
  constexpr bool use_rm = V == Variant::Reduced || V == Variant::Combined;

  const Eigen::Index k = static_cast<Eigen::Index>(p.pixels);
  const Eigen::Index nc = p.n_obs(), nr = p.n_col();
  const Eigen::Index col0 = nc, bnd = nc + nr;
  const double inv_nc = 1.0 / static_cast<double>(nc), inv_nr = 1.0 / static_cast<double>(nr);
  const double inv_sigma = 1.0 / p.norm.sigma_t;
  const double c = upstream / static_cast<double>(k);
  const double gdata = 2.0 * inv_nc * w.data * c;
  const double gres = 2.0 * inv_nr * w.residual * c;
  const double greg = 2.0 * inv_nr * w.regularization * c;
  const double gb = 2.0 * w.boundary * c;

  struct Col {
    const double* val = nullptr;
    const double* tan = nullptr;
    double* gval = nullptr;
    double* gtan = nullptr;
  };
  auto column = [&](const Slot& s) {
    Col out;
    const Eigen::Index rows = v.value[s.which]->rows();
    const Eigen::Index off = s.col * rows + s.row0;
    out.val = v.value[s.which]->data() + off;
    out.tan = v.tangent[s.which]->data() + off;
    if (grad) {
      out.gval = v.grad_value[s.which]->data() + off;
      out.gtan = v.grad_tangent[s.which]->data() + off;
    }
    return out;
  };

  LossBreakdown sum;
  for (Eigen::Index j = 0; j < k; ++j) {
    const PixelSlots s = slots_for(p, j);
    // Reduced works on (Cp_aux, Cmyo); the others on (Cp, Ce).
    const Col cp_c = column(s.cp);
    const Col q_c = column(compartments ? s.ce : s.cmyo);
    const Col a_c = column(s.aif);
    const double* obs = p.observed.data() + j * p.observed.rows();
    const double* aif_obs = p.aif.data();
    const double fp = eta(0, j), vp = eta(1, j), ve = eta(2, j), ps = eta(3, j);
    double g_fp = 0, g_vp = 0, g_ve = 0, g_ps = 0;

    double lc = 0.0;
    for (Eigen::Index i = 0; i < nc; ++i) {
      const double cp = cp_c.val[i], q = q_c.val[i];
      const double m = compartments ? vp * cp + ve * q : q;
      const double d = m - obs[i];
      const double e = a_c.val[i] - aif_obs[i];
      lc += d * d + e * e;
      if (grad) {
        const double gd = gdata * d;
        if constexpr (compartments) {
          cp_c.gval[i] = gd * vp;
          q_c.gval[i] = gd * ve;
          g_vp += gd * cp;
          g_ve += gd * q;
        } else {
          cp_c.gval[i] = 0.0;
          q_c.gval[i] = gd;
        }
        cp_c.gtan[i] = 0.0;
        q_c.gtan[i] = 0.0;
        a_c.gval[i] += gdata * e;
      }
    }
    lc *= inv_nc;

    double lrp = 0.0, lre = 0.0, lrm = 0.0, lreg = 0.0;
    for (Eigen::Index r = col0; r < bnd; ++r) {
      const double cp = cp_c.val[r], q = q_c.val[r], a = a_c.val[r];
      const double dcp = cp_c.tan[r], dq = q_c.tan[r];
      double gcp = 0.0, gq = 0.0, gtcp = 0.0, gtq = 0.0, ga = 0.0;
      if constexpr (use_rp) {
        const double rp = vp * inv_sigma * dcp - ps * (q - cp) - fp * (a - cp);
        lrp += rp * rp;
        if (grad) {
          const double g = gres * rp;
          gtcp += g * vp * inv_sigma;
          g_vp += g * inv_sigma * dcp;
          g_ps -= g * (q - cp);
          g_fp -= g * (a - cp);
          gq -= g * ps;
          gcp += g * (ps + fp);
          ga -= g * fp;
        }
      }
      if constexpr (use_re) {
        const double re = ve * inv_sigma * dq - ps * (cp - q);
        lre += re * re;
        if (grad) {
          const double g = gres * re;
          gtq += g * ve * inv_sigma;
          g_ve += g * inv_sigma * dq;
          g_ps -= g * (cp - q);
          gcp -= g * ps;
          gq += g * ps;
        }
      }
      if constexpr (use_rm) {
        const double dm = compartments ? vp * dcp + ve * dq : dq;
        const double rm = inv_sigma * dm - fp * (a - cp);
        lrm += rm * rm;
        if (grad) {
          const double g = gres * rm;
          if constexpr (compartments) {
            gtcp += g * inv_sigma * vp;
            gtq += g * inv_sigma * ve;
            g_vp += g * inv_sigma * dcp;
            g_ve += g * inv_sigma * dq;
          } else {
            gtq += g * inv_sigma;
          }
          g_fp -= g * (a - cp);
          ga -= g * fp;
          gcp += g * fp;
        }
      }
      const double n1 = std::min(cp, 0.0), n2 = std::min(q, 0.0);
      lreg += n1 * n1 + n2 * n2;
      if (grad) {
        cp_c.gval[r] = gcp + greg * n1;
        q_c.gval[r] = gq + greg * n2;
        cp_c.gtan[r] = gtcp;
        q_c.gtan[r] = gtq;
        a_c.gval[r] += ga;
      }
    }
    lrp *= inv_nr;
    lre *= inv_nr;
    lrm *= inv_nr;
    lreg *= inv_nr;

    double lb;
    {
      const double cp = cp_c.val[bnd], q = q_c.val[bnd], a = a_c.val[bnd];
      if constexpr (compartments) {
        const double m = vp * cp + ve * q;
        lb = cp * cp + q * q + m * m + a * a;
        if (grad) {
          cp_c.gval[bnd] = gb * (cp + m * vp);
          q_c.gval[bnd] = gb * (q + m * ve);
          g_vp += gb * m * cp;
          g_ve += gb * m * q;
        }
      } else {
        lb = cp * cp + q * q + a * a;
        if (grad) {
          cp_c.gval[bnd] = gb * cp;
          q_c.gval[bnd] = gb * q;
        }
      }
      if (grad) {
        cp_c.gtan[bnd] = 0.0;
        q_c.gtan[bnd] = 0.0;
        a_c.gval[bnd] += gb * a;
      }
    }

    if (grad) {
      (*grad)(0, j) += g_fp;
      (*grad)(1, j) += g_vp;
      (*grad)(2, j) += g_ve;
      (*grad)(3, j) += g_ps;
    }
    sum.data += lc;
    sum.residual_p += lrp;
    sum.residual_e += lre;
    sum.residual_myo += lrm;
    sum.boundary += lb;
    sum.regularization += lreg;
  }

  const double inv_k = 1.0 / static_cast<double>(k);
  sum.data *= inv_k;
  sum.residual_p *= inv_k;
  sum.residual_e *= inv_k;
  sum.residual_myo *= inv_k;
  sum.residual = sum.residual_p + sum.residual_e + sum.residual_myo;
  sum.boundary *= inv_k;
  sum.regularization *= inv_k;
  sum.total = w.residual * sum.residual + w.data * sum.data + w.boundary * sum.boundary +
              w.regularization * sum.regularization;
  return sum;
}

inline LossBreakdown pixel_losses(const Problem& p, const LossWeights& w, const Matrix& eta, const Views& v,
                                  Matrix* grad, double upstream) {
  switch (p.variant) {
    case Variant::TwoCXM: return pixel_losses_impl<Variant::TwoCXM>(p, w, eta, v, grad, upstream);
    case Variant::TwoCXMMesh: return pixel_losses_impl<Variant::TwoCXMMesh>(p, w, eta, v, grad, upstream);
    case Variant::Reduced: return pixel_losses_impl<Variant::Reduced>(p, w, eta, v, grad, upstream);
    case Variant::Combined: return pixel_losses_impl<Variant::Combined>(p, w, eta, v, grad, upstream);
  }
  throw InvalidInput("unknown variant");
}

}  // namespace detail

/**
 * Records the combined loss as one tape node over the network outputs and
 * eta = exp(log_eta). Fills `breakdown`. `problem` must outlive the tape.
 */
inline ad::Var record_loss(const Problem& problem, const LossWeights& weights, const NetworkGraph& graph, ad::Var eta,
                           LossBreakdown& breakdown) {
  ad::Tape& tape = *graph.head.tape;
  const bool has_aux = graph.aux.has_value();
  if (has_aux != (problem.variant == Variant::Reduced)) throw InvalidInput("network heads do not match the variant");

  const auto& head = tape.node(graph.head);
  const Eigen::Index rows = uses_mesh(problem.variant)
                                ? problem.rows_per_pixel() * static_cast<Eigen::Index>(problem.pixels)
                                : problem.rows_per_pixel();
  if (head.value.rows() != rows ||
      head.value.cols() != static_cast<Eigen::Index>(main_output_count(problem.variant, problem.pixels))) {
    throw InvalidInput("network output shape does not match the problem");
  }
  if (tape.value(eta).rows() != 4 || tape.value(eta).cols() != static_cast<Eigen::Index>(problem.pixels)) {
    throw InvalidInput("eta must be 4 x pixels");
  }

  if (!tape.has_tangent(graph.head) || (has_aux && !tape.has_tangent(*graph.aux))) {
    throw InvalidInput("network outputs carry no time tangent");
  }
  detail::Views views;
  views.value[0] = &head.value;
  views.tangent[0] = &head.tangent;
  if (has_aux) {
    views.value[1] = &tape.value(*graph.aux);
    views.tangent[1] = &tape.tangent_ref(*graph.aux);
  }
  breakdown = detail::pixel_losses(problem, weights, tape.value(eta), views, nullptr, 1.0);

  auto check = [](double x, const char* name) {
    if (!std::isfinite(x)) throw NumericalFailure(std::string("non-finite loss term ") + name);
  };
  check(breakdown.data, "L_C");
  check(breakdown.residual, "L_r");
  check(breakdown.boundary, "L_b");
  check(breakdown.regularization, "L_reg");

  std::vector<std::size_t> inputs{graph.head.id};
  if (has_aux) inputs.push_back(graph.aux->id);
  inputs.push_back(eta.id);
  const std::size_t head_id = graph.head.id, eta_id = eta.id;
  const std::optional<std::size_t> aux_id = has_aux ? std::optional<std::size_t>(graph.aux->id) : std::nullopt;
  const Problem* prob = &problem;
  const LossWeights w = weights;

  return tape.record(
      std::move(inputs), Matrix::Constant(1, 1, breakdown.total), Matrix(),
      [prob, w, head_id, aux_id, eta_id](ad::BackwardPass& pass, std::size_t self) {
        const Matrix& up = pass.grad_value(self);
        if (up.size() == 0) return;
        const auto& h = pass.node(head_id);
        detail::Views v;
        // Per-pixel columns are fully overwritten; only the AIF column accumulates.
        const Eigen::Index aif_col = detail::aif_column(*prob);
        Matrix gh(h.value.rows(), h.value.cols());
        Matrix ght(h.value.rows(), h.value.cols());
        gh.col(aif_col).setZero();
        ght.col(aif_col).setZero();
        v.value[0] = &h.value;
        v.tangent[0] = &h.tangent;
        v.grad_value[0] = &gh;
        v.grad_tangent[0] = &ght;
        Matrix ga, gat;
        if (aux_id) {
          const auto& a = pass.node(*aux_id);
          ga.resize(a.value.rows(), a.value.cols());
          gat.resize(a.value.rows(), a.value.cols());
          v.value[1] = &a.value;
          v.tangent[1] = &a.tangent;
          v.grad_value[1] = &ga;
          v.grad_tangent[1] = &gat;
        }
        const Matrix& eta_value = pass.node(eta_id).value;
        Matrix geta = Matrix::Zero(4, eta_value.cols());
        detail::pixel_losses(*prob, w, eta_value, v, &geta, up(0, 0));
        pass.add_value(head_id, std::move(gh));
        pass.add_tangent(head_id, std::move(ght));
        if (aux_id) {
          pass.add_value(*aux_id, std::move(ga));
          pass.add_tangent(*aux_id, std::move(gat));
        }
        pass.add_value(eta_id, std::move(geta));
      });
}

/// Network plus loss on a tape whose leaves are `leaves` (parameters() order).
inline ad::Var record_objective(ad::Tape& tape, std::span<const ad::Var> leaves, const Problem& problem,
                                const LossWeights& weights, LossBreakdown& breakdown) {
  const ParamVars p = ParamVars::bind(leaves, problem.variant == Variant::Reduced);
  auto [in, in_tangent] = make_inputs(problem);
  ad::Var input = tape.constant(std::move(in), std::move(in_tangent));
  NetworkGraph g = record_network(p, input);
  ad::Var eta = ad::exp(p.log_eta);
  return record_loss(problem, weights, g, eta, breakdown);
}

inline LossBreakdown compute_loss(const NetworkState& state, const Problem& problem, const LossWeights& weights) {
  ad::Tape tape;
  auto leaves = record_leaves(tape, state);
  LossBreakdown b;
  record_objective(tape, leaves, problem, weights, b);
  return b;
}

/// Per-pixel network outputs and their tangents with respect to t_hat.
struct ForwardResult {
  std::size_t output_count = 0;
  Matrix cp, ce, cmyo, aif;      ///< rows: time points; cols: pixels (aif: 1 col unless mesh)
  Matrix dcp, dce, dcmyo, daif;
};

/**
 * Evaluates the network on a batch of normalized times (unit tangents).
 * The mesh variant evaluates every (pixel, time) pair and needs `coords`.
 */
inline ForwardResult forward(const NetworkState& state, std::span<const double> t_hat, const Matrix& coords = {}) {
  const auto b = static_cast<Eigen::Index>(t_hat.size());
  const auto k = static_cast<Eigen::Index>(state.pixels);
  const bool mesh = uses_mesh(state.variant);
  if (b < 2) throw InvalidInput("forward needs a batch of at least two time points");
  if (mesh && (coords.rows() != k || coords.cols() != 2)) throw InvalidInput("mesh forward needs pixels x 2 coordinates");

  ad::Tape tape;
  auto leaves = record_leaves(tape, state);
  const ParamVars p = ParamVars::bind(leaves, state.has_aux());
  Matrix in, in_t;
  if (!mesh) {
    in = Eigen::Map<const Eigen::VectorXd>(t_hat.data(), b);
    in_t = Matrix::Ones(b, 1);
  } else {
    in.resize(k * b, 3);
    in_t = Matrix::Zero(k * b, 3);
    for (Eigen::Index j = 0; j < k; ++j) {
      in.block(j * b, 0, b, 1) = Eigen::Map<const Eigen::VectorXd>(t_hat.data(), b);
      in.block(j * b, 1, b, 1).setConstant(coords(j, 0));
      in.block(j * b, 2, b, 1).setConstant(coords(j, 1));
      in_t.block(j * b, 0, b, 1).setOnes();
    }
  }
  ad::Var input = tape.constant(std::move(in), std::move(in_t));
  NetworkGraph g = record_network(p, input);
  const Matrix& h = tape.value(g.head);
  const Matrix ht = tape.tangent(g.head);

  ForwardResult r;
  r.output_count = static_cast<std::size_t>(h.cols());
  Eigen::RowVectorXd vp(k), ve(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    vp(j) = std::exp(state.log_eta(1, j));
    ve(j) = std::exp(state.log_eta(2, j));
  }
  switch (state.variant) {
    case Variant::TwoCXM:
    case Variant::Combined:
      r.cp = h.leftCols(k);
      r.dcp = ht.leftCols(k);
      r.ce = h.middleCols(k, k);
      r.dce = ht.middleCols(k, k);
      r.aif = h.col(2 * k);
      r.daif = ht.col(2 * k);
      break;
    case Variant::Reduced:
      r.cmyo = h.leftCols(k);
      r.dcmyo = ht.leftCols(k);
      r.aif = h.col(k);
      r.daif = ht.col(k);
      r.cp = tape.value(*g.aux);
      r.dcp = tape.tangent(*g.aux);
      break;
    case Variant::TwoCXMMesh:
      r.cp.resize(b, k);
      r.ce.resize(b, k);
      r.aif.resize(b, k);
      r.dcp.resize(b, k);
      r.dce.resize(b, k);
      r.daif.resize(b, k);
      for (Eigen::Index j = 0; j < k; ++j) {
        r.cp.col(j) = h.block(j * b, 0, b, 1);
        r.ce.col(j) = h.block(j * b, 1, b, 1);
        r.aif.col(j) = h.block(j * b, 2, b, 1);
        r.dcp.col(j) = ht.block(j * b, 0, b, 1);
        r.dce.col(j) = ht.block(j * b, 1, b, 1);
        r.daif.col(j) = ht.block(j * b, 2, b, 1);
      }
      break;
  }
  if (resolves_compartments(state.variant)) {
    r.cmyo = r.cp.array().rowwise() * vp.array() + r.ce.array().rowwise() * ve.array();
    r.dcmyo = r.dcp.array().rowwise() * vp.array() + r.dce.array().rowwise() * ve.array();
  }
  return r;
}

/// First and second moment estimates for Adam, one per parameter matrix.
struct AdamMoments {
  std::vector<Matrix> first;
  std::vector<Matrix> second;

  static AdamMoments zeros_like(const NetworkState& s) {
    AdamMoments m;
    for (const Matrix* p : s.parameters()) {
      m.first.push_back(Matrix::Zero(p->rows(), p->cols()));
      m.second.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
    return m;
  }
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update. `frozen[i]` skips parameter i.
inline void adam_step(std::vector<Matrix*> params, std::span<const Matrix> grads, AdamMoments& moments,
                      std::size_t iteration, double learning_rate, const AdamSettings& s = {},
                      const std::vector<bool>& frozen = {}) {
  if (iteration < 1) throw InvalidInput("Adam iteration counter starts at 1");
  if (grads.size() != params.size() || moments.first.size() != params.size()) {
    throw InvalidInput("Adam: parameter, gradient and moment counts differ");
  }
  const double it = static_cast<double>(iteration);
  const double c1 = 1.0 - std::pow(s.beta1, it);
  const double c2 = 1.0 - std::pow(s.beta2, it);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i < frozen.size() && frozen[i]) continue;
    Matrix& m = moments.first[i];
    Matrix& v = moments.second[i];
    const Matrix& g = grads[i];
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseProduct(g);
    params[i]->array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + s.epsilon);
  }
}

struct LossRecord {
  std::size_t iteration = 0;
  LossBreakdown loss;
  KineticParams mean_eta;
};

struct FitResult {
  std::vector<KineticParams> params;  ///< one per pixel, original units
  std::vector<LossRecord> history;
  PinnConfig config;
  std::uint64_t seed = 0;
  double seconds = 0.0;
  NetworkState state;
};

inline KineticParams mean_eta(const NetworkState& s) {
  const Eigen::Index k = s.log_eta.cols();
  const Matrix eta = s.log_eta.array().exp();
  const Eigen::VectorXd m = eta.rowwise().sum() / static_cast<double>(k);
  return {m(0), m(1), m(2), m(3)};
}

/// Called after each logged interval; return false to stop early.
using ProgressFn = std::function<bool(const LossRecord&)>;

/**
 * Full-batch training of one slice. Starts from `initial` when given
 * (it must match the config variant and pixel count).
 */
inline FitResult train(const TrainingData& data, const PinnConfig& config,
                       std::optional<NetworkState> initial = std::nullopt, const ProgressFn& progress = {}) {
  const auto start = std::chrono::steady_clock::now();
  data.validate();
  config.validate();
  const std::size_t k = data.pixels();
  NetworkState state = initial ? std::move(*initial) : init_network(config, k, uses_mesh(config.variant) ? 3 : 1);
  if (state.variant != config.variant || state.pixels != k) throw InvalidInput("initial state does not match the data");

  std::mt19937_64 colloc_rng(derive_seed(config.seed, "pinn.collocation"));
  Problem problem = prepare_problem(data, config, colloc_rng);
  AdamMoments moments = AdamMoments::zeros_like(state);
  std::vector<Matrix*> params = state.parameters();
  std::vector<bool> frozen(params.size(), false);

  FitResult result;
  result.config = config;
  result.seed = config.seed;
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    if (config.resample_collocation && it > 1) {
      problem.t_col = sample_collocation(data.grid, problem.norm, config.n_collocation, colloc_rng);
    }
    ad::Tape tape;
    auto leaves = record_leaves(tape, state);
    LossBreakdown breakdown;
    ad::Var loss;
    try {
      loss = record_objective(tape, leaves, problem, config.weights, breakdown);
    } catch (const NumericalFailure& e) {
      throw NumericalFailure(std::string("training aborted: ") + e.what(), it);
    }
    const ad::Gradients grads = tape.backward(loss);
    std::vector<Matrix> g;
    g.reserve(leaves.size());
    for (const ad::Var& l : leaves) g.push_back(grads[l]);
    const bool log_now = it % config.log_interval == 0;
    if (log_now) result.history.push_back({it, breakdown, mean_eta(state)});
    frozen.back() = it <= config.eta_warmup_iterations;
    adam_step(params, g, moments, it, config.learning_rate, {}, frozen);
    if (!state.log_eta.allFinite()) throw NumericalFailure("training aborted: kinetic parameters diverged", it);
    if (log_now && progress && !progress(result.history.back())) break;
  }

  result.params.reserve(k);
  for (std::size_t j = 0; j < k; ++j) result.params.push_back(state.eta(j));
  result.state = std::move(state);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Gradient check of the full loss over every trainable value of `state`.
inline ad::GradcheckReport gradcheck_loss(const NetworkState& state, const Problem& problem, const LossWeights& weights,
                                          double step) {
  std::vector<Matrix> values;
  for (const Matrix* m : state.parameters()) values.push_back(*m);
  return ad::gradcheck(
      [&](ad::Tape& tape, std::span<const ad::Var> leaves) {
        LossBreakdown b;
        return record_objective(tape, leaves, problem, weights, b);
      },
      values, step);
}

}  // namespace tkp::pinn
