#pragma once

/**
 * @file config.hpp
 * @brief Run configuration shared by the command-line tools: JSON schema,
 *        strict parsing and the effective-config snapshot.
 *
 * Every section and key is optional; missing keys keep their defaults and
 * unknown keys are rejected. Schema (defaults shown):
 *
 *   {
 *     "seed": 0,
 *     "phantom": {"snr": 17.5, "snr_reference": "peak", "substeps": 10, "mini": false,
 *                 "grid": {"t0": 0, "dt": 0.02, "n": 100},
 *                 "aif": {"t0": 0.1, "alpha": 2.5, "beta": 0.12, "peak": 0.005}},
 *     "pinn": {"iterations": 25000, "learning_rate": 0.001, "n_collocation": 500,
 *              "resample_collocation": false, "hidden_units": 32, "log_interval": 100,
 *              "eta_warmup_iterations": 0,
 *              "weights": {"data": 5, "residual": 1, "boundary": 1, "regularization": 1},
 *              "initial_eta": {"Fp": 1, "vp": 0.05, "ve": 0.2, "PS": 1}},
 *     "nlls": {"max_iterations": 2000, "log_space": true, "multistart": 1, "jitter_decades": 0.5,
 *              "damping": 0.001, "damping_up": 10, "damping_down": 10, "cost_tol": 1e-10,
 *              "grad_tol": 1e-8, "step_tol": 1e-12, "fd_step": 1e-6, "max_step": 1, "substeps": 1,
 *              "initial_eta": {...}, "lower": {...}, "upper": {...}},
 *     "metrics": {"window": 7, "gaussian": false, "sigma": 1.5, "k1": 0.01, "k2": 0.03}
 *   }
 *
 * "snr" accepts a number or the string "inf".
 */

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <string>

#include <json.hpp>

#include "tkpinn/errors.hpp"
#include "tkpinn/metrics.hpp"
#include "tkpinn/nlls.hpp"
#include "tkpinn/phantom.hpp"
#include "tkpinn/pinn.hpp"

namespace tkp {

/// Malformed or unknown configuration (a usage error, not a data error).
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DroConfig phantom;
  bool mini = false;
  pinn::PinnConfig pinn;
  nlls::NllsConfig nlls;
  SsimOptions metrics;

  /// Rechecks every section; a bad value is reported as a configuration error.
  void validate() const {
    try {
      pinn.validate();
      nlls.validate();
      phantom.grid.validate();
      phantom.aif.validate();
    } catch (const InvalidInput& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    if (!(phantom.snr > 0)) throw ConfigError("config: SNR must be positive");
    if (phantom.substeps == 0) throw ConfigError("config: phantom substeps must be positive");
    if (metrics.window == 0 || !(metrics.sigma > 0) || metrics.k1 < 0 || metrics.k2 < 0) {
      throw ConfigError("config: invalid SSIM options");
    }
  }

  /// Phantom settings with the parameter grid and seed applied.
  DroConfig dro() const {
    DroConfig d = phantom;
    d.parameters = mini ? ParameterGrid::mini() : ParameterGrid{};
    d.seed = seed;
    return d;
  }
};

namespace config_detail {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name() + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + prefix() + it.key() + "'");
    }
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError("config: '" + prefix() + key + "' must be a number");
      out = v->get<double>();
    }
  }
  void count(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError("config: '" + prefix() + key + "' must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError("config: '" + prefix() + key + "' must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError("config: '" + prefix() + key + "' must be true or false");
      out = v->get<bool>();
    }
  }
  void params(const std::string& key, KineticParams& p) {
    if (const json* v = find(key)) {
      Section s(*v, prefix() + key);
      s.number("Fp", p.Fp);
      s.number("vp", p.vp);
      s.number("ve", p.ve);
      s.number("PS", p.PS);
    }
  }
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  std::string name() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline json params_json(const KineticParams& p) { return {{"Fp", p.Fp}, {"vp", p.vp}, {"ve", p.ve}, {"PS", p.PS}}; }

inline void parse_phantom(Section& s, RunConfig& c) {
  if (const json* v = s.find("snr")) {
    if (v->is_string() && v->get<std::string>() == "inf") {
      c.phantom.snr = std::numeric_limits<double>::infinity();
    } else if (v->is_number()) {
      c.phantom.snr = v->get<double>();
    } else {
      throw ConfigError("config: 'phantom.snr' must be a number or \"inf\"");
    }
  }
  if (const json* v = s.find("snr_reference")) {
    const std::string r = v->is_string() ? v->get<std::string>() : "";
    if (r == "peak") c.phantom.snr_reference = SnrReference::Peak;
    else if (r == "mean") c.phantom.snr_reference = SnrReference::Mean;
    else throw ConfigError("config: 'phantom.snr_reference' must be \"peak\" or \"mean\"");
  }
  s.count("substeps", c.phantom.substeps);
  s.boolean("mini", c.mini);
  if (const json* v = s.find("grid")) {
    Section g(*v, "phantom.grid");
    g.number("t0", c.phantom.grid.t0);
    g.number("dt", c.phantom.grid.dt);
    g.count("n", c.phantom.grid.n);
  }
  if (const json* v = s.find("aif")) {
    Section a(*v, "phantom.aif");
    double t0 = c.phantom.aif.t0, alpha = c.phantom.aif.alpha, beta = c.phantom.aif.beta;
    double peak = c.phantom.aif.peak_value();
    a.number("t0", t0);
    a.number("alpha", alpha);
    a.number("beta", beta);
    a.number("peak", peak);
    if (!(peak > 0 && alpha > 0 && beta > 0)) throw ConfigError("config: AIF peak, alpha and beta must be positive");
    c.phantom.aif = GammaVariateAif::with_peak(peak, t0, alpha, beta);
  }
}

inline void parse_pinn(Section& s, pinn::PinnConfig& p) {
  s.count("iterations", p.iterations);
  s.number("learning_rate", p.learning_rate);
  s.count("n_collocation", p.n_collocation);
  s.boolean("resample_collocation", p.resample_collocation);
  s.count("hidden_units", p.hidden_units);
  s.count("log_interval", p.log_interval);
  s.count("eta_warmup_iterations", p.eta_warmup_iterations);
  if (const json* v = s.find("weights")) {
    Section w(*v, "pinn.weights");
    w.number("data", p.weights.data);
    w.number("residual", p.weights.residual);
    w.number("boundary", p.weights.boundary);
    w.number("regularization", p.weights.regularization);
  }
  s.params("initial_eta", p.initial_eta);
}

inline void parse_nlls(Section& s, nlls::NllsConfig& n) {
  s.count("max_iterations", n.max_iterations);
  s.boolean("log_space", n.log_space);
  s.count("multistart", n.multistart);
  s.number("jitter_decades", n.jitter_decades);
  s.number("damping", n.damping);
  s.number("damping_up", n.damping_up);
  s.number("damping_down", n.damping_down);
  s.number("cost_tol", n.cost_tol);
  s.number("grad_tol", n.grad_tol);
  s.number("step_tol", n.step_tol);
  s.number("fd_step", n.fd_step);
  s.number("max_step", n.max_step);
  s.count("substeps", n.substeps);
  s.params("initial_eta", n.initial);
  s.params("lower", n.lower);
  s.params("upper", n.upper);
}

inline void parse_metrics(Section& s, SsimOptions& m) {
  s.count("window", m.window);
  s.boolean("gaussian", m.gaussian);
  s.number("sigma", m.sigma);
  s.number("k1", m.k1);
  s.number("k2", m.k2);
}

}  // namespace config_detail

/// Applies a JSON document on top of `base`. Throws ConfigError on unknown keys or bad types.
inline RunConfig parse_config(const nlohmann::json& j, RunConfig base = {}) {
  using namespace config_detail;
  Section root(j, "");
  root.u64("seed", base.seed);
  if (const json* v = root.find("phantom")) {
    Section s(*v, "phantom");
    parse_phantom(s, base);
  }
  if (const json* v = root.find("pinn")) {
    Section s(*v, "pinn");
    parse_pinn(s, base.pinn);
  }
  if (const json* v = root.find("nlls")) {
    Section s(*v, "nlls");
    parse_nlls(s, base.nlls);
  }
  if (const json* v = root.find("metrics")) {
    Section s(*v, "metrics");
    parse_metrics(s, base.metrics);
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Full effective configuration, keys sorted, suitable for embedding in outputs.
inline nlohmann::json to_json(const RunConfig& c) {
  using config_detail::params_json;
  nlohmann::json j;
  j["seed"] = c.seed;
  const auto& ph = c.phantom;
  j["phantom"] = {
      {"snr", std::isinf(ph.snr) ? nlohmann::json("inf") : nlohmann::json(ph.snr)},
      {"snr_reference", ph.snr_reference == SnrReference::Peak ? "peak" : "mean"},
      {"substeps", ph.substeps},
      {"mini", c.mini},
      {"grid", {{"t0", ph.grid.t0}, {"dt", ph.grid.dt}, {"n", ph.grid.n}}},
      {"aif", {{"t0", ph.aif.t0}, {"alpha", ph.aif.alpha}, {"beta", ph.aif.beta}, {"peak", ph.aif.peak_value()},
               {"amplitude", ph.aif.amplitude}}}};
  const auto& p = c.pinn;
  j["pinn"] = {{"iterations", p.iterations},
               {"learning_rate", p.learning_rate},
               {"n_collocation", p.n_collocation},
               {"resample_collocation", p.resample_collocation},
               {"hidden_units", p.hidden_units},
               {"log_interval", p.log_interval},
               {"eta_warmup_iterations", p.eta_warmup_iterations},
               {"weights",
                {{"data", p.weights.data},
                 {"residual", p.weights.residual},
                 {"boundary", p.weights.boundary},
                 {"regularization", p.weights.regularization}}},
               {"initial_eta", params_json(p.initial_eta)}};
  const auto& n = c.nlls;
  j["nlls"] = {{"max_iterations", n.max_iterations}, {"log_space", n.log_space},   {"multistart", n.multistart},
               {"jitter_decades", n.jitter_decades}, {"damping", n.damping},       {"damping_up", n.damping_up},
               {"damping_down", n.damping_down},     {"cost_tol", n.cost_tol},     {"grad_tol", n.grad_tol},
               {"step_tol", n.step_tol},             {"fd_step", n.fd_step},       {"max_step", n.max_step},
               {"substeps", n.substeps},             {"initial_eta", params_json(n.initial)},
               {"lower", params_json(n.lower)},      {"upper", params_json(n.upper)}};
  j["metrics"] = {{"window", c.metrics.window},
                  {"gaussian", c.metrics.gaussian},
                  {"sigma", c.metrics.sigma},
                  {"k1", c.metrics.k1},
                  {"k2", c.metrics.k2}};
  return j;
}

}  // namespace tkp
