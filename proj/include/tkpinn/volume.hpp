#pragma once

/**
 * @file volume.hpp
 * @brief Volume dimensions and per-pixel parameter maps.
 */

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tkpinn/errors.hpp"
#include "tkpinn/kinetics.hpp"

namespace tkp {

struct VolumeDims {
  std::size_t x = 0, y = 0, z = 0;

  std::size_t size() const noexcept { return x * y * z; }
  std::size_t slice_size() const noexcept { return x * y; }
  /// z-major, then y, then x.
  std::size_t index(std::size_t ix, std::size_t iy, std::size_t iz) const noexcept { return (iz * y + iy) * x + ix; }
  friend bool operator==(const VolumeDims&, const VolumeDims&) = default;
};

/// Names of the four kinetic parameters in storage order.
inline constexpr std::array<std::string_view, 4> kParameterNames{"Fp", "vp", "ve", "PS"};

inline std::size_t parameter_index(std::string_view name) {
  for (std::size_t i = 0; i < kParameterNames.size(); ++i) {
    if (kParameterNames[i] == name) return i;
  }
  throw InvalidInput("unknown parameter '" + std::string(name) + "'");
}

/// Four scalar maps (Fp, vp, ve, PS) over a volume, each in pixel-index order.
struct ParameterMaps {
  VolumeDims dims;
  std::array<std::vector<double>, 4> maps;

  ParameterMaps() = default;
  explicit ParameterMaps(VolumeDims d) : dims(d) {
    for (auto& m : maps) m.assign(d.size(), 0.0);
  }

  static ParameterMaps from_params(VolumeDims d, std::span<const KineticParams> params) {
    if (params.size() != d.size()) throw InvalidInput("parameter count does not match the volume");
    ParameterMaps out(d);
    for (std::size_t i = 0; i < params.size(); ++i) out.set(i, params[i]);
    return out;
  }

  KineticParams at(std::size_t i) const { return {maps[0][i], maps[1][i], maps[2][i], maps[3][i]}; }
  void set(std::size_t i, const KineticParams& p) {
    maps[0][i] = p.Fp;
    maps[1][i] = p.vp;
    maps[2][i] = p.ve;
    maps[3][i] = p.PS;
  }

  const std::vector<double>& operator[](std::size_t k) const { return maps.at(k); }
  std::vector<double>& operator[](std::size_t k) { return maps.at(k); }

  friend bool operator==(const ParameterMaps&, const ParameterMaps&) = default;
};

}  // namespace tkp
