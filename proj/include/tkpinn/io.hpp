#pragma once

/**
 * @file io.hpp
 * @brief Binary dataset/result files, CSV import/export and heatmap images.
 *
 * PQD1 curve dataset (all fields little-endian):
 *
 *   "PQD1" | u32 x, y, z | f64 t0, dt | u32 n_time | u8 flags
 *   f32 aif[n_time]
 *   f32 curves[x*y*z][n_time]          pixel (z, y, x) order, x fastest
 *   f32 truth[4][x*y*z]                only if flags bit 0 (Fp, vp, ve, PS)
 *   u32 len | UTF-8 metadata[len]
 *
 * PQM1 parameter maps:
 *
 *   "PQM1" | u32 x, y, z | f32 maps[4][x*y*z]
 *   u32 len | method tag | u32 len | config text | u64 seed
 *
 * Files must be exactly as long as their header declares.
 */

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "tkpinn/errors.hpp"
#include "tkpinn/kinetics.hpp"
#include "tkpinn/volume.hpp"

namespace tkp::io {

/// Curves, AIF and optional ground truth as stored on disk (single precision).
struct CurveDataset {
  VolumeDims dims;
  TimeGrid grid;
  std::vector<float> aif;
  std::vector<float> curves;  ///< pixel-major: curves[p * n_time + i]
  std::optional<std::array<std::vector<float>, 4>> truth;
  std::string metadata;

  std::size_t pixels() const { return dims.size(); }
  std::vector<double> aif_values() const { return {aif.begin(), aif.end()}; }
  std::vector<double> curve_values() const { return {curves.begin(), curves.end()}; }
  std::span<const float> curve(std::size_t p) const { return std::span<const float>(curves).subspan(p * grid.n, grid.n); }

  ParameterMaps truth_maps() const {
    if (!truth) throw InvalidInput("dataset carries no ground-truth maps");
    ParameterMaps m(dims);
    for (std::size_t k = 0; k < 4; ++k) m[k].assign((*truth)[k].begin(), (*truth)[k].end());
    return m;
  }

  friend bool operator==(const CurveDataset&, const CurveDataset&) = default;
};

/// Fitted parameter maps with provenance of the run that produced them.
struct MapResult {
  VolumeDims dims;
  std::array<std::vector<float>, 4> maps;
  std::string method;
  std::string config;
  std::uint64_t seed = 0;

  ParameterMaps parameter_maps() const {
    ParameterMaps m(dims);
    for (std::size_t k = 0; k < 4; ++k) m[k].assign(maps[k].begin(), maps[k].end());
    return m;
  }

  static MapResult from(const ParameterMaps& m) {
    MapResult r;
    r.dims = m.dims;
    for (std::size_t k = 0; k < 4; ++k) r.maps[k].assign(m[k].begin(), m[k].end());
    return r;
  }

  friend bool operator==(const MapResult&, const MapResult&) = default;
};

inline std::vector<float> to_f32(std::span<const double> v) { return {v.begin(), v.end()}; }

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void text(std::string_view s) {
    if (s.size() > UINT32_MAX) throw InvalidInput("text field too long");
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<unsigned char>& data() { return out_; }

 private:
  std::vector<unsigned char> out_;
};

/// Bounds-checked little-endian reader; every failure reports its byte offset.
class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (n > remaining()) throw FormatError(std::string("truncated ") + what, pos_);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  std::vector<float> f32s(std::size_t count, const char* what) {
    if (count > remaining() / 4) throw FormatError(std::string("truncated ") + what, pos_);
    std::vector<float> v(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t at = pos_;
      v[i] = std::bit_cast<float>(u32(what));
      if (!std::isfinite(v[i])) throw FormatError(std::string("non-finite value in ") + what, at);
    }
    return v;
  }

  std::string text(const char* what) {
    const std::uint32_t len = u32(what);
    need(len, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), len);
    if (!valid_utf8(s)) throw FormatError(std::string("invalid UTF-8 in ") + what, pos_);
    pos_ += len;
    return s;
  }

  void magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::memcmp(b_.data(), m.data(), m.size()) != 0) throw FormatError("bad magic, expected " + std::string(m), 0);
    pos_ += m.size();
  }

  void finish() const {
    if (remaining() != 0) throw FormatError("trailing bytes after payload", pos_);
  }

  static bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
      const auto c = static_cast<unsigned char>(s[i]);
      std::size_t extra;
      std::uint32_t cp;
      if (c < 0x80) {
        extra = 0, cp = c;
      } else if ((c >> 5) == 0x6) {
        extra = 1, cp = c & 0x1f;
      } else if ((c >> 4) == 0xe) {
        extra = 2, cp = c & 0x0f;
      } else if ((c >> 3) == 0x1e) {
        extra = 3, cp = c & 0x07;
      } else {
        return false;
      }
      if (extra > s.size() - i - 1) return false;
      for (std::size_t k = 1; k <= extra; ++k) {
        const auto cc = static_cast<unsigned char>(s[i + k]);
        if ((cc >> 6) != 0x2) return false;
        cp = (cp << 6) | (cc & 0x3f);
      }
      static constexpr std::uint32_t min_cp[] = {0, 0x80, 0x800, 0x10000};
      if (cp < min_cp[extra] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
      i += extra + 1;
    }
    return true;
  }

 private:
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

inline VolumeDims read_dims(Reader& r) {
  const std::size_t at = r.offset();
  VolumeDims d{r.u32("dims"), r.u32("dims"), r.u32("dims")};
  if (d.x == 0 || d.y == 0 || d.z == 0) throw FormatError("zero volume dimension", at);
  return d;
}

inline void write_dims(Writer& w, const VolumeDims& d) {
  if (d.x > UINT32_MAX || d.y > UINT32_MAX || d.z > UINT32_MAX) throw InvalidInput("volume too large");
  w.u32(static_cast<std::uint32_t>(d.x));
  w.u32(static_cast<std::uint32_t>(d.y));
  w.u32(static_cast<std::uint32_t>(d.z));
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

inline void require_finite(std::span<const float> v, const char* what) {
  for (float x : v) {
    if (!std::isfinite(x)) throw InvalidInput(std::string("non-finite value in ") + what);
  }
}

}  // namespace detail

inline std::vector<unsigned char> encode_dataset(const CurveDataset& d) {
  d.grid.validate();
  const std::size_t k = d.pixels();
  if (k == 0) throw InvalidInput("dataset has no pixels");
  if (d.aif.size() != d.grid.n || d.curves.size() != k * d.grid.n) {
    throw InvalidInput("dataset arrays do not match its dimensions");
  }
  if (d.grid.n > UINT32_MAX) throw InvalidInput("too many time points");
  detail::require_finite(d.aif, "AIF");
  detail::require_finite(d.curves, "curves");
  detail::Writer w;
  w.bytes("PQD1", 4);
  detail::write_dims(w, d.dims);
  w.f64(d.grid.t0);
  w.f64(d.grid.dt);
  w.u32(static_cast<std::uint32_t>(d.grid.n));
  w.u8(d.truth ? 1 : 0);
  w.f32s(d.aif);
  w.f32s(d.curves);
  if (d.truth) {
    for (const auto& m : *d.truth) {
      if (m.size() != k) throw InvalidInput("ground-truth map does not match the volume");
      detail::require_finite(m, "ground truth");
      w.f32s(m);
    }
  }
  w.text(d.metadata);
  return std::move(w.data());
}

inline CurveDataset decode_dataset(std::span<const unsigned char> bytes) {
  detail::Reader r(bytes);
  r.magic("PQD1");
  CurveDataset d;
  d.dims = detail::read_dims(r);
  const std::size_t grid_at = r.offset();
  d.grid.t0 = r.f64("t0");
  d.grid.dt = r.f64("dt");
  d.grid.n = r.u32("n_time");
  if (!std::isfinite(d.grid.t0) || !(d.grid.dt > 0) || !std::isfinite(d.grid.dt) || d.grid.n < 2) {
    throw FormatError("invalid time grid", grid_at);
  }
  const std::size_t flags_at = r.offset();
  const std::uint8_t flags = r.u8("flags");
  if (flags & ~1u) throw FormatError("unknown flag bits", flags_at);

  // Sizes come from untrusted input: compare against what is left before allocating.
  const std::size_t k = d.dims.size();
  if (d.dims.x * d.dims.y != 0 && k / d.dims.x / d.dims.y != d.dims.z) throw FormatError("volume size overflows", 4);
  d.aif = r.f32s(d.grid.n, "AIF");
  if (k > r.remaining() / 4 / d.grid.n) throw FormatError("truncated curves", r.offset());
  d.curves = r.f32s(k * d.grid.n, "curves");
  if (flags & 1u) {
    std::array<std::vector<float>, 4> t;
    for (auto& m : t) m = r.f32s(k, "ground truth");
    d.truth = std::move(t);
  }
  d.metadata = r.text("metadata");
  r.finish();
  return d;
}

inline std::vector<unsigned char> encode_maps(const MapResult& m) {
  const std::size_t k = m.dims.size();
  if (k == 0) throw InvalidInput("map result has no pixels");
  detail::Writer w;
  w.bytes("PQM1", 4);
  detail::write_dims(w, m.dims);
  for (const auto& map : m.maps) {
    if (map.size() != k) throw InvalidInput("map does not match its dimensions");
    detail::require_finite(map, "parameter map");
    w.f32s(map);
  }
  w.text(m.method);
  w.text(m.config);
  w.u64(m.seed);
  return std::move(w.data());
}

inline MapResult decode_maps(std::span<const unsigned char> bytes) {
  detail::Reader r(bytes);
  r.magic("PQM1");
  MapResult m;
  m.dims = detail::read_dims(r);
  const std::size_t k = m.dims.size();
  if (k / m.dims.x / m.dims.y != m.dims.z) throw FormatError("volume size overflows", 4);
  for (auto& map : m.maps) map = r.f32s(k, "parameter map");
  m.method = r.text("method tag");
  m.config = r.text("config");
  m.seed = r.u64("seed");
  r.finish();
  return m;
}

inline void write_dataset(const std::string& path, const CurveDataset& d) { detail::write_file(path, encode_dataset(d)); }
inline CurveDataset read_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }
inline void write_maps(const std::string& path, const MapResult& m) { detail::write_file(path, encode_maps(m)); }
inline MapResult read_maps(const std::string& path) { return decode_maps(detail::read_file(path)); }

// ---------------------------------------------------------------- CSV

namespace detail {

/// Shortest text that parses back to the same value.
template <class T>
std::string format_number(T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream s(line);
  while (std::getline(s, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, std::size_t line, std::size_t col) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end || !std::isfinite(v)) {
    throw InvalidInput("CSV line " + std::to_string(line) + ", column " + std::to_string(col + 1) +
                       ": not a finite number: '" + s + "'");
  }
  return v;
}

}  // namespace detail

/**
 * Curve CSV: header `time,aif,<pixel names...>`, one row per time sample.
 * Imported data becomes a K x 1 x 1 volume in column order.
 */
inline void write_curves_csv(std::ostream& out, const CurveDataset& d) {
  out << "time,aif";
  for (std::size_t p = 0; p < d.pixels(); ++p) out << ",p" << p;
  out << '\n';
  for (std::size_t i = 0; i < d.grid.n; ++i) {
    out << detail::format_number(d.grid.at(i)) << ',' << detail::format_number(d.aif[i]);
    for (std::size_t p = 0; p < d.pixels(); ++p) out << ',' << detail::format_number(d.curves[p * d.grid.n + i]);
    out << '\n';
  }
}

inline CurveDataset read_curves_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("CSV is empty");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3) throw InvalidInput("CSV needs a time column, an AIF column and at least one curve");
  const std::size_t k = header.size() - 2;
  std::vector<double> times, aif;
  std::vector<std::vector<double>> cols(k);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw InvalidInput("CSV line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                         " columns, expected " + std::to_string(header.size()));
    }
    times.push_back(detail::parse_number(cells[0], lineno, 0));
    aif.push_back(detail::parse_number(cells[1], lineno, 1));
    for (std::size_t p = 0; p < k; ++p) cols[p].push_back(detail::parse_number(cells[p + 2], lineno, p + 2));
  }
  CurveDataset d;
  d.grid = TimeGrid::from_samples(times);
  d.dims = {k, 1, 1};
  d.aif = to_f32(aif);
  d.curves.reserve(k * times.size());
  for (const auto& c : cols) d.curves.insert(d.curves.end(), c.begin(), c.end());
  return d;
}

/// Map CSV: `x,y,z,Fp,vp,ve,PS`, one row per pixel in index order.
inline void write_maps_csv(std::ostream& out, const ParameterMaps& m) {
  out << "x,y,z,Fp,vp,ve,PS\n";
  for (std::size_t z = 0; z < m.dims.z; ++z)
    for (std::size_t y = 0; y < m.dims.y; ++y)
      for (std::size_t x = 0; x < m.dims.x; ++x) {
        const std::size_t i = m.dims.index(x, y, z);
        out << x << ',' << y << ',' << z;
        for (std::size_t k = 0; k < 4; ++k) out << ',' << detail::format_number(m[k][i]);
        out << '\n';
      }
}

// ---------------------------------------------------------------- images

struct Heatmap {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  ///< row-major, top row first
  double lo = 0.0, hi = 0.0;
  bool degenerate = false;  ///< zero range: rendered mid-gray
};

/// Linear 8-bit scaling of a map; z-slices are stacked top to bottom.
inline Heatmap render_heatmap(std::span<const double> values, VolumeDims dims,
                              std::optional<std::pair<double, double>> range = std::nullopt) {
  if (values.size() != dims.size() || values.empty()) throw InvalidInput("map does not match its dimensions");
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidInput("map contains non-finite values");
  }
  Heatmap h;
  h.width = dims.x;
  h.height = dims.y * dims.z;
  if (range) {
    h.lo = range->first;
    h.hi = range->second;
    if (!std::isfinite(h.lo) || !std::isfinite(h.hi) || h.hi < h.lo) throw InvalidInput("invalid display range");
  } else {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    h.lo = *lo;
    h.hi = *hi;
  }
  h.degenerate = !(h.hi > h.lo);
  h.pixels.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (h.degenerate) {
      h.pixels[i] = 128;
      continue;
    }
    const double s = std::clamp((values[i] - h.lo) / (h.hi - h.lo), 0.0, 1.0);
    h.pixels[i] = static_cast<std::uint8_t>(std::lround(s * 255.0));
  }
  return h;
}

inline std::vector<unsigned char> encode_pgm(const Heatmap& h) {
  const std::string header = "P5\n" + std::to_string(h.width) + " " + std::to_string(h.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.insert(out.end(), h.pixels.begin(), h.pixels.end());
  return out;
}

inline std::vector<unsigned char> encode_png(const Heatmap& h) {
  auto be32 = [](std::vector<unsigned char>& v, std::uint32_t x) {
    for (int i = 3; i >= 0; --i) v.push_back(static_cast<unsigned char>(x >> (8 * i)));
  };
  auto chunk = [&](std::vector<unsigned char>& out, const char* type, const std::vector<unsigned char>& data) {
    be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    be32(out, static_cast<std::uint32_t>(crc));
  };

  std::vector<unsigned char> raw;
  raw.reserve(h.height * (h.width + 1));
  for (std::size_t y = 0; y < h.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), h.pixels.begin() + static_cast<std::ptrdiff_t>(y * h.width),
               h.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * h.width));
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw Error("PNG compression failed");
  }
  z.resize(zlen);

  std::vector<unsigned char> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<unsigned char> ihdr;
  be32(ihdr, static_cast<std::uint32_t>(h.width));
  be32(ihdr, static_cast<std::uint32_t>(h.height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // 8-bit grayscale
  chunk(out, "IHDR", ihdr);
  chunk(out, "IDAT", z);
  chunk(out, "IEND", {});
  return out;
}

/**
 * Writes `<path>` as PGM (or PNG when the path ends in .png) and the scaling
 * to `<path>.range.txt`. Returns the rendered image.
 */
inline Heatmap export_heatmap(std::span<const double> values, VolumeDims dims, const std::string& path,
                              std::optional<std::pair<double, double>> range = std::nullopt) {
  const Heatmap h = render_heatmap(values, dims, range);
  const bool png = path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0;
  detail::write_file(path, png ? encode_png(h) : encode_pgm(h));
  std::ostringstream side;
  side << "min " << detail::format_number(h.lo) << "\nmax " << detail::format_number(h.hi) << "\n";
  if (h.degenerate) side << "warning zero range, rendered mid-gray\n";
  const std::string s = side.str();
  detail::write_file(path + ".range.txt", std::span<const unsigned char>(
                                              reinterpret_cast<const unsigned char*>(s.data()), s.size()));
  return h;
}

}  // namespace tkp::io
