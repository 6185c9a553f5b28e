#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqct/errors.hpp"
#include "vqct/io.hpp"

namespace vqct {

enum class IntensitySpace { HU, Unit01, Sym11, Activity };

inline std::string to_string(IntensitySpace s) {
  switch (s) {
    case IntensitySpace::HU: return "HU";
    case IntensitySpace::Unit01: return "unit01";
    case IntensitySpace::Sym11: return "sym11";
    case IntensitySpace::Activity: return "activity";
  }
  return "?";
}

inline IntensitySpace intensity_space_from_string(const std::string& s) {
  if (s == "HU") return IntensitySpace::HU;
  if (s == "unit01") return IntensitySpace::Unit01;
  if (s == "sym11") return IntensitySpace::Sym11;
  if (s == "activity") return IntensitySpace::Activity;
  throw FormatError("unknown intensity space '" + s + "'");
}

inline constexpr double kHuMin = -1024.0;
inline constexpr double kHuMax = 3071.0;
// Normalization window.
inline constexpr double kHuWindowLo = -1024.0;
inline constexpr double kHuWindowHi = 2976.0;
inline constexpr double kPetReferencePercentile = 99.5;

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

// Scalar grid, x fastest: index = x + nx * (y + ny * z).
struct Volume {
  Dims dims{0, 0, 0};
  Spacing spacing_mm{1.0, 1.0, 1.0};
  IntensitySpace space = IntensitySpace::HU;
  std::vector<float> voxels;
  // Activity value mapped to the top of the normalized interval (PET only).
  std::optional<double> activity_reference;

  Volume() = default;
  Volume(Dims d, Spacing s, IntensitySpace sp, float fill = 0.0f)
      : dims(d), spacing_mm(s), space(sp), voxels(d[0] * d[1] * d[2], fill) {
    validate_geometry();
  }

  void validate_geometry() const {
    for (auto e : dims)
      if (e == 0) throw DomainError("volume extents must be positive");
    for (auto s : spacing_mm)
      if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("volume spacing must be strictly positive");
  }

  std::size_t size() const { return voxels.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims[0] * (y + dims[1] * z); }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }

  bool same_grid(const Volume& o) const { return dims == o.dims && spacing_mm == o.spacing_mm; }
};

inline void require_same_grid(const Volume& a, const Volume& b, const std::string& where) {
  if (!a.same_grid(b)) throw DomainError(where + ": volumes differ in dims or spacing");
}

// ---------------------------------------------------------------------------
// MVOL: "MVOL0001", u32 LE header length, JSON header, float32 LE voxels.

inline constexpr char kVolumeMagic[] = "MVOL0001";

inline std::string serialize_volume(const Volume& v) {
  nlohmann::json h = {{"dims", v.dims}, {"spacing_mm", v.spacing_mm}, {"intensity_space", to_string(v.space)}};
  if (v.activity_reference) h["activity_reference"] = *v.activity_reference;
  std::string payload;
  io::put_f32_block<float>(payload, v.voxels);
  return io::frame(kVolumeMagic, h.dump(), payload);
}

inline Volume deserialize_volume(const std::string& bytes) {
  const auto framed = io::unframe(kVolumeMagic, bytes, "MVOL");
  Volume v;
  try {
    const auto h = nlohmann::json::parse(framed.header);
    v.dims = h.at("dims").get<Dims>();
    v.spacing_mm = h.at("spacing_mm").get<Spacing>();
    v.space = intensity_space_from_string(h.at("intensity_space").get<std::string>());
    if (h.contains("activity_reference")) v.activity_reference = h.at("activity_reference").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad MVOL header: ") + e.what());
  }
  try {
    v.validate_geometry();
  } catch (const DomainError& e) {
    throw FormatError(e.what());
  }
  const std::size_t n = v.dims[0] * v.dims[1] * v.dims[2];
  if (framed.payload.size() != 4 * n)
    throw FormatError("MVOL payload has " + std::to_string(framed.payload.size()) + " bytes, header implies " +
                      std::to_string(4 * n));
  v.voxels = io::get_f32_block<float>(framed.payload, 0, n);
  return v;
}

inline void write_volume(const Volume& v, const std::string& path) { io::write_file(path, serialize_volume(v)); }

inline Volume read_volume(const std::string& path) { return deserialize_volume(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Resampling

inline Volume resample_trilinear(const Volume& in, const Spacing& target) {
  for (auto t : target)
    if (!(t > 0.0)) throw DomainError("target spacing must be positive");
  Dims od{};
  for (int a = 0; a < 3; ++a)
    od[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(in.dims[a] * in.spacing_mm[a] / target[a])));
  Volume out(od, target, in.space);
  out.activity_reference = in.activity_reference;
  if (od == in.dims && target == in.spacing_mm) {
    out.voxels = in.voxels;
    return out;
  }
  // Per-axis sample positions in input index space, clamped to the border.
  std::array<std::vector<std::size_t>, 3> lo;
  std::array<std::vector<double>, 3> frac;
  for (int a = 0; a < 3; ++a) {
    lo[a].resize(od[a]);
    frac[a].resize(od[a]);
    const double maxc = static_cast<double>(in.dims[a] - 1);
    for (std::size_t i = 0; i < od[a]; ++i) {
      const double c = std::clamp(static_cast<double>(i) * target[a] / in.spacing_mm[a], 0.0, maxc);
      auto l = static_cast<std::size_t>(std::floor(c));
      if (l + 1 >= in.dims[a]) l = in.dims[a] > 1 ? in.dims[a] - 2 : 0;
      lo[a][i] = l;
      frac[a][i] = in.dims[a] > 1 ? c - static_cast<double>(l) : 0.0;
    }
  }
  auto sample = [&](std::size_t x, std::size_t y, std::size_t z) -> double {
    return in.at(std::min(x, in.dims[0] - 1), std::min(y, in.dims[1] - 1), std::min(z, in.dims[2] - 1));
  };
  for (std::size_t z = 0; z < od[2]; ++z)
    for (std::size_t y = 0; y < od[1]; ++y)
      for (std::size_t x = 0; x < od[0]; ++x) {
        const auto x0 = lo[0][x], y0 = lo[1][y], z0 = lo[2][z];
        const double fx = frac[0][x], fy = frac[1][y], fz = frac[2][z];
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
              if (w != 0.0) acc += w * sample(x0 + dx, y0 + dy, z0 + dz);
            }
        out.at(x, y, z) = static_cast<float>(acc);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Intensity normalization

// Nearest-rank percentile.
inline double percentile(std::vector<float> values, double pct) {
  if (values.empty()) throw DomainError("percentile of empty set");
  const auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(values.size())));
  const std::size_t k = std::clamp<std::size_t>(rank, 1, values.size()) - 1;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

namespace detail {

inline std::pair<double, double> interval(IntensitySpace mode) {
  if (mode == IntensitySpace::Unit01) return {0.0, 1.0};
  if (mode == IntensitySpace::Sym11) return {-1.0, 1.0};
  throw DomainError("normalization target must be unit01 or sym11");
}

}  // namespace detail

// HU: clamp to [-1024, 2976] and map affinely. Activity: map [0, P99.5] and
// record the reference for the inverse.
inline Volume normalize(const Volume& v, IntensitySpace mode, std::optional<double> reference = std::nullopt) {
  const auto [lo, hi] = detail::interval(mode);
  Volume out = v;
  out.space = mode;
  double src_lo = 0.0, src_hi = 0.0;
  if (v.space == IntensitySpace::HU) {
    src_lo = kHuWindowLo;
    src_hi = kHuWindowHi;
    out.activity_reference.reset();
  } else if (v.space == IntensitySpace::Activity) {
    src_lo = 0.0;
    src_hi = reference ? *reference : percentile(v.voxels, kPetReferencePercentile);
    out.activity_reference = src_hi;
  } else {
    throw DomainError("normalize expects an HU or activity volume");
  }
  if (!(src_hi > src_lo)) throw DomainError("degenerate normalization range");
  const double scale = (hi - lo) / (src_hi - src_lo);
  for (auto& x : out.voxels) {
    const double c = std::clamp(static_cast<double>(x), src_lo, src_hi);
    x = static_cast<float>(lo + (c - src_lo) * scale);
  }
  return out;
}

// Inverse of normalize. Without an activity reference the result is HU,
// clamped to the normalization window.
inline Volume denormalize(const Volume& v) {
  const auto [lo, hi] = detail::interval(v.space);
  Volume out = v;
  double dst_lo = kHuWindowLo, dst_hi = kHuWindowHi;
  if (v.activity_reference) {
    dst_lo = 0.0;
    dst_hi = *v.activity_reference;
    out.space = IntensitySpace::Activity;
  } else {
    out.space = IntensitySpace::HU;
  }
  const double scale = (dst_hi - dst_lo) / (hi - lo);
  for (auto& x : out.voxels) {
    const double c = std::clamp(static_cast<double>(x), lo, hi);
    x = static_cast<float>(dst_lo + (c - lo) * scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid symmetries: 6 axis permutations x 8 flip patterns.

struct Symmetry {
  std::array<int, 3> perm;  // output axis k reads input axis perm[k]
  std::array<bool, 3> flip;
};

inline Symmetry symmetry(int element) {
  if (element < 0 || element >= 48) throw DomainError("symmetry element must lie in [0, 48)");
  static constexpr std::array<std::array<int, 3>, 6> perms{
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  const int f = element % 8;
  return {perms[static_cast<std::size_t>(element / 8)], {(f & 1) != 0, (f & 2) != 0, (f & 4) != 0}};
}

inline Volume apply_symmetry(const Volume& v, int element) {
  const auto s = symmetry(element);
  Dims od{};
  Spacing os{};
  for (int k = 0; k < 3; ++k) {
    od[k] = v.dims[s.perm[k]];
    os[k] = v.spacing_mm[s.perm[k]];
  }
  Volume out(od, os, v.space);
  out.activity_reference = v.activity_reference;
  std::array<std::size_t, 3> o{}, in{};
  for (o[2] = 0; o[2] < od[2]; ++o[2])
    for (o[1] = 0; o[1] < od[1]; ++o[1])
      for (o[0] = 0; o[0] < od[0]; ++o[0]) {
        for (int k = 0; k < 3; ++k) in[s.perm[k]] = s.flip[k] ? od[k] - 1 - o[k] : o[k];
        out.at(o[0], o[1], o[2]) = v.at(in[0], in[1], in[2]);
      }
  return out;
}

// Element e' with apply(apply(v, e), e') == v.
inline int inverse_symmetry(int element) {
  const auto s = symmetry(element);
  std::array<int, 3> inv_perm{};
  std::array<bool, 3> inv_flip{};
  for (int k = 0; k < 3; ++k) {
    inv_perm[s.perm[k]] = k;
    inv_flip[s.perm[k]] = s.flip[k];
  }
  for (int e = 0; e < 48; ++e) {
    const auto c = symmetry(e);
    if (c.perm == inv_perm && c.flip == inv_flip) return e;
  }
  throw DomainError("no inverse symmetry");  // unreachable
}

inline int augmentation_element(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return static_cast<int>(std::uniform_int_distribution<int>(0, 47)(rng));
}

// One of the 48 axis-aligned cube symmetries, chosen by seed.
inline Volume augment(const Volume& v, std::uint64_t seed) { return apply_symmetry(v, augmentation_element(seed)); }

// ---------------------------------------------------------------------------
// Cube tiling

struct Cube {
  Volume volume;
  Dims origin;
};

// Non-overlapping edge^3 tiles; the volume is padded with `pad_value` up to a
// multiple of edge. Order: x fastest, then y, then z.
inline std::vector<Cube> extract_cubes(const Volume& v, std::size_t edge, float pad_value = 0.0f) {
  if (edge < 8) throw DomainError("cube edge must be >= 8");
  std::array<std::size_t, 3> count{};
  for (int a = 0; a < 3; ++a) count[a] = (v.dims[a] + edge - 1) / edge;
  std::vector<Cube> cubes;
  for (std::size_t cz = 0; cz < count[2]; ++cz)
    for (std::size_t cy = 0; cy < count[1]; ++cy)
      for (std::size_t cx = 0; cx < count[0]; ++cx) {
        Cube c{Volume({edge, edge, edge}, v.spacing_mm, v.space, pad_value), {cx * edge, cy * edge, cz * edge}};
        c.volume.activity_reference = v.activity_reference;
        for (std::size_t z = 0; z < edge && c.origin[2] + z < v.dims[2]; ++z)
          for (std::size_t y = 0; y < edge && c.origin[1] + y < v.dims[1]; ++y)
            for (std::size_t x = 0; x < edge && c.origin[0] + x < v.dims[0]; ++x)
              c.volume.at(x, y, z) = v.at(c.origin[0] + x, c.origin[1] + y, c.origin[2] + z);
        cubes.push_back(std::move(c));
      }
  return cubes;
}

// Places cubes at their origins and crops to `dims`.
inline Volume stitch_cubes(const std::vector<Cube>& cubes, const Dims& dims, const Spacing& spacing,
                           IntensitySpace space) {
  Volume out(dims, spacing, space);
  for (const auto& c : cubes) {
    const auto& d = c.volume.dims;
    for (std::size_t z = 0; z < d[2] && c.origin[2] + z < dims[2]; ++z)
      for (std::size_t y = 0; y < d[1] && c.origin[1] + y < dims[1]; ++y)
        for (std::size_t x = 0; x < d[0] && c.origin[0] + x < dims[0]; ++x)
          out.at(c.origin[0] + x, c.origin[1] + y, c.origin[2] + z) = c.volume.at(x, y, z);
    if (c.volume.activity_reference) out.activity_reference = c.volume.activity_reference;
  }
  return out;
}

}  // namespace vqct
