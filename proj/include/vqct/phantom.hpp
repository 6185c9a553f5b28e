#pragma once

// Seeded paired CT/PET phantoms and procedural texture volumes.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "json.hpp"
#include "vqct/volume.hpp"

namespace vqct {

enum class Tissue : std::uint8_t { Air = 0, Lung = 1, Soft = 2, Bone = 3 };

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  double level(double x, double y, double z) const {
    const double dx = (x - center[0]) / radii[0], dy = (y - center[1]) / radii[1], dz = (z - center[2]) / radii[2];
    return dx * dx + dy * dy + dz * dz;
  }
  bool contains(double x, double y, double z) const { return level(x, y, z) <= 1.0; }
};

inline void to_json(nlohmann::json& j, const Ellipsoid& e) { j = {{"center", e.center}, {"radii", e.radii}}; }
inline void from_json(const nlohmann::json& j, Ellipsoid& e) {
  e.center = j.at("center").get<std::array<double, 3>>();
  e.radii = j.at("radii").get<std::array<double, 3>>();
}

struct PhantomGeometry {
  Dims dims{};
  // Elliptical cylinder along z, truncated to [z_lo, z_hi].
  std::array<double, 2> body_center{};
  std::array<double, 2> body_radii{};
  double z_lo = 0, z_hi = 0;
  std::array<Ellipsoid, 2> lungs{};
  // Rib-like shell: normalized body radius in [shell_inner, shell_outer] within the z band.
  double shell_inner = 0.80, shell_outer = 0.88;
  double shell_z_lo = 0, shell_z_hi = 0;
  std::array<double, 2> spine_center{};
  double spine_radius = 0;
  std::vector<Ellipsoid> lesions;

  double body_level(double x, double y) const {
    const double dx = (x - body_center[0]) / body_radii[0], dy = (y - body_center[1]) / body_radii[1];
    return std::sqrt(dx * dx + dy * dy);
  }

  bool in_body(double x, double y, double z) const { return z >= z_lo && z <= z_hi && body_level(x, y) <= 1.0; }

  Tissue label(std::size_t xi, std::size_t yi, std::size_t zi) const {
    const double x = static_cast<double>(xi), y = static_cast<double>(yi), z = static_cast<double>(zi);
    if (!in_body(x, y, z)) return Tissue::Air;
    const double r = body_level(x, y);
    if (z >= shell_z_lo && z <= shell_z_hi && r >= shell_inner && r <= shell_outer) return Tissue::Bone;
    const double sx = x - spine_center[0], sy = y - spine_center[1];
    if (sx * sx + sy * sy <= spine_radius * spine_radius) return Tissue::Bone;
    for (const auto& l : lungs)
      if (l.contains(x, y, z)) return Tissue::Lung;
    return Tissue::Soft;
  }
};

inline void to_json(nlohmann::json& j, const PhantomGeometry& g) {
  j = {{"dims", g.dims},
       {"body_center", g.body_center},
       {"body_radii", g.body_radii},
       {"z_range", {g.z_lo, g.z_hi}},
       {"lungs", g.lungs},
       {"shell_radius_range", {g.shell_inner, g.shell_outer}},
       {"shell_z_range", {g.shell_z_lo, g.shell_z_hi}},
       {"spine_center", g.spine_center},
       {"spine_radius", g.spine_radius},
       {"lesions", g.lesions}};
}

struct PhantomTruth {
  PhantomGeometry geometry;
  std::vector<Tissue> labels;  // same layout as the volumes
  std::uint64_t seed = 0;
};

struct PhantomPair {
  Volume ct;   // HU
  Volume pet;  // activity
  PhantomTruth truth;
};

inline constexpr std::size_t kPhantomMinExtent = 32;

inline PhantomGeometry make_phantom_geometry(const Dims& dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> j(-1.0, 1.0);
  const double nx = static_cast<double>(dims[0]), ny = static_cast<double>(dims[1]), nz = static_cast<double>(dims[2]);
  PhantomGeometry g;
  g.dims = dims;
  g.body_center = {nx / 2.0 + 0.02 * nx * j(rng), ny / 2.0 + 0.02 * ny * j(rng)};
  g.body_radii = {0.40 * nx * (1.0 + 0.05 * j(rng)), 0.30 * ny * (1.0 + 0.05 * j(rng))};
  g.z_lo = 0.04 * nz;
  g.z_hi = 0.96 * nz;
  const double zc = nz / 2.0 + 0.05 * nz * j(rng);
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? -1.0 : 1.0;
    g.lungs[side].center = {g.body_center[0] + sgn * 0.45 * g.body_radii[0] * (1.0 + 0.05 * j(rng)),
                            g.body_center[1] - 0.10 * g.body_radii[1], zc + 0.05 * nz * j(rng)};
    g.lungs[side].radii = {0.30 * g.body_radii[0] * (1.0 + 0.08 * j(rng)),
                           0.50 * g.body_radii[1] * (1.0 + 0.08 * j(rng)), 0.25 * nz * (1.0 + 0.08 * j(rng))};
  }
  g.shell_z_lo = zc - 0.30 * nz;
  g.shell_z_hi = zc + 0.30 * nz;
  g.spine_center = {g.body_center[0] + 0.02 * nx * j(rng), g.body_center[1] + 0.62 * g.body_radii[1]};
  g.spine_radius = std::max(1.5, 0.11 * g.body_radii[1] * (1.0 + 0.1 * j(rng)));

  // Lesions in soft tissue, anterior half, away from lungs and bone.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int tries = 0; g.lesions.size() < 3 && tries < 1000; ++tries) {
    const double ang = 2.0 * M_PI * u(rng);
    const double rad = 0.55 * u(rng);
    const double rr = std::max(1.5, 0.03 * std::min(nx, ny));
    Ellipsoid e{{g.body_center[0] + rad * g.body_radii[0] * std::cos(ang),
                 g.body_center[1] + rad * g.body_radii[1] * std::sin(ang), g.z_lo + (g.z_hi - g.z_lo) * (0.2 + 0.6 * u(rng))},
                {rr, rr, rr}};
    bool clear = true;
    for (const auto& l : g.lungs) {
      Ellipsoid grown{l.center, {l.radii[0] + rr + 1, l.radii[1] + rr + 1, l.radii[2] + rr + 1}};
      if (grown.contains(e.center[0], e.center[1], e.center[2])) clear = false;
    }
    const double sx = e.center[0] - g.spine_center[0], sy = e.center[1] - g.spine_center[1];
    if (std::sqrt(sx * sx + sy * sy) < g.spine_radius + rr + 1) clear = false;
    if (clear) g.lesions.push_back(e);
  }
  return g;
}

namespace detail {

// Separable Gaussian blur, border-clamped.
inline void gaussian_blur(std::vector<double>& data, const Dims& dims, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) ksum += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ksum;
  const std::array<std::size_t, 3> stride{1, dims[0], dims[0] * dims[1]};
  std::vector<double> tmp(data.size());
  for (int axis = 0; axis < 3; ++axis) {
    const auto n = static_cast<std::ptrdiff_t>(dims[axis]);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto pos = static_cast<std::ptrdiff_t>((i / stride[axis]) % dims[axis]);
      const std::size_t base = i - static_cast<std::size_t>(pos) * stride[axis];
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const auto q = std::clamp<std::ptrdiff_t>(pos + t, 0, n - 1);
        acc += k[static_cast<std::size_t>(t + radius)] * data[base + static_cast<std::size_t>(q) * stride[axis]];
      }
      tmp[i] = acc;
    }
    data.swap(tmp);
  }
}

}  // namespace detail

struct PhantomOptions {
  Spacing spacing_mm{1.5, 1.5, 1.5};
  double pet_blur_sigma = 2.0;  // voxels
  double pet_counts_scale = 50.0;
};

// Paired CT (HU) and PET (activity) phantom with its ground-truth labels.
inline PhantomPair generate_phantom_pair(const Dims& dims, std::uint64_t seed, const PhantomOptions& opt = {}) {
  for (auto d : dims)
    if (d < kPhantomMinExtent) throw DomainError("phantom extents must be >= " + std::to_string(kPhantomMinExtent));
  std::mt19937_64 rng(seed);
  PhantomPair pair;
  pair.truth.seed = seed;
  pair.truth.geometry = make_phantom_geometry(dims, rng);
  const auto& g = pair.truth.geometry;
  const std::size_t n = dims[0] * dims[1] * dims[2];
  pair.truth.labels.resize(n);
  pair.ct = Volume(dims, opt.spacing_mm, IntensitySpace::HU);
  pair.pet = Volume(dims, opt.spacing_mm, IntensitySpace::Activity);

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> activity(n, 0.0);
  for (std::size_t z = 0; z < dims[2]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[0]; ++x) {
        const std::size_t i = pair.ct.index(x, y, z);
        const Tissue t = g.label(x, y, z);
        pair.truth.labels[i] = t;
        double hu = -1000.0, act = 0.0;
        switch (t) {
          case Tissue::Air: break;
          case Tissue::Lung:
            hu = -800.0 + 25.0 * noise(rng);
            act = 0.15;
            break;
          case Tissue::Soft:
            // Slow texture plus fine noise.
            hu = 40.0 + 15.0 * std::sin(0.31 * x + 0.17 * y) * std::cos(0.23 * z) + 10.0 * noise(rng);
            act = 1.0;
            break;
          case Tissue::Bone:
            hu = 700.0 + 40.0 * noise(rng);
            act = 0.6;
            break;
        }
        if (t == Tissue::Soft)
          for (const auto& l : g.lesions)
            if (l.contains(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z))) act = 4.0;
        pair.ct.voxels[i] = static_cast<float>(std::clamp(hu, kHuMin, kHuMax));
        activity[i] = act;
      }

  detail::gaussian_blur(activity, dims, opt.pet_blur_sigma);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = activity[i] * opt.pet_counts_scale;
    const double counts = mean > 0.0 ? static_cast<double>(std::poisson_distribution<long>(mean)(rng)) : 0.0;
    pair.pet.voxels[i] = static_cast<float>(counts / opt.pet_counts_scale);
  }
  return pair;
}

inline nlohmann::json truth_to_json(const PhantomTruth& t) {
  std::array<std::size_t, 4> counts{};
  for (auto l : t.labels) ++counts[static_cast<std::size_t>(l)];
  return {{"seed", t.seed},
          {"geometry", t.geometry},
          {"label_counts", {{"air", counts[0]}, {"lung", counts[1]}, {"soft", counts[2]}, {"bone", counts[3]}}}};
}

// Procedural HU texture volume: random ellipsoids over a smooth field plus
// noise. Stand-in corpus for self-supervised pre-training.
inline Volume generate_texture_volume(const Dims& dims, std::uint64_t seed, const Spacing& spacing = {1.5, 1.5, 1.5}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Volume v(dims, spacing, IntensitySpace::HU);
  const double base = -1000.0 + 1100.0 * u(rng);
  std::array<double, 6> freq{};
  for (auto& f : freq) f = 0.05 + 0.4 * u(rng);
  const double amp = 50.0 + 150.0 * u(rng);
  std::vector<std::pair<Ellipsoid, double>> blobs;
  const int count = 6 + static_cast<int>(u(rng) * 10);
  for (int b = 0; b < count; ++b) {
    Ellipsoid e;
    for (int a = 0; a < 3; ++a) {
      e.center[a] = u(rng) * static_cast<double>(dims[a]);
      e.radii[a] = (0.05 + 0.25 * u(rng)) * static_cast<double>(dims[a]);
    }
    blobs.emplace_back(e, -1000.0 + 2500.0 * u(rng));
  }
  for (std::size_t z = 0; z < dims[2]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[0]; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y), fz = static_cast<double>(z);
        double hu = base + amp * std::sin(freq[0] * fx + freq[1] * fy) * std::cos(freq[2] * fz + freq[3] * fx);
        for (const auto& [e, val] : blobs)
          if (e.contains(fx, fy, fz)) hu = val + 0.3 * amp * std::sin(freq[4] * fy + freq[5] * fz);
        hu += 15.0 * noise(rng);
        v.at(x, y, z) = static_cast<float>(std::clamp(hu, kHuMin, kHuMax));
      }
  return v;
}

}  // namespace vqct
