#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <thread>
#include <vector>

#include "vqct/model.hpp"
#include "vqct/volume.hpp"

namespace vqct {

enum class Plane { Axial, Coronal, Sagittal };

inline const std::array<Plane, 3> kPlanes{Plane::Axial, Plane::Coronal, Plane::Sagittal};

inline std::string to_string(Plane p) {
  switch (p) {
    case Plane::Axial: return "axial";
    case Plane::Coronal: return "coronal";
    case Plane::Sagittal: return "sagittal";
  }
  return "?";
}

// 2D image, column index fastest.
struct Slice {
  std::size_t width = 0, height = 0;
  std::vector<float> pixels;

  float at(std::size_t col, std::size_t row) const { return pixels[col + width * row]; }
  float& at(std::size_t col, std::size_t row) { return pixels[col + width * row]; }
  friend bool operator==(const Slice&, const Slice&) = default;
};

namespace detail {

// (col axis, row axis, fixed axis) of each plane:
// axial = fixed z, (col, row) = (x, y); coronal = fixed y, (x, z);
// sagittal = fixed x, (y, z).
inline std::array<int, 3> plane_axes(Plane p) {
  switch (p) {
    case Plane::Axial: return {0, 1, 2};
    case Plane::Coronal: return {0, 2, 1};
    case Plane::Sagittal: return {1, 2, 0};
  }
  return {0, 1, 2};
}

}  // namespace detail

// Slices in ascending order along the fixed axis.
inline std::vector<Slice> slice_volume(const Volume& v, Plane plane) {
  const auto ax = detail::plane_axes(plane);
  const std::size_t w = v.dims[ax[0]], h = v.dims[ax[1]], n = v.dims[ax[2]];
  std::vector<Slice> out(n, Slice{w, h, std::vector<float>(w * h)});
  std::array<std::size_t, 3> p{};
  for (std::size_t k = 0; k < n; ++k) {
    p[ax[2]] = k;
    for (std::size_t r = 0; r < h; ++r) {
      p[ax[1]] = r;
      for (std::size_t c = 0; c < w; ++c) {
        p[ax[0]] = c;
        out[k].at(c, r) = v.at(p[0], p[1], p[2]);
      }
    }
  }
  return out;
}

// Inverse of slice_volume onto an existing grid description.
inline Volume restack(const std::vector<Slice>& slices, Plane plane, const Dims& dims, const Spacing& spacing,
                      IntensitySpace space) {
  const auto ax = detail::plane_axes(plane);
  if (slices.size() != dims[ax[2]]) throw DomainError("restack: slice count does not match volume extent");
  Volume v(dims, spacing, space);
  std::array<std::size_t, 3> p{};
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const auto& s = slices[k];
    if (s.width != dims[ax[0]] || s.height != dims[ax[1]]) throw DomainError("restack: slice extent mismatch");
    p[ax[2]] = k;
    for (std::size_t r = 0; r < s.height; ++r) {
      p[ax[1]] = r;
      for (std::size_t c = 0; c < s.width; ++c) {
        p[ax[0]] = c;
        v.at(p[0], p[1], p[2]) = s.at(c, r);
      }
    }
  }
  return v;
}

inline std::pair<double, double> normalized_interval(Intensity i) {
  return i == Intensity::Unit01 ? std::pair{0.0, 1.0} : std::pair{-1.0, 1.0};
}

// Normalized value -> HU, clamped to the normalization window.
inline float normalized_to_hu(double v, Intensity i) {
  const auto [lo, hi] = normalized_interval(i);
  const double c = std::clamp(v, lo, hi);
  return static_cast<float>(kHuWindowLo + (c - lo) * (kHuWindowHi - kHuWindowLo) / (hi - lo));
}

inline std::size_t round_up(std::size_t n, std::size_t multiple) { return (n + multiple - 1) / multiple * multiple; }

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto t = static_cast<std::size_t>(std::max(1, threads));
  if (t == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < std::min(t, n); ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += t) fn(i);
    });
}

}  // namespace detail

// Runs each normalized slice through a 2D model. Slices are padded on the
// high side with the normalized air value up to the model granularity, then
// cropped back; outputs are in HU.
inline std::vector<Slice> translate_slices(const Checkpoint& ck, const std::vector<Slice>& slices, int threads = 1) {
  if (ck.config.spatial_rank != 2) throw DomainError("translate_slices needs a 2D model");
  const std::size_t g = ck.config.granularity();
  const float air = static_cast<float>(normalized_interval(ck.intensity).first);
  std::vector<Slice> out(slices.size());
  detail::parallel_for(slices.size(), threads, [&](std::size_t k) {
    const Slice& s = slices[k];
    const std::size_t pw = round_up(s.width, g), ph = round_up(s.height, g);
    Tensor in(Shape{1, ph, pw}, static_cast<double>(air));
    for (std::size_t r = 0; r < s.height; ++r)
      for (std::size_t c = 0; c < s.width; ++c) in[c + pw * r] = s.at(c, r);
    const Tensor y = forward(ck, in).output;
    Slice o{s.width, s.height, std::vector<float>(s.width * s.height)};
    for (std::size_t r = 0; r < s.height; ++r)
      for (std::size_t c = 0; c < s.width; ++c) o.at(c, r) = normalized_to_hu(y[c + pw * r], ck.intensity);
    out[k] = std::move(o);
  });
  return out;
}

// Per-voxel median of three.
inline Volume fuse_median(const Volume& a, const Volume& b, const Volume& c) {
  require_same_grid(a, b, "fuse_median");
  require_same_grid(a, c, "fuse_median");
  Volume out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float x = a.voxels[i], y = b.voxels[i], z = c.voxels[i];
    out.voxels[i] = std::max(std::min(x, y), std::min(std::max(x, y), z));
  }
  return out;
}

struct TriplanarResult {
  Volume axial, coronal, sagittal, fused;

  const Volume& plane(Plane p) const {
    switch (p) {
      case Plane::Axial: return axial;
      case Plane::Coronal: return coronal;
      case Plane::Sagittal: return sagittal;
    }
    return axial;
  }
};

// `input` is already normalized to the checkpoint's intensity space.
inline TriplanarResult translate_volume(const Checkpoint& ck, const Volume& input, int threads = 1) {
  TriplanarResult r;
  std::array<Volume*, 3> dst{&r.axial, &r.coronal, &r.sagittal};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto plane = kPlanes[i];
    *dst[i] = restack(translate_slices(ck, slice_volume(input, plane), threads), plane, input.dims, input.spacing_mm,
                      IntensitySpace::HU);
  }
  r.fused = fuse_median(r.axial, r.coronal, r.sagittal);
  return r;
}

// Raw PET activity -> sCT in HU.
inline TriplanarResult translate_pet(const Checkpoint& ck, const Volume& pet, int threads = 1) {
  if (pet.space != IntensitySpace::Activity) throw DomainError("translate_pet expects an activity volume");
  const auto mode = ck.intensity == Intensity::Unit01 ? IntensitySpace::Unit01 : IntensitySpace::Sym11;
  return translate_volume(ck, normalize(pet, mode), threads);
}

inline constexpr std::size_t kDefaultCubeEdge = 64;

// CT (HU) -> normalized cubes -> 3D model -> stitched HU volume.
inline Volume reconstruct_cubes(const Checkpoint& ck, const Volume& ct, std::size_t edge = kDefaultCubeEdge,
                                int threads = 1) {
  if (ck.config.spatial_rank != 3) throw DomainError("reconstruct_cubes needs a 3D model");
  if (edge % ck.config.granularity() != 0) throw DomainError("cube edge must be divisible by the model granularity");
  const auto mode = ck.intensity == Intensity::Unit01 ? IntensitySpace::Unit01 : IntensitySpace::Sym11;
  const Volume norm = normalize(ct, mode);
  const float air = static_cast<float>(normalized_interval(ck.intensity).first);
  auto cubes = extract_cubes(norm, edge, air);
  detail::parallel_for(cubes.size(), threads, [&](std::size_t k) {
    auto& cv = cubes[k].volume;
    Tensor in(Shape{1, edge, edge, edge});
    for (std::size_t i = 0; i < cv.size(); ++i) in[i] = cv.voxels[i];
    const Tensor y = forward(ck, in).output;
    for (std::size_t i = 0; i < cv.size(); ++i) cv.voxels[i] = normalized_to_hu(y[i], ck.intensity);
    cv.space = IntensitySpace::HU;
  });
  return stitch_cubes(cubes, ct.dims, ct.spacing_mm, IntensitySpace::HU);
}

// CT -> CT through whichever route the checkpoint supports.
inline Volume reconstruct_ct(const Checkpoint& ck, const Volume& ct, int threads = 1,
                             std::size_t cube_edge = kDefaultCubeEdge) {
  if (ck.config.spatial_rank == 3) return reconstruct_cubes(ck, ct, cube_edge, threads);
  const auto mode = ck.intensity == Intensity::Unit01 ? IntensitySpace::Unit01 : IntensitySpace::Sym11;
  return translate_volume(ck, normalize(ct, mode), threads).fused;
}

}  // namespace vqct
