#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vqct/codebook.hpp"
#include "vqct/evaluation.hpp"

// Independent reference implementations shared by the unit tests and the
// acceptance binary.
namespace vqct::oracle {

// argmax_k <x, c_k> / (|x| |c_k|), first index on ties.
std::size_t cosine_scan(const double* x, const Matrix& codes) {
  double nx = 0.0;
  for (std::size_t c = 0; c < codes.cols; ++c) nx += x[c] * x[c];
  nx = std::sqrt(nx);
  std::size_t best = 0;
  double best_cos = -2.0;
  for (std::size_t k = 0; k < codes.rows; ++k) {
    double dot = 0.0, nc = 0.0;
    for (std::size_t c = 0; c < codes.cols; ++c) {
      dot += x[c] * codes.at(k, c);
      nc += codes.at(k, c) * codes.at(k, c);
    }
    const double cs = dot / (nx * std::sqrt(nc));
    if (cs > best_cos) {
      best_cos = cs;
      best = k;
    }
  }
  return best;
}

// Repeated relaxation: a background pixel is "outside" if it is on the border
// or 4-adjacent to an outside pixel; iterate to a fixed point.
std::vector<std::uint8_t> fill_oracle(std::vector<std::uint8_t> s, std::size_t nx, std::size_t ny) {
  std::vector<std::uint8_t> out(nx * ny, 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        const std::size_t i = x + nx * y;
        if (s[i] || out[i]) continue;
        const bool border = x == 0 || y == 0 || x == nx - 1 || y == ny - 1;
        const bool near = (x > 0 && out[i - 1]) || (x + 1 < nx && out[i + 1]) || (y > 0 && out[i - nx]) ||
                          (y + 1 < ny && out[i + nx]);
        if (border || near) {
          out[i] = 1;
          changed = true;
        }
      }
  }
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = out[i] ? 0 : 1;
  return s;
}

// Direct per-center SSIM with explicitly weighted moments.
double ssim_window_oracle(const Volume& a, const Volume& b, const Mask& m) {
  const double L = 4000.0, c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  const long nx = static_cast<long>(a.dims[0]), ny = static_cast<long>(a.dims[1]);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t z = 0; z < a.dims[2]; ++z)
    for (long cy = 0; cy < ny; ++cy)
      for (long cx = 0; cx < nx; ++cx) {
        if (!m[a.index(static_cast<std::size_t>(cx), static_cast<std::size_t>(cy), z)]) continue;
        double wsum = 0.0, mx = 0.0, my = 0.0;
        for (long dy = -5; dy <= 5; ++dy)
          for (long dx = -5; dx <= 5; ++dx) {
            const long x = cx + dx, y = cy + dy;
            if (x < 0 || y < 0 || x >= nx || y >= ny) continue;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
            wsum += w;
            mx += w * a.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z);
            my += w * b.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z);
          }
        mx /= wsum;
        my /= wsum;
        double vx = 0.0, vy = 0.0, cov = 0.0;
        for (long dy = -5; dy <= 5; ++dy)
          for (long dx = -5; dx <= 5; ++dx) {
            const long x = cx + dx, y = cy + dy;
            if (x < 0 || y < 0 || x >= nx || y >= ny) continue;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5)) / wsum;
            const double ex = a.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z) - mx;
            const double ey = b.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z) - my;
            vx += w * ex * ex;
            vy += w * ey * ey;
            cov += w * ex * ey;
          }
        total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

// Two-sided p by listing all 2^n sign patterns.
double enumeration_p(const std::vector<double>& ranks, double w_obs) {
  const std::size_t n = ranks.size();
  double total = 0.0;
  for (double r : ranks) total += r;
  std::size_t hits = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    double wp = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) wp += ranks[i];
    if (std::min(wp, total - wp) <= w_obs + 1e-9) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(1ULL << n);
}

}  // namespace vqct::oracle
