#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqct/io.hpp"
#include "vqct/volume.hpp"

namespace vqct {

struct Mask {
  Dims dims{0, 0, 0};
  std::vector<std::uint8_t> bits;

  Mask() = default;
  explicit Mask(Dims d) : dims(d), bits(d[0] * d[1] * d[2], 0) {}

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator[](std::size_t i) const { return bits[i] != 0; }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct BodyMask {
  Mask mask;
  double threshold_hu = -500.0;
  std::string fill_method = "axial-4-connected";
};

inline constexpr double kBodyThresholdHu = -500.0;
inline constexpr double kDefaultBoneHu = 300.0;
inline constexpr double kPsnrPeak = 4000.0;

// Fills background pixels of one nx*ny slice that are not 4-connected to the
// slice border. `slice` holds 0/1 and is modified in place.
inline void fill_holes_2d(std::uint8_t* slice, std::size_t nx, std::size_t ny) {
  std::vector<std::uint8_t> outside(nx * ny, 0);
  std::deque<std::size_t> queue;
  auto seed = [&](std::size_t x, std::size_t y) {
    const std::size_t i = x + nx * y;
    if (!slice[i] && !outside[i]) {
      outside[i] = 1;
      queue.push_back(i);
    }
  };
  for (std::size_t x = 0; x < nx; ++x) {
    seed(x, 0);
    seed(x, ny - 1);
  }
  for (std::size_t y = 0; y < ny; ++y) {
    seed(0, y);
    seed(nx - 1, y);
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const std::size_t x = i % nx, y = i / nx;
    if (x > 0) seed(x - 1, y);
    if (x + 1 < nx) seed(x + 1, y);
    if (y > 0) seed(x, y - 1);
    if (y + 1 < ny) seed(x, y + 1);
  }
  for (std::size_t i = 0; i < nx * ny; ++i)
    if (!outside[i]) slice[i] = 1;
}

// HU > -500, then per-axial-slice hole filling.
inline BodyMask body_contour(const Volume& ct, double threshold_hu = kBodyThresholdHu) {
  if (ct.space != IntensitySpace::HU) throw DomainError("body contour needs an HU volume");
  BodyMask body{Mask(ct.dims), threshold_hu, "axial-4-connected"};
  for (std::size_t i = 0; i < ct.size(); ++i) body.mask.bits[i] = ct.voxels[i] > threshold_hu ? 1 : 0;
  const std::size_t plane = ct.dims[0] * ct.dims[1];
  for (std::size_t z = 0; z < ct.dims[2]; ++z) fill_holes_2d(body.mask.bits.data() + z * plane, ct.dims[0], ct.dims[1]);
  return body;
}

enum class Region { Whole, Soft, Bone };

inline const std::array<Region, 3> kRegions{Region::Whole, Region::Soft, Region::Bone};

inline std::string to_string(Region r) {
  switch (r) {
    case Region::Whole: return "whole";
    case Region::Soft: return "soft";
    case Region::Bone: return "bone";
  }
  return "?";
}

inline Region region_from_string(const std::string& s) {
  if (s == "whole") return Region::Whole;
  if (s == "soft") return Region::Soft;
  if (s == "bone") return Region::Bone;
  throw DomainError("unknown region '" + s + "'");
}

struct RegionMasks {
  Mask whole, soft, bone;

  const Mask& get(Region r) const {
    switch (r) {
      case Region::Whole: return whole;
      case Region::Soft: return soft;
      case Region::Bone: return bone;
    }
    return whole;
  }
};

inline RegionMasks region_masks(const Volume& ct, const BodyMask& body, double bone_threshold_hu = kDefaultBoneHu) {
  if (body.mask.dims != ct.dims) throw DomainError("region_masks: mask and volume grids differ");
  RegionMasks r{body.mask, Mask(ct.dims), Mask(ct.dims)};
  for (std::size_t i = 0; i < ct.size(); ++i) {
    if (!body.mask[i]) continue;
    (ct.voxels[i] >= bone_threshold_hu ? r.bone : r.soft).bits[i] = 1;
  }
  return r;
}

inline RegionMasks derive_regions(const Volume& ct, double bone_threshold_hu = kDefaultBoneHu) {
  return region_masks(ct, body_contour(ct), bone_threshold_hu);
}

namespace detail {

inline void check_metric_inputs(const Volume& pred, const Volume& gt, const Mask& mask, const char* name) {
  require_same_grid(pred, gt, name);
  if (mask.dims != gt.dims) throw DomainError(std::string(name) + ": mask grid differs from volume grid");
  if (mask.count() == 0) throw DomainError(std::string(name) + ": empty mask");
}

}  // namespace detail

inline double mae(const Volume& pred, const Volume& gt, const Mask& mask) {
  detail::check_metric_inputs(pred, gt, mask, "mae");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (mask[i]) {
      s += std::abs(static_cast<double>(pred.voxels[i]) - gt.voxels[i]);
      ++n;
    }
  return s / static_cast<double>(n);
}

inline double masked_mse(const Volume& pred, const Volume& gt, const Mask& mask) {
  detail::check_metric_inputs(pred, gt, mask, "mse");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (mask[i]) {
      const double d = static_cast<double>(pred.voxels[i]) - gt.voxels[i];
      s += d * d;
      ++n;
    }
  return s / static_cast<double>(n);
}

// +infinity when the masked MSE is zero.
inline double psnr(const Volume& pred, const Volume& gt, const Mask& mask, double peak = kPsnrPeak) {
  const double mse = masked_mse(pred, gt, mask);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double dynamic_range = 4000.0;
  double k1 = 0.01, k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_taps(const SsimOptions& o) {
  const int r = o.window / 2;
  std::vector<double> w(static_cast<std::size_t>(o.window));
  for (int i = -r; i <= r; ++i) w[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (o.sigma * o.sigma));
  return w;
}

// Separable Gaussian mean over one slice. The window is truncated at the
// border and its weights renormalized.
inline std::vector<double> windowed_mean(const std::vector<double>& img, std::size_t nx, std::size_t ny,
                                         const std::vector<double>& taps) {
  const auto r = static_cast<std::ptrdiff_t>(taps.size() / 2);
  std::vector<double> tmp(img.size()), out(img.size());
  std::vector<double> wx(nx), wy(ny);
  for (std::size_t x = 0; x < nx; ++x) {
    double s = 0.0;
    for (std::ptrdiff_t t = -r; t <= r; ++t) {
      const auto q = static_cast<std::ptrdiff_t>(x) + t;
      if (q >= 0 && q < static_cast<std::ptrdiff_t>(nx)) s += taps[static_cast<std::size_t>(t + r)];
    }
    wx[x] = s;
  }
  for (std::size_t y = 0; y < ny; ++y) {
    double s = 0.0;
    for (std::ptrdiff_t t = -r; t <= r; ++t) {
      const auto q = static_cast<std::ptrdiff_t>(y) + t;
      if (q >= 0 && q < static_cast<std::ptrdiff_t>(ny)) s += taps[static_cast<std::size_t>(t + r)];
    }
    wy[y] = s;
  }
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        const auto q = static_cast<std::ptrdiff_t>(x) + t;
        if (q >= 0 && q < static_cast<std::ptrdiff_t>(nx))
          acc += taps[static_cast<std::size_t>(t + r)] * img[static_cast<std::size_t>(q) + nx * y];
      }
      tmp[x + nx * y] = acc / wx[x];
    }
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        const auto q = static_cast<std::ptrdiff_t>(y) + t;
        if (q >= 0 && q < static_cast<std::ptrdiff_t>(ny))
          acc += taps[static_cast<std::size_t>(t + r)] * tmp[x + nx * static_cast<std::size_t>(q)];
      }
      out[x + nx * y] = acc / wy[y];
    }
  return out;
}

}  // namespace detail

// Mean local SSIM over masked pixels, computed slice by slice in the axial
// plane with an 11x11 Gaussian window (sigma 1.5). Weighting slices by their
// masked-pixel count makes this the plain mean over all masked voxels.
inline double ssim(const Volume& pred, const Volume& gt, const Mask& mask, const SsimOptions& o = {}) {
  detail::check_metric_inputs(pred, gt, mask, "ssim");
  const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
  const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
  const auto taps = detail::gaussian_taps(o);
  const std::size_t nx = gt.dims[0], ny = gt.dims[1], plane = nx * ny;
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
  for (std::size_t z = 0; z < gt.dims[2]; ++z) {
    const std::size_t off = z * plane;
    std::size_t in_slice = 0;
    for (std::size_t i = 0; i < plane; ++i) in_slice += mask[off + i] ? 1 : 0;
    if (in_slice == 0) continue;
    for (std::size_t i = 0; i < plane; ++i) {
      a[i] = pred.voxels[off + i];
      b[i] = gt.voxels[off + i];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto ma = detail::windowed_mean(a, nx, ny, taps);
    const auto mb = detail::windowed_mean(b, nx, ny, taps);
    const auto maa = detail::windowed_mean(aa, nx, ny, taps);
    const auto mbb = detail::windowed_mean(bb, nx, ny, taps);
    const auto mab = detail::windowed_mean(ab, nx, ny, taps);
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask[off + i]) continue;
      const double va = maa[i] - ma[i] * ma[i];
      const double vb = mbb[i] - mb[i] * mb[i];
      const double cov = mab[i] - ma[i] * mb[i];
      total += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) /
               ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline double dice(const Mask& a, const Mask& b) {
  if (a.dims != b.dims) throw DomainError("dice: mask grids differ");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    na += a.bits[i];
    nb += b.bits[i];
    both += a.bits[i] & b.bits[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

// Region masks derived independently from each volume by the same rules.
inline double dsc(const Volume& pred_ct, const Volume& gt_ct, Region region, double bone_threshold_hu = kDefaultBoneHu) {
  require_same_grid(pred_ct, gt_ct, "dsc");
  return dice(derive_regions(pred_ct, bone_threshold_hu).get(region), derive_regions(gt_ct, bone_threshold_hu).get(region));
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

struct WilcoxonResult {
  std::size_t n = 0;  // nonzero differences
  double w_plus = 0.0, w_minus = 0.0;
  double w = 0.0;  // min(w_plus, w_minus)
  double p_two_sided = 1.0;
  bool exact = true;
};

inline constexpr std::size_t kWilcoxonExactMaxN = 25;

// Mid-ranks of |d| for nonzero differences (input order preserved).
inline std::vector<double> signed_rank_magnitudes(const std::vector<double>& abs_diffs) {
  std::vector<std::size_t> order(abs_diffs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return abs_diffs[i] < abs_diffs[j]; });
  std::vector<double> ranks(abs_diffs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && abs_diffs[order[j + 1]] == abs_diffs[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

// Two-sided p = P(min(W+, W-) <= observed W) under random signs. Exact by
// dynamic programming over doubled (integer) ranks for n <= 25; otherwise a
// tie-corrected normal approximation with continuity correction.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DomainError("wilcoxon: samples must be paired (equal length)");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    if (!std::isfinite(d)) throw DomainError("wilcoxon: non-finite difference");
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.size() < 5)
    throw DomainError("wilcoxon: need at least 5 nonzero differences, got " + std::to_string(diffs.size()));
  std::vector<double> mags(diffs.size());
  std::transform(diffs.begin(), diffs.end(), mags.begin(), [](double d) { return std::abs(d); });
  const auto ranks = signed_rank_magnitudes(mags);

  WilcoxonResult r;
  r.n = diffs.size();
  for (std::size_t i = 0; i < diffs.size(); ++i) (diffs[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];
  r.w = std::min(r.w_plus, r.w_minus);

  if (r.n <= kWilcoxonExactMaxN) {
    r.exact = true;
    // Mid-ranks are multiples of 1/2, so doubled ranks are integers.
    std::vector<std::size_t> twice(r.n);
    std::size_t tsum = 0;
    for (std::size_t i = 0; i < r.n; ++i) tsum += twice[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
    std::vector<double> ways(tsum + 1, 0.0);
    ways[0] = 1.0;
    for (auto t : twice)
      for (std::size_t s = tsum; s >= t; --s) ways[s] += ways[s - t];
    const auto w2 = static_cast<std::size_t>(std::llround(2.0 * r.w));
    double hits = 0.0;
    for (std::size_t s = 0; s <= tsum; ++s)
      if (std::min(s, tsum - s) <= w2) hits += ways[s];
    r.p_two_sided = std::min(1.0, hits / std::ldexp(1.0, static_cast<int>(r.n)));
  } else {
    r.exact = false;
    const double n = static_cast<double>(r.n);
    const double mean = n * (n + 1.0) / 4.0;
    double tie = 0.0;
    std::vector<double> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie += t * t * t - t;
      i = j + 1;
    }
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    const double z = std::max(0.0, std::abs(r.w - mean) - 0.5) / std::sqrt(var);
    r.p_two_sided = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Difference maps

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Blue (-cap) -> white (0) -> red (+cap), linear in each half.
inline Rgb blue_white_red(double value, double cap) {
  const double t = std::clamp(value / cap, -1.0, 1.0);
  const auto level = [](double f) { return static_cast<std::uint8_t>(std::lround(255.0 * f)); };
  if (t >= 0.0) return {255, level(1.0 - t), level(1.0 - t)};
  return {level(1.0 + t), level(1.0 + t), 255};
}

struct DifferenceMap {
  Volume signed_diff;                       // HU, zero outside the mask
  std::vector<std::vector<Rgb>> axial_rgb;  // one nx*ny image per z
};

inline DifferenceMap difference_map(const Volume& pred, const Volume& gt, const Mask& mask, double cap = 200.0) {
  require_same_grid(pred, gt, "difference_map");
  if (mask.dims != gt.dims) throw DomainError("difference_map: mask grid differs");
  if (!(cap > 0.0)) throw DomainError("difference_map: cap must be positive");
  DifferenceMap m{Volume(gt.dims, gt.spacing_mm, IntensitySpace::HU), {}};
  for (std::size_t i = 0; i < gt.size(); ++i)
    m.signed_diff.voxels[i] = mask[i] ? static_cast<float>(static_cast<double>(pred.voxels[i]) - gt.voxels[i]) : 0.0f;
  const std::size_t plane = gt.dims[0] * gt.dims[1];
  for (std::size_t z = 0; z < gt.dims[2]; ++z) {
    std::vector<Rgb> img(plane);
    for (std::size_t i = 0; i < plane; ++i) img[i] = blue_white_red(m.signed_diff.voxels[z * plane + i], cap);
    m.axial_rgb.push_back(std::move(img));
  }
  return m;
}

// Binary PPM (P6), row y = 0 first.
inline std::string encode_ppm(const std::vector<Rgb>& img, std::size_t width, std::size_t height) {
  if (img.size() != width * height) throw DomainError("image size mismatch");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (const auto& p : img) {
    out.push_back(static_cast<char>(p.r));
    out.push_back(static_cast<char>(p.g));
    out.push_back(static_cast<char>(p.b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string case_id;
  Region region;
  std::string metric;  // MAE, PSNR, SSIM, DSC
  double value;
};

struct EvaluateOptions {
  double bone_threshold_hu = kDefaultBoneHu;
  double psnr_peak = kPsnrPeak;
};

// Four metrics over the three ground-truth regions.
inline std::vector<MetricRow> evaluate_case(const std::string& case_id, const Volume& pred, const Volume& gt,
                                            const EvaluateOptions& opt = {}) {
  require_same_grid(pred, gt, "evaluate_case");
  if (pred.space != IntensitySpace::HU || gt.space != IntensitySpace::HU)
    throw DomainError("evaluate_case expects HU volumes");
  const auto gt_regions = derive_regions(gt, opt.bone_threshold_hu);
  const auto pred_regions = derive_regions(pred, opt.bone_threshold_hu);
  std::vector<MetricRow> rows;
  for (Region r : kRegions) {
    const Mask& m = gt_regions.get(r);
    rows.push_back({case_id, r, "MAE", mae(pred, gt, m)});
    rows.push_back({case_id, r, "PSNR", psnr(pred, gt, m, opt.psnr_peak)});
    rows.push_back({case_id, r, "SSIM", ssim(pred, gt, m)});
    rows.push_back({case_id, r, "DSC", dice(pred_regions.get(r), m)});
  }
  return rows;
}

inline std::string format_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  std::ostringstream oss;
  oss.precision(17);
  oss << v;
  return oss.str();
}

inline double parse_value(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("bad numeric value '" + s + "'");
  }
  if (used != s.size()) throw FormatError("bad numeric value '" + s + "'");
  return v;
}

inline constexpr char kCsvHeader[] = "case_id,region,metric,value";

inline std::string rows_to_csv(const std::vector<MetricRow>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows) out += r.case_id + "," + to_string(r.region) + "," + r.metric + "," + format_value(r.value) + "\n";
  return out;
}

inline std::vector<MetricRow> csv_to_rows(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("report CSV must start with '" + std::string(kCsvHeader) + "'");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw FormatError("report CSV row must have 4 fields: " + line);
    try {
      rows.push_back({f[0], region_from_string(f[1]), f[2], parse_value(f[3])});
    } catch (const DomainError& e) {
      throw FormatError(e.what());
    }
  }
  return rows;
}

// Pairs two reports by case id for one metric/region (sorted case order).
inline std::pair<std::vector<double>, std::vector<double>> paired_values(const std::vector<MetricRow>& a,
                                                                         const std::vector<MetricRow>& b,
                                                                         const std::string& metric, Region region) {
  auto collect = [&](const std::vector<MetricRow>& rows) {
    std::map<std::string, double> m;
    for (const auto& r : rows)
      if (r.metric == metric && r.region == region) m[r.case_id] = r.value;
    return m;
  };
  const auto ma = collect(a), mb = collect(b);
  std::pair<std::vector<double>, std::vector<double>> out;
  for (const auto& [id, v] : ma) {
    auto it = mb.find(id);
    if (it == mb.end()) continue;
    out.first.push_back(v);
    out.second.push_back(it->second);
  }
  return out;
}

inline constexpr double kSignificanceAlpha = 0.05;

struct StatsReport {
  std::string comparison;
  std::size_t n = 0;
  double w = 0.0;
  double p_two_sided = 1.0;
  bool significant = false;
};

// Wilcoxon signed-rank test on one metric/region, paired by case id.
inline StatsReport compare_reports(const std::vector<MetricRow>& a, const std::vector<MetricRow>& b, const std::string& metric,
                                   Region region, const std::string& comparison) {
  const auto [x, y] = paired_values(a, b, metric, region);
  const auto w = wilcoxon_signed_rank(x, y);
  return {comparison, w.n, w.w, w.p_two_sided, w.p_two_sided < kSignificanceAlpha};
}

inline nlohmann::json to_json(const StatsReport& s) {
  return {{"comparison", s.comparison}, {"n", s.n}, {"W", s.w}, {"p_two_sided", s.p_two_sided}, {"significant", s.significant}};
}

}  // namespace vqct
