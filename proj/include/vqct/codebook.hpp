#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "vqct/errors.hpp"
#include "vqct/graph.hpp"
#include "vqct/tensor.hpp"

namespace vqct {

// Row-major batch of vectors: one row per encoder position.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  void append_rows(const Matrix& other) {
    if (rows == 0) cols = other.cols;
    if (other.cols != cols) throw ShapeError("cannot stack matrices with different widths");
    data.insert(data.end(), other.data.begin(), other.data.end());
    rows += other.rows;
  }
};

// [C, spatial...] activation -> (positions x C) matrix.
inline Matrix channels_to_rows(const Tensor& t) {
  const std::size_t c = t.dim(0);
  const std::size_t n = t.size() / c;
  Matrix m(n, c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < n; ++p) m.at(p, ch) = t[ch * n + p];
  return m;
}

inline Tensor rows_to_channels(const Matrix& m, const Shape& shape) {
  Tensor t(shape);
  const std::size_t c = shape.at(0);
  const std::size_t n = t.size() / c;
  if (m.rows != n || m.cols != c) throw ShapeError("matrix does not match activation shape " + shape_str(shape));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < n; ++p) t[ch * n + p] = m.at(p, ch);
  return t;
}

namespace detail {

// Normalizes v in place. Returns false (and writes e0) for a zero vector.
inline bool normalize_vector(double* v, std::size_t dim) {
  double ss = 0.0;
  for (std::size_t i = 0; i < dim; ++i) ss += v[i] * v[i];
  const double norm = std::sqrt(ss);
  if (norm == 0.0 || !std::isfinite(norm)) {
    for (std::size_t i = 0; i < dim; ++i) v[i] = 0.0;
    v[0] = 1.0;
    return false;
  }
  for (std::size_t i = 0; i < dim; ++i) v[i] /= norm;
  return true;
}

// First k entries of a seeded Fisher-Yates shuffle of [0, n).
inline std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

inline float to_storage(double v) { return static_cast<float>(v); }

}  // namespace detail

struct NormalizedRows {
  Matrix rows;
  std::vector<std::size_t> degenerate;  // zero-norm inputs replaced by e0
};

inline NormalizedRows normalize_rows(const Matrix& in) {
  NormalizedRows out{in, {}};
  for (std::size_t r = 0; r < in.rows; ++r)
    if (!detail::normalize_vector(out.rows.row(r), in.cols)) out.degenerate.push_back(r);
  return out;
}

struct QuantizeResult {
  std::vector<std::size_t> indices;
  Matrix quantized;
  double commitment_loss = 0.0;
  std::vector<std::size_t> degenerate_inputs;
};

struct ExpireReport {
  std::vector<std::size_t> replaced;
  bool sampled_with_replacement = false;
};

// Unit-sphere codebook with EMA statistics and per-code staleness ages.
class Codebook {
 public:
  Codebook() = default;
  Codebook(std::size_t size, std::size_t dim) : size_(size), dim_(dim) {
    if (size < 2) throw DomainError("codebook needs at least 2 codes");
    if (dim < 1) throw DomainError("codebook dimension must be positive");
    codes_ = Matrix(size, dim);
    for (std::size_t i = 0; i < size; ++i) codes_.at(i, 0) = 1.0;
    usage_age_.assign(size, 0);
    ema_cluster_size_.assign(size, 1.0);
    ema_embed_sum_ = codes_;
  }

  std::size_t size() const { return size_; }
  std::size_t dim() const { return dim_; }
  bool initialized() const { return initialized_; }
  const Matrix& codes() const { return codes_; }
  const std::vector<std::uint32_t>& usage_age() const { return usage_age_; }
  const std::vector<double>& ema_cluster_size() const { return ema_cluster_size_; }
  const Matrix& ema_embed_sum() const { return ema_embed_sum_; }

  // Installs explicit codes (normalized on entry) and marks the book initialized.
  void set_codes(const Matrix& codes) {
    if (codes.rows != size_ || codes.cols != dim_) throw ShapeError("code matrix has wrong shape");
    codes_ = normalize_rows(codes).rows;
    ema_embed_sum_ = codes_;
    ema_cluster_size_.assign(size_, 1.0);
    usage_age_.assign(size_, 0);
    initialized_ = true;
  }

  // Restores full state from a checkpoint.
  void restore(Matrix codes, std::vector<std::uint32_t> ages, std::vector<double> cluster_size, Matrix embed_sum,
               bool initialized) {
    if (codes.rows != size_ || codes.cols != dim_ || ages.size() != size_ || cluster_size.size() != size_ ||
        embed_sum.rows != size_ || embed_sum.cols != dim_)
      throw FormatError("codebook state does not match its declared shape");
    codes_ = std::move(codes);
    usage_age_ = std::move(ages);
    ema_cluster_size_ = std::move(cluster_size);
    ema_embed_sum_ = std::move(embed_sum);
    initialized_ = initialized;
  }

  // Rounds floating state to 32-bit so that checkpoints round-trip exactly.
  void round_to_storage() {
    for (auto& v : codes_.data) v = detail::to_storage(v);
    for (auto& v : ema_cluster_size_) v = detail::to_storage(v);
    for (auto& v : ema_embed_sum_.data) v = detail::to_storage(v);
  }

  // Lloyd k-means on the (normalized) first batch.
  void kmeans_init(const Matrix& batch, int iters, std::uint64_t seed) {
    if (initialized_) throw DomainError("codebook is already initialized");
    if (iters < 1) throw DomainError("k-means needs at least one iteration");
    if (batch.cols != dim_) throw ShapeError("batch width does not match code dimension");
    if (batch.rows < size_)
      throw DomainError("k-means init needs at least " + std::to_string(size_) + " vectors, got " +
                        std::to_string(batch.rows));
    const Matrix points = normalize_rows(batch).rows;
    std::mt19937_64 rng(seed);
    Matrix centroids(size_, dim_);
    const auto init = detail::sample_distinct(points.rows, size_, rng);
    for (std::size_t k = 0; k < size_; ++k)
      std::copy_n(points.row(init[k]), dim_, centroids.row(k));

    std::vector<std::size_t> assign(points.rows);
    for (int it = 0; it < iters; ++it) {
      for (std::size_t p = 0; p < points.rows; ++p) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < size_; ++k) {
          double d2 = 0.0;
          for (std::size_t c = 0; c < dim_; ++c) {
            const double diff = points.at(p, c) - centroids.at(k, c);
            d2 += diff * diff;
          }
          if (d2 < best) {
            best = d2;
            best_k = k;
          }
        }
        assign[p] = best_k;
      }
      Matrix sums(size_, dim_);
      std::vector<std::size_t> counts(size_, 0);
      for (std::size_t p = 0; p < points.rows; ++p) {
        ++counts[assign[p]];
        for (std::size_t c = 0; c < dim_; ++c) sums.at(assign[p], c) += points.at(p, c);
      }
      std::uniform_int_distribution<std::size_t> pick(0, points.rows - 1);
      for (std::size_t k = 0; k < size_; ++k) {
        if (counts[k] == 0) {
          std::copy_n(points.row(pick(rng)), dim_, centroids.row(k));
          continue;
        }
        for (std::size_t c = 0; c < dim_; ++c)
          centroids.at(k, c) = sums.at(k, c) / static_cast<double>(counts[k]);
      }
    }
    codes_ = normalize_rows(centroids).rows;
    ema_embed_sum_ = codes_;
    ema_cluster_size_.assign(size_, 1.0);
    usage_age_.assign(size_, 0);
    initialized_ = true;
  }

  // Cosine nearest code per input row; ties go to the lowest index.
  QuantizeResult quantize(const Matrix& inputs, double beta = 0.25) const {
    if (!initialized_) throw DomainError("quantize called on an uninitialized codebook");
    if (inputs.cols != dim_)
      throw ShapeError("input width " + std::to_string(inputs.cols) + " does not match code dimension " +
                       std::to_string(dim_));
    auto normed = normalize_rows(inputs);
    QuantizeResult r;
    r.indices.resize(inputs.rows);
    r.quantized = Matrix(inputs.rows, dim_);
    r.degenerate_inputs = std::move(normed.degenerate);
    double total = 0.0;
    for (std::size_t p = 0; p < inputs.rows; ++p) {
      const double* x = normed.rows.row(p);
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < size_; ++k) {
        const double* code = codes_.row(k);
        double dot = 0.0;
        for (std::size_t c = 0; c < dim_; ++c) dot += x[c] * code[c];
        if (dot > best) {
          best = dot;
          best_k = k;
        }
      }
      r.indices[p] = best_k;
      std::copy_n(codes_.row(best_k), dim_, r.quantized.row(p));
      for (std::size_t c = 0; c < dim_; ++c) {
        const double d = x[c] - codes_.at(best_k, c);
        total += d * d;
      }
    }
    r.commitment_loss = inputs.rows ? beta * total / static_cast<double>(inputs.rows) : 0.0;
    return r;
  }

  // EMA of assigned normalized inputs; unassigned codes keep their value and age.
  void ema_update(const Matrix& inputs, const QuantizeResult& result, double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw DomainError("EMA decay must lie in (0, 1)");
    if (inputs.rows != result.indices.size()) throw ShapeError("inputs and quantize result disagree in length");
    const Matrix points = normalize_rows(inputs).rows;
    std::vector<std::size_t> counts(size_, 0);
    Matrix sums(size_, dim_);
    for (std::size_t p = 0; p < points.rows; ++p) {
      const auto k = result.indices[p];
      ++counts[k];
      for (std::size_t c = 0; c < dim_; ++c) sums.at(k, c) += points.at(p, c);
    }
    for (std::size_t k = 0; k < size_; ++k) {
      if (counts[k] == 0) {
        ++usage_age_[k];
        continue;
      }
      usage_age_[k] = 0;
      ema_cluster_size_[k] = decay * ema_cluster_size_[k] + (1.0 - decay) * static_cast<double>(counts[k]);
      for (std::size_t c = 0; c < dim_; ++c) {
        ema_embed_sum_.at(k, c) = decay * ema_embed_sum_.at(k, c) + (1.0 - decay) * sums.at(k, c);
        codes_.at(k, c) = ema_embed_sum_.at(k, c) / ema_cluster_size_[k];
      }
      detail::normalize_vector(codes_.row(k), dim_);
    }
  }

  // Replaces codes idle for >= age_threshold batches with seeded picks from the batch.
  ExpireReport expire_stale(const Matrix& batch, int age_threshold, std::uint64_t seed) {
    if (age_threshold < 1) throw DomainError("age threshold must be >= 1");
    if (batch.rows == 0) throw DomainError("expiration needs a non-empty batch");
    if (batch.cols != dim_) throw ShapeError("batch width does not match code dimension");
    ExpireReport report;
    for (std::size_t k = 0; k < size_; ++k)
      if (usage_age_[k] >= static_cast<std::uint32_t>(age_threshold)) report.replaced.push_back(k);
    if (report.replaced.empty()) return report;

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> picks;
    if (report.replaced.size() <= batch.rows) {
      picks = detail::sample_distinct(batch.rows, report.replaced.size(), rng);
    } else {
      report.sampled_with_replacement = true;
      std::uniform_int_distribution<std::size_t> pick(0, batch.rows - 1);
      for (std::size_t i = 0; i < report.replaced.size(); ++i) picks.push_back(pick(rng));
    }
    for (std::size_t i = 0; i < report.replaced.size(); ++i) {
      const auto k = report.replaced[i];
      std::copy_n(batch.row(picks[i]), dim_, codes_.row(k));
      detail::normalize_vector(codes_.row(k), dim_);
      std::copy_n(codes_.row(k), dim_, ema_embed_sum_.row(k));
      ema_cluster_size_[k] = 1.0;
      usage_age_[k] = 0;
    }
    return report;
  }

 private:
  std::size_t size_ = 0;
  std::size_t dim_ = 0;
  Matrix codes_;
  std::vector<std::uint32_t> usage_age_;
  std::vector<double> ema_cluster_size_;
  Matrix ema_embed_sum_;
  bool initialized_ = false;
};

// Graph node whose forward value is the quantized activation and whose
// Jacobian w.r.t. `inputs` is the identity.
inline NodeId straight_through(Graph& graph, NodeId inputs, const QuantizeResult& result) {
  return graph.straight_through(inputs, rows_to_channels(result.quantized, graph.value(inputs).shape()));
}

}  // namespace vqct
