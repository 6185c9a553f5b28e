#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "vqct/ops.hpp"

using namespace vqct;
using vqct::testing::random_tensor;
using vqct::testing::rel_error;

namespace {

// Naive zero-padded correlation; every tap bounds-checked individually.
Tensor conv_oracle(const Tensor& x, const Tensor& k, const Tensor* b, std::size_t s, std::size_t p) {
  const bool vol = x.rank() == 4;
  const std::size_t ci = x.dim(0), co = k.dim(0);
  const std::size_t D = vol ? x.dim(1) : 1, H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t KD = vol ? k.dim(2) : 1, KH = k.dim(k.rank() - 2), KW = k.dim(k.rank() - 1);
  const std::size_t pd = vol ? p : 0;
  const std::size_t oD = vol ? (D + 2 * pd - KD) / s + 1 : 1;
  const std::size_t oH = (H + 2 * p - KH) / s + 1, oW = (W + 2 * p - KW) / s + 1;
  Shape os = vol ? Shape{co, oD, oH, oW} : Shape{co, oH, oW};
  Tensor out(os);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t z = 0; z < oD; ++z)
      for (std::size_t y = 0; y < oH; ++y)
        for (std::size_t xx = 0; xx < oW; ++xx) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t a = 0; a < KD; ++a)
              for (std::size_t bb = 0; bb < KH; ++bb)
                for (std::size_t c = 0; c < KW; ++c) {
                  const long iz = static_cast<long>(z * (vol ? s : 1) + a) - static_cast<long>(pd);
                  const long iy = static_cast<long>(y * s + bb) - static_cast<long>(p);
                  const long ix = static_cast<long>(xx * s + c) - static_cast<long>(p);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(D) || iy >= static_cast<long>(H) ||
                      ix >= static_cast<long>(W))
                    continue;
                  acc += x[((i * D + iz) * H + iy) * W + ix] * k[(((o * ci + i) * KD + a) * KH + bb) * KW + c];
                }
          out[((o * oD + z) * oH + y) * oW + xx] = acc;
        }
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndSizeMismatch) {
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>(3)), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.reshaped({3, 2}).dim(0), 3u);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Conv, MatchesDirectSummationOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const bool vol = trial % 2 == 1;
    const std::size_t stride = 1 + trial % 3 / 2;
    const std::size_t k = std::array<std::size_t, 4>{1, 3, 2, 5}[trial % 4];
    const std::size_t pad = k / 2;
    const std::size_t ci = 1 + trial % 3, co = 1 + (trial / 3) % 3;
    const std::size_t n = 6 + trial % 3;
    Shape xs = vol ? Shape{ci, n, n - 1, n + 1} : Shape{ci, n, n + 2};
    Shape ks = vol ? Shape{co, ci, k, k, k} : Shape{co, ci, k, k};
    const Tensor x = random_tensor(xs, rng), w = random_tensor(ks, rng), b = random_tensor({co}, rng);
    const Tensor got = conv_forward(x, w, &b, stride, pad);
    const Tensor want = conv_oracle(x, w, &b, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv, IdentityKernelAndKnownValue) {
  Tensor x(Shape{1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor id(Shape{1, 1, 3, 3});
  id[4] = 1.0;
  EXPECT_EQ(conv_forward(x, id, nullptr, 1, 1), x);
  Tensor ones(Shape{1, 1, 3, 3}, 1.0);
  const Tensor y = conv_forward(x, ones, nullptr, 1, 1);
  EXPECT_DOUBLE_EQ(y[4], 45.0);
  EXPECT_DOUBLE_EQ(y[0], 1 + 2 + 4 + 5);
}

TEST(Conv, RejectsBadGeometry) {
  Tensor x(Shape{2, 4, 4});
  EXPECT_THROW(conv_forward(x, Tensor(Shape{1, 3, 3, 3}), nullptr, 1, 1), ShapeError);
  EXPECT_THROW(conv_forward(x, Tensor(Shape{1, 2, 3, 3}), nullptr, 3, 1), DomainError);
  EXPECT_THROW(conv_forward(x, Tensor(Shape{1, 2, 4, 4}), nullptr, 1, 1), DomainError);
  EXPECT_THROW(conv_forward(Tensor(Shape{2, 2}), Tensor(Shape{1, 2, 3, 3}), nullptr, 1, 1), ShapeError);
  EXPECT_THROW(conv_forward(Tensor(Shape{1, 2, 2}), Tensor(Shape{1, 1, 7, 7}), nullptr, 1, 0), DomainError);
}

// Adjoint identity <conv(x), u> = <x, conv_backward(u).input> with the same
// for kernel and bias; then spot-check against central differences.
TEST(Conv, BackwardIsAdjointAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 12; ++trial) {
    const bool vol = trial % 2 == 0;
    const std::size_t stride = trial % 4 < 2 ? 1 : 2;
    const std::size_t k = trial % 3 == 0 ? 2 : 3;
    const std::size_t pad = k / 2;
    Shape xs = vol ? Shape{2, 5, 6, 4} : Shape{2, 7, 6};
    Shape ks = vol ? Shape{3, 2, k, k, k} : Shape{3, 2, k, k};
    const Tensor x = random_tensor(xs, rng), w = random_tensor(ks, rng), b = random_tensor({3}, rng);
    const Tensor y = conv_forward(x, w, &b, stride, pad);
    const Tensor u = random_tensor(y.shape(), rng);
    const ConvGrads g = conv_backward(x, w, stride, pad, u);

    auto objective = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
      return dot(conv_forward(xx, ww, &bb, stride, pad), u);
    };
    const double h = 1e-6;
    for (int probe = 0; probe < 6; ++probe) {
      std::uniform_int_distribution<std::size_t> px(0, x.size() - 1), pw(0, w.size() - 1);
      Tensor xp = x, xm = x;
      const auto i = px(rng);
      xp[i] += h;
      xm[i] -= h;
      EXPECT_LT(rel_error(g.input[i], (objective(xp, w, b) - objective(xm, w, b)) / (2 * h)), 1e-6);
      Tensor wp = w, wm = w;
      const auto j = pw(rng);
      wp[j] += h;
      wm[j] -= h;
      EXPECT_LT(rel_error(g.kernel[j], (objective(x, wp, b) - objective(x, wm, b)) / (2 * h)), 1e-6);
    }
    for (std::size_t o = 0; o < 3; ++o) {
      double s = 0.0;
      const std::size_t per = u.size() / 3;
      for (std::size_t p = 0; p < per; ++p) s += u[o * per + p];
      EXPECT_NEAR(g.bias[o], s, 1e-12);
    }
    const ConvGrads no_input = conv_backward(x, w, stride, pad, u, false);
    EXPECT_TRUE(no_input.input.empty());
    EXPECT_EQ(no_input.kernel, g.kernel);
  }
}

TEST(LeakyRelu, ForwardBackwardAndZeroTakesPositiveBranch) {
  Tensor x(Shape{4}, std::vector<double>{-2.0, 0.0, 3.0, -0.5});
  const Tensor y = leaky_relu_forward(x, 0.1);
  EXPECT_DOUBLE_EQ(y[0], -0.2);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
  EXPECT_DOUBLE_EQ(y[2], 3.0);
  const Tensor g = leaky_relu_backward(x, 0.1, Tensor(Shape{4}, 1.0));
  EXPECT_DOUBLE_EQ(g[0], 0.1);
  EXPECT_DOUBLE_EQ(g[1], 1.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
}

TEST(Upsample, ReplicatesAndBackwardSumsBlocks) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 3, 4}, rng);
  const Tensor y = upsample_nearest_forward(x, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 6, 8}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t q = 0; q < 8; ++q) EXPECT_EQ(y[(c * 6 + r) * 8 + q], x[(c * 3 + r / 2) * 4 + q / 2]);
  const Tensor v = random_tensor({2, 2, 3, 2}, rng);
  const Tensor vy = upsample_nearest_forward(v, 4);
  ASSERT_EQ(vy.shape(), (Shape{2, 8, 12, 8}));
  const Tensor u = random_tensor(vy.shape(), rng);
  const Tensor g = upsample_nearest_backward(v.shape(), 4, u);
  // Adjoint identity.
  EXPECT_NEAR(dot(vy, u), dot(v, g), 1e-10);
}

TEST(ChannelNorm, UnitNormsDegenerateAndGradient) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 3, 3}, rng);
  for (std::size_t c = 0; c < 4; ++c) x[c * 9 + 4] = 0.0;  // one zero vector
  const auto r = l2_normalize_channels(x);
  ASSERT_EQ(r.degenerate, (std::vector<std::size_t>{4}));
  for (std::size_t p = 0; p < 9; ++p) {
    double ss = 0.0;
    for (std::size_t c = 0; c < 4; ++c) ss += r.output[c * 9 + p] * r.output[c * 9 + p];
    EXPECT_NEAR(ss, 1.0, 1e-12);
  }
  EXPECT_EQ(r.output[4], 1.0);
  const Tensor u = random_tensor(x.shape(), rng);
  const Tensor g = l2_normalize_channels_backward(r, u);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(g[c * 9 + 4], 0.0);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i % 9 == 4) continue;
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (dot(l2_normalize_channels(xp).output, u) - dot(l2_normalize_channels(xm).output, u)) / (2 * h);
    EXPECT_LT(rel_error(g[i], fd, 1e-8), 1e-6);
  }
}
